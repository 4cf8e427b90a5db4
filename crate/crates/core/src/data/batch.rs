use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A batch of `n` input windows, each `window_len × dim`, stored
/// window-major then time-major: `data[(w * window_len + t) * dim + c]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowBatch {
    window_len: usize,
    dim: usize,
    data: Vec<f64>,
}

impl WindowBatch {
    pub fn new(window_len: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if window_len == 0 || dim == 0 {
            return Err(Error::config("window", "window length and dimension must be positive"));
        }
        if data.len() % (window_len * dim) != 0 {
            return Err(Error::dim(
                "window batch buffer",
                (data.len() / (window_len * dim) + 1) * window_len * dim,
                data.len(),
            ));
        }
        Ok(Self { window_len, dim, data })
    }

    pub fn empty(window_len: usize, dim: usize) -> Self {
        Self {
            window_len,
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_windows<'a>(
        window_len: usize,
        dim: usize,
        windows: impl IntoIterator<Item = &'a [f64]>,
    ) -> Result<Self> {
        let mut batch = Self::empty(window_len, dim);
        for w in windows {
            batch.push(w)?;
        }
        Ok(batch)
    }

    #[inline]
    pub fn window_len(&self) -> usize {
        self.window_len
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn window_size(&self) -> usize {
        self.window_len * self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.window_size()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn window(&self, i: usize) -> &[f64] {
        let s = self.window_size();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.window_size())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn push(&mut self, window: &[f64]) -> Result<()> {
        if window.len() != self.window_size() {
            return Err(Error::dim("window", self.window_size(), window.len()));
        }
        self.data.extend_from_slice(window);
        Ok(())
    }

    pub fn extend(&mut self, other: &WindowBatch) -> Result<()> {
        if other.window_len != self.window_len || other.dim != self.dim {
            return Err(Error::dim("window shape", self.window_size(), other.window_size()));
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.window_size());
        for &i in indices {
            data.extend_from_slice(self.window(i));
        }
        Self {
            window_len: self.window_len,
            dim: self.dim,
            data,
        }
    }

    /// Index of the first window containing a non-finite value.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.iter().position(|w| w.iter().any(|v| !v.is_finite()))
    }
}
