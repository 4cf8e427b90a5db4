use alloc::vec::Vec;
use core::cell::{Cell, RefCell};

use super::{WindowBatch, WindowDataset};
use crate::{Error, Result};

/// Random access to input windows by sample index.
pub trait WindowSource {
    fn window_len(&self) -> usize;
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn window(&self, index: usize) -> &[f64];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl WindowSource for WindowDataset {
    fn window_len(&self) -> usize {
        self.inputs.window_len()
    }
    fn dim(&self) -> usize {
        self.inputs.dim()
    }
    fn len(&self) -> usize {
        self.inputs.len()
    }
    fn window(&self, index: usize) -> &[f64] {
        self.inputs.window(index)
    }
}

impl WindowSource for WindowBatch {
    fn window_len(&self) -> usize {
        WindowBatch::window_len(self)
    }
    fn dim(&self) -> usize {
        WindowBatch::dim(self)
    }
    fn len(&self) -> usize {
        WindowBatch::len(self)
    }
    fn window(&self, index: usize) -> &[f64] {
        WindowBatch::window(self, index)
    }
}

/// Wraps a source and records every index read, for leakage audits.
pub struct TracingSource<S> {
    inner: S,
    max_seen: Cell<Option<usize>>,
    reads: RefCell<Vec<usize>>,
}

impl<S: WindowSource> TracingSource<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            max_seen: Cell::new(None),
            reads: RefCell::new(Vec::new()),
        }
    }

    pub fn max_seen(&self) -> Option<usize> {
        self.max_seen.get()
    }

    /// Clears the trace, returning the indices read since the last reset.
    pub fn take_reads(&self) -> Vec<usize> {
        self.max_seen.set(None);
        core::mem::take(&mut *self.reads.borrow_mut())
    }

    pub fn into_inner(self) -> S {
        self.inner
    }
}

impl<S: WindowSource> WindowSource for TracingSource<S> {
    fn window_len(&self) -> usize {
        self.inner.window_len()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn len(&self) -> usize {
        self.inner.len()
    }
    fn window(&self, index: usize) -> &[f64] {
        self.reads.borrow_mut().push(index);
        self.max_seen
            .set(Some(self.max_seen.get().map_or(index, |m| m.max(index))));
        self.inner.window(index)
    }
}

/// The unlabeled context batch for one day: the `W` most recent windows
/// ending at sample `day`, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    pub day: usize,
    pub indices: Vec<usize>,
    pub batch: WindowBatch,
}

impl Context {
    /// Position of `day`'s own window in the batch.
    pub fn today_position(&self) -> Result<usize> {
        self.indices
            .iter()
            .position(|&i| i == self.day)
            .ok_or(Error::Invariant("context does not contain the current day's window"))
    }

    pub fn check_causal(&self) -> Result<()> {
        match self.indices.iter().find(|&&i| i > self.day) {
            Some(&index) => Err(Error::Causality { day: self.day, index }),
            None => Ok(()),
        }
    }
}

/// Reads windows `day + 1 - W ..= day` (clipped at 0) from `source`.
pub fn build_context<S: WindowSource + ?Sized>(source: &S, day: usize, context_size: usize) -> Result<Context> {
    if context_size == 0 {
        return Err(Error::config("context_size", "must be at least 1"));
    }
    if day >= source.len() {
        return Err(Error::dim("day index", source.len(), day));
    }
    let start = (day + 1).saturating_sub(context_size);
    let indices: Vec<usize> = (start..=day).collect();
    let mut batch = WindowBatch::empty(source.window_len(), source.dim());
    for &i in &indices {
        batch.push(source.window(i))?;
    }
    Ok(Context { day, indices, batch })
}
