use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use super::SeriesFrame;
use crate::{Error, Result};

/// Exclusive end timestamps of the training and validation periods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBoundaries {
    pub train_end: i64,
    pub valid_end: i64,
}

/// A named test sub-period `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regime {
    pub name: String,
    pub start: i64,
    pub end: i64,
}

/// Row ranges of a chronological train / validation / test split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
    pub regimes: Vec<Regime>,
    /// Regime index of each test row (`None` outside every regime).
    pub test_regimes: Vec<Option<usize>>,
}

impl SplitDescriptor {
    pub fn regime_of_row(&self, row: usize) -> Option<usize> {
        if self.test.contains(&row) {
            self.test_regimes[row - self.test.start]
        } else {
            None
        }
    }
}

pub fn chrono_split(frame: &SeriesFrame, bounds: SplitBoundaries, regimes: &[Regime]) -> Result<SplitDescriptor> {
    let ts = frame.timestamps();
    if ts.is_empty() {
        return Err(Error::Empty("frame"));
    }
    if bounds.valid_end <= bounds.train_end {
        return Err(Error::config("split", "validation end must follow training end"));
    }
    let train_end = frame.lower_bound(bounds.train_end);
    let valid_end = frame.lower_bound(bounds.valid_end);
    if train_end == 0 {
        return Err(Error::config("split", "training split is empty"));
    }
    if valid_end == train_end {
        return Err(Error::config("split", "validation split is empty"));
    }
    if valid_end >= ts.len() {
        return Err(Error::config("split", "test split is empty"));
    }
    for w in regimes.windows(2) {
        if w[1].start < w[0].end {
            return Err(Error::config("regimes", "regimes must be ordered and non-overlapping"));
        }
    }
    if regimes.iter().any(|r| r.end <= r.start) {
        return Err(Error::config("regimes", "regime end must follow start"));
    }
    let test = valid_end..ts.len();
    let test_regimes = ts[test.clone()]
        .iter()
        .map(|&t| regimes.iter().position(|r| r.start <= t && t < r.end))
        .collect();
    Ok(SplitDescriptor {
        train: 0..train_end,
        valid: train_end..valid_end,
        test,
        regimes: regimes.to_vec(),
        test_regimes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;
    use alloc::string::ToString;
    use alloc::vec;

    fn frame(n: i64) -> SeriesFrame {
        SeriesFrame::new(
            (0..n).map(|i| i * 10).collect(),
            vec!["x".to_string()],
            (0..n).map(|i| i as f64).collect(),
            Provenance::Raw,
        )
        .unwrap()
    }

    #[test]
    fn disjoint_and_chronological() {
        let f = frame(100);
        let s = chrono_split(
            &f,
            SplitBoundaries {
                train_end: 600,
                valid_end: 800,
            },
            &[],
        )
        .unwrap();
        assert_eq!(s.train, 0..60);
        assert_eq!(s.valid, 60..80);
        assert_eq!(s.test, 80..100);
        let ts = f.timestamps();
        assert!(ts[s.train.end - 1] < ts[s.valid.start]);
        assert!(ts[s.valid.end - 1] < ts[s.test.start]);
    }

    #[test]
    fn empty_train_rejected() {
        let f = frame(10);
        assert!(chrono_split(
            &f,
            SplitBoundaries {
                train_end: 0,
                valid_end: 50
            },
            &[]
        )
        .is_err());
        assert!(chrono_split(
            &f,
            SplitBoundaries {
                train_end: 50,
                valid_end: 40
            },
            &[]
        )
        .is_err());
        assert!(chrono_split(
            &f,
            SplitBoundaries {
                train_end: 50,
                valid_end: 1000
            },
            &[]
        )
        .is_err());
    }

    #[test]
    fn regime_tags() {
        let f = frame(100);
        let regimes = vec![
            Regime {
                name: "a".into(),
                start: 800,
                end: 850,
            },
            Regime {
                name: "b".into(),
                start: 850,
                end: 2000,
            },
        ];
        let s = chrono_split(
            &f,
            SplitBoundaries {
                train_end: 600,
                valid_end: 800,
            },
            &regimes,
        )
        .unwrap();
        assert_eq!(s.regime_of_row(80), Some(0));
        assert_eq!(s.regime_of_row(84), Some(0));
        assert_eq!(s.regime_of_row(85), Some(1));
        assert_eq!(s.regime_of_row(10), None);
    }
}
