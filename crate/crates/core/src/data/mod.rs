//! Datasets, synthetic generators, splits and table ingestion.

mod ingest;
mod oracle;
mod synth;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use ingest::{ingest_table, TableSchema};
pub use oracle::{oracle_conditional_sample, oracle_sample_one, OracleDraws, ESS_FLOOR, ORACLE_POOL};
pub use synth::{
    gen_ssim, gen_tsim, gen_tsim_rc, lyapunov, phi, phi_inv, Generator, Ssim, SsimConfig, Tsim,
    TsimConfig, TsimRc, TsimRcConfig, TSIM_LABEL_FRAMES,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TsimRc,
    Tsim,
    Ssim,
    External,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::TsimRc => "tsim_rc",
            DatasetKind::Tsim => "tsim",
            DatasetKind::Ssim => "ssim",
            DatasetKind::External => "external",
        }
    }

    pub fn is_synthetic(self) -> bool {
        self != DatasetKind::External
    }
}

/// Features `[N,T,D]`, labels in `[0,K)` and, for synthetic data, the
/// generator that produced them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub num_classes: usize,
    pub kind: DatasetKind,
    pub generator: Option<Arc<Generator>>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, num_classes: usize, kind: DatasetKind) -> Result<Self> {
        ensure!(x.ndim() == 3, Dimension, "features must be [N,T,D], got {:?}", x.shape());
        ensure!(
            y.len() == x.shape()[0],
            Dimension,
            "{} labels for {} samples",
            y.len(),
            x.shape()[0]
        );
        if let Some(&bad) = y.iter().find(|&&v| v >= num_classes) {
            return Err(Error::Domain(format!("label {bad} outside [0,{num_classes})")));
        }
        Ok(Dataset {
            x,
            y,
            num_classes,
            kind,
            generator: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn timesteps(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.x.shape()[2]
    }

    /// Samples at `index`, sharing the generator record.
    pub fn subset(&self, index: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(index),
            y: index.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes,
            kind: self.kind,
            generator: self.generator.clone(),
        }
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.x.row(i)
    }

    /// Class frequencies.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }
}

/// Partition sizes, as counts or as fractions of the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "snake_case")]
pub enum SplitSpec {
    Counts {
        train: usize,
        priorfit: usize,
        test: usize,
    },
    Fractions {
        train: f64,
        priorfit: f64,
        test: f64,
    },
}

impl SplitSpec {
    pub fn for_kind(kind: DatasetKind) -> SplitSpec {
        match kind {
            DatasetKind::TsimRc => SplitSpec::Counts {
                train: 3000,
                priorfit: 0,
                test: 3000,
            },
            DatasetKind::Tsim | DatasetKind::Ssim => SplitSpec::Counts {
                train: 3000,
                priorfit: 500,
                test: 3000,
            },
            DatasetKind::External => SplitSpec::Fractions {
                train: 0.6,
                priorfit: 0.1,
                test: 0.3,
            },
        }
    }

    fn counts(&self, n: usize) -> Result<[usize; 3]> {
        match *self {
            SplitSpec::Counts {
                train,
                priorfit,
                test,
            } => {
                ensure!(
                    train + priorfit + test <= n,
                    Config,
                    "split {train}+{priorfit}+{test} oversubscribes {n} samples"
                );
                Ok([train, priorfit, test])
            }
            SplitSpec::Fractions {
                train,
                priorfit,
                test,
            } => {
                let fr = [train, priorfit, test];
                ensure!(
                    fr.iter().all(|f| (0.0..=1.0).contains(f))
                        && (fr.iter().sum::<f64>() - 1.0).abs() < 1e-9,
                    Config,
                    "split fractions {fr:?} must be in [0,1] and sum to 1"
                );
                let a = (train * n as f64).floor() as usize;
                let b = (priorfit * n as f64).floor() as usize;
                Ok([a, b, n - a - b])
            }
        }
    }
}

/// Shuffled, disjoint index sets `(train, priorfit, test)`.
pub fn split_indices(n: usize, spec: &SplitSpec, seed: u64) -> Result<[Vec<usize>; 3]> {
    let [a, b, c] = spec.counts(n)?;
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).split("split").shuffle(&mut idx);
    Ok([
        idx[..a].to_vec(),
        idx[a..a + b].to_vec(),
        idx[a + b..a + b + c].to_vec(),
    ])
}

/// Train, optional prior-fitting and test partitions.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub priorfit: Option<Dataset>,
    pub test: Dataset,
}

pub fn split(ds: &Dataset, spec: &SplitSpec, seed: u64) -> Result<Splits> {
    let [a, b, c] = split_indices(ds.len(), spec, seed)?;
    ensure!(
        !a.is_empty() && !c.is_empty(),
        Config,
        "train and test partitions must be nonempty"
    );
    Ok(Splits {
        train: ds.subset(&a),
        priorfit: (!b.is_empty()).then(|| ds.subset(&b)),
        test: ds.subset(&c),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_disjointness() {
        let spec = SplitSpec::Counts {
            train: 3000,
            priorfit: 500,
            test: 3000,
        };
        let [a, b, c] = split_indices(6500, &spec, 4).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (3000, 500, 3000));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).cloned().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 6500);
        assert_eq!(split_indices(6500, &spec, 4).unwrap(), [a, b, c]);
    }

    #[test]
    fn oversubscribed_split_rejected() {
        let spec = SplitSpec::Counts {
            train: 10,
            priorfit: 0,
            test: 10,
        };
        assert!(matches!(split_indices(15, &spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn fractional_split_is_exhaustive() {
        let spec = SplitSpec::for_kind(DatasetKind::External);
        let [a, b, c] = split_indices(101, &spec, 0).unwrap();
        assert_eq!(a.len() + b.len() + c.len(), 101);
        assert_eq!((a.len(), b.len()), (60, 10));
    }

    #[test]
    fn subset_is_drawn_subset() {
        let x = Tensor::from_fn(&[4, 1, 2], |i| i as f64);
        let ds = Dataset::new(x, vec![0, 1, 0, 1], 2, DatasetKind::External).unwrap();
        let s = ds.subset(&[3, 1]);
        assert_eq!(s.x.data(), &[6.0, 7.0, 2.0, 3.0]);
        assert_eq!(s.y, vec![1, 1]);
    }
}
