//! Record collections: labels, resampling, splits, batching and storage.

mod batch;
mod io;
mod labels;
mod resample;

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{batch_iterator, label_matrix, BatchIter};
pub use io::{load_dataset, save_dataset, DatasetPaths, Manifest, FORMAT_VERSION, RECORD_MAGIC};
pub use labels::{class, display_name, ClassEntry, LabelVocabulary, TABLE1_CLASSES};
pub use resample::{resample_dataset, ResampleConfig};

use crate::record::EcgRecord;
use crate::rng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad magic bytes {0:?}, not a record file")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("record file truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: u64, found: u64 },
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    InvalidFractions((f64, f64, f64)),
    #[error("dataset is empty")]
    Empty,
    #[error("batch size must be at least 1")]
    ZeroBatch,
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// Where a dataset came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub generator_seed: Option<u64>,
}

/// An immutable ordered collection of records over one vocabulary.
///
/// Records are reference counted so that subsets, splits and resamples share
/// storage with their source.
#[derive(Clone, Debug)]
pub struct Dataset {
    records: Vec<Arc<EcgRecord>>,
    vocabulary: LabelVocabulary,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(records: Vec<Arc<EcgRecord>>, vocabulary: LabelVocabulary, provenance: Provenance) -> Self {
        Self {
            records,
            vocabulary,
            provenance,
        }
    }

    pub fn from_records(records: Vec<EcgRecord>, vocabulary: LabelVocabulary, provenance: Provenance) -> Self {
        Self::new(records.into_iter().map(Arc::new).collect(), vocabulary, provenance)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Arc<EcgRecord>] {
        &self.records
    }

    pub fn vocabulary(&self) -> &LabelVocabulary {
        &self.vocabulary
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Positive count per vocabulary class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.vocabulary.len()];
        for r in &self.records {
            for c in r.labels.iter().filter(|&c| c < self.vocabulary.len()) {
                counts[c] += 1;
            }
        }
        counts
    }

    pub fn count_of(&self, class: &str) -> Option<usize> {
        let i = self.vocabulary.index_of(class)?;
        Some(self.records.iter().filter(|r| r.labels.contains(i)).count())
    }

    /// Records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], source: impl Into<String>) -> Self {
        Self {
            records: indices.iter().map(|&i| Arc::clone(&self.records[i])).collect(),
            vocabulary: self.vocabulary.clone(),
            provenance: Provenance {
                source: source.into(),
                generator_seed: self.provenance.generator_seed,
            },
        }
    }
}

/// Seeded shuffle followed by a contiguous three-way partition.
pub fn split_dataset(ds: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidFractions(fractions));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::domain::SPLIT, 0));
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let parts = [
        &order[..n_train],
        &order[n_train..n_train + n_val],
        &order[n_train + n_val..],
    ];
    let base = &ds.provenance.source;
    Ok((
        ds.subset(parts[0], format!("{base} | split train seed={seed}")),
        ds.subset(parts[1], format!("{base} | split val seed={seed}")),
        ds.subset(parts[2], format!("{base} | split test seed={seed}")),
    ))
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use crate::record::{LabelSet, LEADS, SAMPLES};

    /// Records whose voltages encode their index, with the given label sets.
    pub fn tagged(labels: &[LabelSet]) -> Dataset {
        let records = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let mut v = vec![0.0f32; LEADS * SAMPLES];
                v[0] = i as f32;
                EcgRecord::new(v, l, format!("r{i:05}")).unwrap()
            })
            .collect();
        Dataset::from_records(records, LabelVocabulary::standard(), Provenance::default())
    }
}
