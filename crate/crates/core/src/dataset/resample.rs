use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleConfig {
    pub per_class_target: usize,
    pub seed: u64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            per_class_target: 4000,
            seed: 0,
        }
    }
}

/// Minority-first class balancing without replacement.
///
/// Classes are visited from rarest to most common (ties by name). For each
/// class, randomly ordered records bearing it that are not yet in the sample
/// are added until the sample holds `per_class_target` records of the class
/// or none remain. A record counts toward every class it carries, so classes
/// that co-occur with rare ones can end up above the target.
///
/// The result keeps the source order of the selected records.
pub fn resample_dataset(source: &Dataset, config: &ResampleConfig) -> Result<Dataset> {
    if source.is_empty() {
        return Err(DatasetError::Empty);
    }
    let vocab = source.vocabulary();
    let counts = source.class_counts();
    let mut classes: Vec<usize> = (0..vocab.len()).filter(|&c| counts[c] > 0).collect();
    classes.sort_by(|&a, &b| counts[a].cmp(&counts[b]).then_with(|| vocab.names()[a].cmp(&vocab.names()[b])));

    let records = source.records();
    let mut included = vec![false; records.len()];
    let mut in_sample = vec![0usize; vocab.len()];
    let mut rng = rng::stream(config.seed, rng::domain::RESAMPLE, 0);
    for &class in &classes {
        if in_sample[class] >= config.per_class_target {
            continue;
        }
        let mut candidates: Vec<usize> = (0..records.len())
            .filter(|&i| !included[i] && records[i].labels.contains(class))
            .collect();
        candidates.shuffle(&mut rng);
        for i in candidates {
            if in_sample[class] >= config.per_class_target {
                break;
            }
            included[i] = true;
            let n = in_sample.len();
            for c in records[i].labels.iter().filter(|&c| c < n) {
                in_sample[c] += 1;
            }
        }
    }
    let chosen: Vec<usize> = (0..records.len()).filter(|&i| included[i]).collect();
    Ok(source.subset(
        &chosen,
        format!(
            "{} | resampled target={} seed={}",
            source.provenance().source,
            config.per_class_target,
            config.seed
        ),
    ))
}
