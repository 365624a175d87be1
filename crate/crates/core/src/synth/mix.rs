use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::rhythm::{rhythm, RhythmGenerator};
use super::{synthesize_record, NoiseConfig, Result, RhythmSpec, SynthError};
use crate::dataset::{Dataset, LabelVocabulary, Provenance};
use crate::record::EcgRecord;
use crate::rng;

/// Built-in mixes by name.
pub const PRESETS: [(&str, &str); 2] = [
    ("table1", include_str!("presets/table1.json")),
    ("multitask-desk", include_str!("presets/multitask_desk.json")),
];

/// How many records of each rhythm to generate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClassMix {
    /// Exact counts; they must sum to the requested size.
    Counts { counts: BTreeMap<String, usize> },
    /// Fractions of the requested size. Fractions may sum to less than one;
    /// the remainder is plain sinus rhythm.
    Frequencies { frequencies: BTreeMap<String, f64> },
    /// Relative counts scaled to the requested size.
    Proportional { counts: BTreeMap<String, usize> },
}

/// Integer apportionment of `n` by the largest-remainder rule; ties go to the
/// earlier entry.
fn largest_remainder(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let short = n - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out
}

impl ClassMix {
    pub fn preset(name: &str) -> Result<Self> {
        let (_, json) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| SynthError::UnknownPreset(name.to_string()))?;
        Ok(serde_json::from_str(json).expect("built-in presets parse"))
    }

    pub fn counts(counts: impl IntoIterator<Item = (impl Into<String>, usize)>) -> Self {
        Self::Counts {
            counts: counts.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    /// Records per rhythm for a dataset of `n` records, in name order.
    pub fn resolve(&self, n: usize) -> Result<Vec<(&'static dyn RhythmGenerator, usize)>> {
        let resolved: Vec<(String, usize)> = match self {
            Self::Counts { counts } => {
                let total: usize = counts.values().sum();
                if total != n {
                    return Err(SynthError::ImpossibleMix(format!(
                        "counts sum to {total} but {n} records were requested"
                    )));
                }
                counts.iter().map(|(k, &v)| (k.clone(), v)).collect()
            }
            Self::Frequencies { frequencies } => {
                if let Some((k, f)) = frequencies.iter().find(|(_, f)| !(0.0..=1.0).contains(*f)) {
                    return Err(SynthError::ImpossibleMix(format!("frequency {f} for {k} outside [0, 1]")));
                }
                let total: f64 = frequencies.values().sum();
                if total > 1.0 + 1e-9 {
                    return Err(SynthError::ImpossibleMix(format!("frequencies sum to {total} > 1")));
                }
                let mut weights = frequencies.clone();
                *weights.entry("sinus".into()).or_insert(0.0) += (1.0 - total).max(0.0);
                let names: Vec<String> = weights.keys().cloned().collect();
                let values: Vec<f64> = weights.values().copied().collect();
                if values.iter().sum::<f64>() == 0.0 {
                    names.into_iter().map(|k| (k, 0)).collect()
                } else {
                    names.into_iter().zip(largest_remainder(&values, n)).collect()
                }
            }
            Self::Proportional { counts } => {
                let total: usize = counts.values().sum();
                if total == 0 {
                    return Err(SynthError::ImpossibleMix("all proportional counts are zero".into()));
                }
                let values: Vec<f64> = counts.values().map(|&v| v as f64).collect();
                counts.keys().cloned().zip(largest_remainder(&values, n)).collect()
            }
        };
        resolved
            .into_iter()
            .map(|(name, count)| Ok((rhythm(&name)?, count)))
            .collect()
    }
}

/// Record `index` of a synthetic corpus. Depends only on `(kind, seed,
/// index)`, so records can be produced in any order or in parallel.
pub fn generate_record(kind: &str, seed: u64, index: usize, noise: &NoiseConfig) -> Result<EcgRecord> {
    let mut rng = rng::stream(seed, rng::domain::RECORD, index as u64);
    let mut record = synthesize_record(&RhythmSpec::new(kind), noise, &mut rng)?;
    record.source_id = format!("synth-{seed}-{index:06}");
    Ok(record)
}

/// `n` records following `mix`, in a seeded random order of rhythms.
pub fn generate_dataset(mix: &ClassMix, n: usize, seed: u64, noise: &NoiseConfig) -> Result<Dataset> {
    let mut kinds: Vec<&'static str> = mix
        .resolve(n)?
        .into_iter()
        .flat_map(|(g, count)| std::iter::repeat(g.name()).take(count))
        .collect();
    kinds.shuffle(&mut rng::stream(seed, rng::domain::MIX, 0));
    let records = kinds
        .iter()
        .enumerate()
        .map(|(i, kind)| generate_record(kind, seed, i, noise))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_records(
        records,
        LabelVocabulary::standard(),
        Provenance {
            source: format!("synthetic n={n} seed={seed}"),
            generator_seed: Some(seed),
        },
    ))
}
