//! Labeled synthetic 12-lead ECG.
//!
//! Each record is one rhythm from the [`rhythm`] registry: beat timing comes
//! from the rhythm, morphology from Gaussian-bump beat templates with
//! per-record variation, and the single source is projected onto the 12 leads
//! through a fixed per-wave gain table before noise is added.

mod mix;
mod rate;
mod render;
pub mod rhythm;
mod template;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mix::{generate_dataset, generate_record, ClassMix, PRESETS};
pub use rate::{detect_r_peaks, estimate_heart_rate, rr_coefficient_of_variation};
pub use rhythm::{registry, rhythm, rr_sequence, Beat, BeatKind, BeatPlan, RhythmGenerator};
pub use template::{beat_waveform, BeatTemplate, Wave};

use crate::dataset::{class, LabelVocabulary};
use crate::record::{EcgRecord, LabelSet, RECORD_SECONDS};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown rhythm {0:?}")]
    UnknownRhythm(String),
    #[error("invalid rhythm spec: {0}")]
    InvalidSpec(String),
    #[error("invalid beat template: {0}")]
    InvalidTemplate(String),
    #[error("duration must be positive, got {0}")]
    InvalidDuration(f64),
    #[error("impossible class mix: {0}")]
    ImpossibleMix(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("no detectable beats")]
    NoBeats,
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RhythmSpec {
    /// Registered rhythm name.
    pub kind: String,
    /// Fixed rate in bpm; drawn from the rhythm's range when absent.
    pub rate_bpm: Option<f64>,
    /// Maximum relative beat-to-beat change of regular intervals.
    pub jitter: f64,
    /// Per-beat chance of an ectopic beat in overlay rhythms.
    pub ectopic_probability: f64,
}

impl Default for RhythmSpec {
    fn default() -> Self {
        Self {
            kind: "sinus".into(),
            rate_bpm: None,
            jitter: 0.02,
            ectopic_probability: 0.15,
        }
    }
}

impl RhythmSpec {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<&'static dyn RhythmGenerator> {
        let g = rhythm(&self.kind)?;
        if let Some(rate) = self.rate_bpm {
            let (lo, hi) = g.rate_range();
            if !(lo..=hi).contains(&rate) {
                return Err(SynthError::InvalidSpec(format!(
                    "{} rate {rate} bpm outside [{lo}, {hi}]",
                    self.kind
                )));
            }
        }
        if !(0.0..=0.03).contains(&self.jitter) {
            return Err(SynthError::InvalidSpec(format!("jitter {} outside [0, 0.03]", self.jitter)));
        }
        if !(0.0..=1.0).contains(&self.ectopic_probability) {
            return Err(SynthError::InvalidSpec(format!(
                "ectopic probability {} outside [0, 1]",
                self.ectopic_probability
            )));
        }
        Ok(g)
    }
}

/// Additive noise, all amplitudes in millivolts. Each record draws its own
/// levels up to these maxima.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub white_std: f64,
    pub wander_amplitude: f64,
    pub wander_max_hz: f64,
    pub mains_probability: f64,
    pub mains_amplitude: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            white_std: 0.04,
            wander_amplitude: 0.2,
            wander_max_hz: 0.5,
            mains_probability: 0.1,
            mains_amplitude: 0.05,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            white_std: 0.0,
            wander_amplitude: 0.0,
            wander_max_hz: 0.5,
            mains_probability: 0.0,
            mains_amplitude: 0.0,
        }
    }
}

/// Applies the vocabulary's implication and exclusion rules: bigeminy implies
/// PVC, a specific tachycardia implies tachycardia, and atrial fibrillation
/// excludes sinus rhythm.
pub fn consistent_labels(labels: LabelSet, vocab: &LabelVocabulary) -> LabelSet {
    let mut out = labels;
    let idx = |name| vocab.index_of(name);
    let has = |s: LabelSet, name| idx(name).is_some_and(|i| s.contains(i));
    if has(out, class::BIGEMINY) {
        if let Some(i) = idx(class::PVC) {
            out.insert(i);
        }
    }
    if has(out, class::VENTRICULAR_TACHYCARDIA) || has(out, class::AVNRT) {
        if let Some(i) = idx(class::TACHYCARDIA) {
            out.insert(i);
        }
    }
    if has(out, class::ATRIAL_FIBRILLATION) {
        if let Some(i) = idx(class::SINUS_RHYTHM) {
            out.remove(i);
        }
    }
    out
}

/// One 10 s record of `spec` with labels over the standard vocabulary.
pub fn synthesize_record(spec: &RhythmSpec, noise: &NoiseConfig, rng: &mut Rng) -> Result<EcgRecord> {
    let generator = spec.validate()?;
    let plan = rr_sequence(spec, RECORD_SECONDS, rng)?;
    let voltages = render::render(&plan, noise, rng);
    let vocab = LabelVocabulary::standard();
    let labels = vocab
        .label_set(generator.labels())
        .expect("rhythm labels are in the standard vocabulary");
    let labels = consistent_labels(labels, &vocab);
    Ok(EcgRecord::new(voltages, labels, spec.kind.clone()).expect("renderer emits full records"))
}
