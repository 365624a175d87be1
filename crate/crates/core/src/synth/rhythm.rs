//! Beat timing for each generator rhythm.
//!
//! Every rhythm is a [`RhythmGenerator`] registered by name; class mixes and
//! specs refer to rhythms through [`rhythm`].

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{Result, RhythmSpec, SynthError};
use crate::dataset::class;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeatKind {
    Normal,
    Pvc,
    Pac,
    Fusion,
    /// P wave with no conducted QRS.
    Dropped,
    /// Escape QRS with no associated P wave.
    Escape,
    /// Premature P wave that is not conducted.
    BlockedPac,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Beat {
    pub kind: BeatKind,
    /// Seconds.
    pub p_onset: Option<f64>,
    /// Seconds; `None` when the beat was not conducted.
    pub qrs_onset: Option<f64>,
}

impl Beat {
    fn conducted(kind: BeatKind, qrs: f64, pr: Option<f64>) -> Self {
        Self {
            kind,
            p_onset: pr.map(|pr| qrs - pr),
            qrs_onset: Some(qrs),
        }
    }
}

/// Atrial activity that is not tied to individual beats.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AtrialActivity {
    /// Discrete P waves from the sinus node.
    Sinus,
    /// Discrete P waves from an ectopic focus (inverted morphology).
    EctopicFocus,
    Fibrillation,
    Flutter { rate_bpm: f64, phase_s: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeatPlan {
    pub beats: Vec<Beat>,
    pub atrial: AtrialActivity,
    pub rate_bpm: f64,
}

impl BeatPlan {
    pub fn qrs_onsets(&self) -> Vec<f64> {
        self.beats.iter().filter_map(|b| b.qrs_onset).collect()
    }

    pub fn rr_intervals(&self) -> Vec<f64> {
        self.qrs_onsets().windows(2).map(|w| w[1] - w[0]).collect()
    }
}

pub trait RhythmGenerator: Send + Sync {
    fn name(&self) -> &'static str;

    /// Classes asserted by every record of this rhythm.
    fn labels(&self) -> &'static [&'static str];

    /// Admissible rate in bpm. Atrially driven rhythms whose ventricular
    /// rate differs (block, flutter) give the atrial rate.
    fn rate_range(&self) -> (f64, f64);

    fn plan(&self, rate_bpm: f64, spec: &RhythmSpec, duration_s: f64, rng: &mut Rng) -> BeatPlan;
}

static REGISTRY: [&dyn RhythmGenerator; 16] = [
    &Sinus,
    &SinusBradycardia,
    &VentricularTachycardia,
    &Avnrt,
    &AtrialFibrillation,
    &AtrialFlutter,
    &EctopicAtrial,
    &FirstDegreeBlock,
    &MobitzI,
    &MobitzII,
    &CompleteHeartBlock,
    &PvcOverlay,
    &PacOverlay,
    &BlockedPacOverlay,
    &Bigeminy,
    &Fusion,
];

pub fn registry() -> &'static [&'static dyn RhythmGenerator] {
    &REGISTRY
}

pub fn rhythm(name: &str) -> Result<&'static dyn RhythmGenerator> {
    REGISTRY
        .iter()
        .copied()
        .find(|g| g.name() == name)
        .ok_or_else(|| SynthError::UnknownRhythm(name.to_string()))
}

/// Beat onsets and annotations for `spec` over `duration_s` seconds.
pub fn rr_sequence(spec: &RhythmSpec, duration_s: f64, rng: &mut Rng) -> Result<BeatPlan> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(SynthError::InvalidDuration(duration_s));
    }
    let generator = spec.validate()?;
    let (lo, hi) = generator.rate_range();
    let rate = spec.rate_bpm.unwrap_or_else(|| rng.gen_range(lo..=hi));
    Ok(generator.plan(rate, spec, duration_s, rng))
}

fn jitter(rng: &mut Rng, amount: f64) -> f64 {
    if amount > 0.0 {
        1.0 + rng.gen_range(-amount..=amount)
    } else {
        1.0
    }
}

/// Regular train with a random phase in `[0, RR)`.
fn regular_times(rate_bpm: f64, jitter_frac: f64, duration: f64, rng: &mut Rng) -> Vec<f64> {
    let rr = 60.0 / rate_bpm;
    let mut t = rng.gen_range(0.0..rr);
    let mut out = Vec::new();
    while t < duration {
        out.push(t);
        t += rr * jitter(rng, jitter_frac);
    }
    out
}

fn sinus_beats(rate: f64, pr: f64, spec: &RhythmSpec, duration: f64, rng: &mut Rng) -> Vec<Beat> {
    regular_times(rate, spec.jitter, duration, rng)
        .into_iter()
        .map(|t| Beat::conducted(BeatKind::Normal, t, Some(pr)))
        .collect()
}

fn plan(beats: Vec<Beat>, atrial: AtrialActivity, rate_bpm: f64) -> BeatPlan {
    BeatPlan {
        beats,
        atrial,
        rate_bpm,
    }
}

fn normal_pr(rng: &mut Rng) -> f64 {
    rng.gen_range(0.12..=0.20)
}

struct Sinus;

impl RhythmGenerator for Sinus {
    fn name(&self) -> &'static str {
        "sinus"
    }
    fn labels(&self) -> &'static [&'static str] {
        &[class::SINUS_RHYTHM]
    }
    fn rate_range(&self) -> (f64, f64) {
        (60.0, 100.0)
    }
    fn plan(&self, rate: f64, spec: &RhythmSpec, duration: f64, rng: &mut Rng) -> BeatPlan {
        let pr = normal_pr(rng);
        plan(sinus_beats(rate, pr, spec, duration, rng), AtrialActivity::Sinus, rate)
    }
}

struct SinusBradycardia;

impl RhythmGenerator for SinusBradycardia {
    fn name(&self) -> &'static str {
        "sinus_bradycardia"
    }
    fn labels(&self) -> &'static [&'static str] {
        &[class::SINUS_RHYTHM, class::BRADYCARDIA]
    }
    fn rate_range(&self) -> (f64, f64) {
        (40.0, 55.0)
    }
    fn plan(&self, rate: f64, spec: &RhythmSpec, duration: f64, rng: &mut Rng) -> BeatPlan {
        let pr = normal_pr(rng);
        plan(sinus_beats(rate, pr, spec, duration, rng), AtrialActivity::Sinus, rate)
    }
}

struct VentricularTachycardia;

impl RhythmGenerator for VentricularTachycardia {
    fn name(&self) -> &'static str {
        "ventricular_tachycardia"
    }
    fn labels(&self) -> &'static [&'static str] {
        &[class::VENTRICULAR_TACHYCARDIA, class::TACHYCARDIA]
    }
    fn rate_range(&self) -> (f64, f64) {
        (120.0, 200.0)
    }
    fn plan(&self, rate: f64, spec: &RhythmSpec, duration: f64, rng: &mut Rng) -> BeatPlan {
        let beats = regular_times(rate, spec.jitter, duration, rng)
            .into_iter()
            .map(|t| Beat::conducted(BeatKind::Pvc, t, None))
            .collect();
        plan(beats, AtrialActivity::Sinus, rate)
    }
}

struct Avnrt;

impl RhythmGenerator for Avnrt {
    fn name(&self) -> &'static str {
        "avnrt"
    }
    fn labels(&self) -> &'static [&'static str] {
        &[class::AVNRT, class::TACHYCARDIA]
    }
    fn rate_range(&self) -> (f64, f64) {
        (150.0, 220.0)
    }
    fn plan(&self, rate: f64, spec: &RhythmSpec, duration: f64, rng: &mut Rng) -> BeatPlan {
        // P waves are buried in the QRS
        let beats = regular_times(rate, spec.jitter, duration, rng)
            .into_iter()
            .map(|t| Beat::conducted(BeatKind::Normal, t, None))
            .collect();
        plan(beats, AtrialActivity::Sinus, rate)
    }
}

struct AtrialFibrillation;

/// Lower bound on the realized RR coefficient of variation.
pub const AFIB_MIN_RR_CV: f64 = 0.2;
const AFIB_MIN_RR: f64 = 0.3;

fn coefficient_of_variation(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

impl RhythmGenerator for AtrialFibrillation {
    fn name(&self) -> &'static str {
        "atrial_fibrillation"
    }
    fn labels(&self) -> &'static [&'static str] {
        &[class::ATRIAL_FIBRILLATION]
    }
    fn rate_range(&self) -> (f64, f64) {
        (60.0, 120.0)
    }
    fn plan(&self, rate: f64, _spec: &RhythmSpec, duration: f64, rng: &mut Rng) -> BeatPlan {
        let mean_rr = 60.0 / rate;
        let cv = rng.gen_range(0.22..=0.32);
        let gamma = Gamma::new(1.0 / (cv * cv), cv * cv).expect("positive shape");
        // Redraw until the realized intervals inside the window are irregular
        // enough; the target CV sits well above the floor so this is rare.
        let times = loop {
            let mut t = rng.gen_range(0.0..mean_rr);
            let mut times = Vec::new();
            while t < duration {
                times.push(t);
                t += (mean_rr * gamma.sample(rng)).max(AFIB_MIN_RR);
            }
            let rr: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
            if rr.len() >= 3 && coefficient_of_variation(&rr) >= AFIB_MIN_RR_CV {
                break times;
            }
        };
        let beats = times
            .into_iter()
            .map(|t| Beat::conducted(BeatKind::Normal, t, None))
            .collect();
        plan(beats, AtrialActivity::Fibrillation, rate)
    }
}

struct AtrialFlutter;

impl RhythmGenerator for AtrialFlutter {
    fn name(&self) -> &'static str {
        "atrial_flutter"
    }
    fn labels(&self) -> &'static [&'static str] {
        &[class::ATRIAL_FLUTTER]
    }
    fn rate_range(&self) -> (f64, f64) {
        (250.0, 350.0)
    }
    fn plan(&self, rate: f64, _spec: &RhythmSpec, duration: f64, rng: &mut Rng) -> BeatPlan {
        let ff = 60.0 / rate;
        let ratio = rng.gen_range(2..=4usize);
        let phase = rng.gen_range(0.0..ff);
        let delay = rng.gen_range(0.18..=0.26);
        let first = rng.gen_range(0..ratio);
        let mut beats = Vec::new();
        let mut k = first;
        loop {
            let qrs = phase + k as f64 * ff + delay;
            if qrs >= duration {
                break;
            }
            beats.push(Beat::conducted(BeatKind::Normal, qrs, None));
            k += ratio;
        }
        plan(
            beats,
            AtrialActivity::Flutter {
                rate_bpm: rate,
                phase_s: phase,
            },
            rate,
        )
    }
}

struct EctopicAtrial;

impl RhythmGenerator for EctopicAtrial {
    fn name(&self) -> &'static str {
        "ectopic_atrial_rhythm"
    }
    fn labels(&self) -> &'static [&'static str] {
        &[class::ECTOPIC_ATRIAL_RHYTHM]
    }
    fn rate_range(&self) -> (f64, f64) {
        (60.0, 100.0)
    }
    fn plan(&self, rate: f64, spec: &RhythmSpec, duration: f64, rng: &mut Rng) -> BeatPlan {
        let pr = rng.gen_range(0.10..=0.14);
        plan(sinus_beats(rate, pr, spec, duration, rng), AtrialActivity::EctopicFocus, rate)
    }
}

struct FirstDegreeBlock;

impl RhythmGenerator for FirstDegreeBlock {
    fn name(&self) -> &'static str {
        "first_degree_avb"
    }
    fn labels(&self) -> &'static [&'static str] {
        &[class::FIRST_DEGREE_AVB, class::SINUS_RHYTHM]
    }
    fn rate_range(&self) -> (f64, f64) {
        (60.0, 100.0)
    }
    fn plan(&self, rate: f64, spec: &RhythmSpec, duration: f64, rng: &mut Rng) -> BeatPlan {
        let pr = rng.gen_range(0.22..=0.34);
        plan(sinus_beats(rate, pr, spec, duration, rng), AtrialActivity::Sinus, rate)
    }
}

struct MobitzI;

const WENCKEBACH_DECAY: f64 = 0.6;

impl RhythmGenerator for MobitzI {
    fn name(&self) -> &'static str {
        "mobitz_i"
    }
    fn labels(&self) -> &'static [&'static str] {
        &[class::MOBITZ_I, class::SINUS_RHYTHM]
    }
    fn rate_range(&self) -> (f64, f64) {
        (60.0, 100.0)
    }
    fn plan(&self, rate: f64, spec: &RhythmSpec, duration: f64, rng: &mut Rng) -> BeatPlan {
        let cycle = rng.gen_range(4..=6usize);
        let base_pr = rng.gen_range(0.18..=0.26);
        let step = rng.gen_range(0.05..=0.10);
        // the first increment is the largest, later ones shrink
        let prolongation = |pos: usize| step * (1.0 - WENCKEBACH_DECAY.powi(pos as i32)) / (1.0 - WENCKEBACH_DECAY);
        let offset = rng.gen_range(0..cycle);
        // the P train runs from before the window so early QRS are not lost
        let lead_in = base_pr + prolongation(cycle);
        let p_times = regular_times(rate, spec.jitter, duration + lead_in, rng);
        let beats = p_times
            .into_iter()
            .map(|t| t - lead_in)
            .enumerate()
            .filter_map(|(k, p)| {
                let pos = (k + offset) % cycle;
                let beat = if pos == cycle - 1 {
                    Beat {
                        kind: BeatKind::Dropped,
                        p_onset: Some(p),
                        qrs_onset: None,
                    }
                } else {
                    let pr = base_pr + prolongation(pos);
                    Beat::conducted(BeatKind::Normal, p + pr, Some(pr))
                };
                let anchor = beat.qrs_onset.unwrap_or(p);
                (anchor >= 0.0 && anchor < duration).then_some(beat)
            })
            .collect();
        plan(beats, AtrialActivity::Sinus, rate)
    }
}

/// Intermittent non-conducted sinus P waves with a fixed PR. Outside the
/// label vocabulary, so records carry only the sinus label; the PR range
/// matches Wenckebach so only PR progression separates the two.
struct MobitzII;

impl RhythmGenerator for MobitzII {
    fn name(&self) -> &'static str {
        "mobitz_ii"
    }
    fn labels(&self) -> &'static [&'static str] {
        &[class::SINUS_RHYTHM]
    }
    fn rate_range(&self) -> (f64, f64) {
        (60.0, 100.0)
    }
    fn plan(&self, rate: f64, spec: &RhythmSpec, duration: f64, rng: &mut Rng) -> BeatPlan {
        let cycle = rng.gen_range(4..=6usize);
        let pr = rng.gen_range(0.18..=0.26);
        let offset = rng.gen_range(0..cycle);
        let beats = regular_times(rate, spec.jitter, duration + pr, rng)
            .into_iter()
            .map(|t| t - pr)
            .enumerate()
            .filter_map(|(k, p)| {
                let beat = if (k + offset) % cycle == cycle - 1 {
                    Beat {
                        kind: BeatKind::Dropped,
                        p_onset: Some(p),
                        qrs_onset: None,
                    }
                } else {
                    Beat::conducted(BeatKind::Normal, p + pr, Some(pr))
                };
                let anchor = beat.qrs_onset.unwrap_or(p);
                (anchor >= 0.0 && anchor < duration).then_some(beat)
            })
            .collect();
        plan(beats, AtrialActivity::Sinus, rate)
    }
}

struct CompleteHeartBlock;

impl RhythmGenerator for CompleteHeartBlock {
    fn name(&self) -> &'static str {
        "complete_heart_block"
    }
    fn labels(&self) -> &'static [&'static str] {
        &[class::COMPLETE_HEART_BLOCK]
    }
    fn rate_range(&self) -> (f64, f64) {
        (60.0, 100.0)
    }
    fn plan(&self, rate: f64, spec: &RhythmSpec, duration: f64, rng: &mut Rng) -> BeatPlan {
        let escape_rate = rng.gen_range(30.0..=45.0);
        let mut beats: Vec<Beat> = regular_times(rate, spec.jitter, duration, rng)
            .into_iter()
            .map(|p| Beat {
                kind: BeatKind::Dropped,
                p_onset: Some(p),
                qrs_onset: None,
            })
            .collect();
        beats.extend(
            regular_times(escape_rate, spec.jitter, duration, rng)
                .into_iter()
                .map(|t| Beat::conducted(BeatKind::Escape, t, None)),
        );
        beats.sort_by(|a, b| anchor(a).total_cmp(&anchor(b)));
        plan(beats, AtrialActivity::Sinus, rate)
    }
}

fn anchor(b: &Beat) -> f64 {
    b.qrs_onset.or(b.p_onset).unwrap_or(0.0)
}

/// Picks beats (never the first, never two in a row) to turn ectopic, with at
/// least one chosen.
fn ectopic_positions(n: usize, probability: f64, rng: &mut Rng) -> Vec<usize> {
    if n < 2 {
        return Vec::new();
    }
    let mut chosen: Vec<usize> = Vec::new();
    for i in 1..n {
        if chosen.last() != Some(&(i - 1)) && rng.gen_bool(probability) {
            chosen.push(i);
        }
    }
    if chosen.is_empty() {
        chosen.push(rng.gen_range(1..n));
    }
    chosen
}

/// Replaces chosen beats by premature ones coupled to the preceding beat.
/// Ventricular premature beats keep the sinus schedule (compensatory pause);
/// atrial ones reset it.
fn premature(mut beats: Vec<Beat>, positions: &[usize], kind: BeatKind, coupling: (f64, f64), pr: f64, rr: f64, rng: &mut Rng) -> Vec<Beat> {
    for &i in positions {
        let prev = beats[i - 1].qrs_onset.expect("sinus beats are conducted");
        let t = prev + rng.gen_range(coupling.0..=coupling.1) * rr;
        let old = beats[i].qrs_onset.expect("sinus beats are conducted");
        match kind {
            BeatKind::Pac => {
                beats[i] = Beat::conducted(BeatKind::Pac, t, Some(pr));
                let shift = old - t;
                for b in &mut beats[i + 1..] {
                    b.qrs_onset = b.qrs_onset.map(|q| q - shift);
                    b.p_onset = b.p_onset.map(|p| p - shift);
                }
            }
            _ => beats[i] = Beat::conducted(kind, t, None),
        }
    }
    beats
}

struct PvcOverlay;

impl RhythmGenerator for PvcOverlay {
    fn name(&self) -> &'static str {
        "pvc_overlay"
    }
    fn labels(&self) -> &'static [&'static str] {
        &[class::PVC, class::SINUS_RHYTHM]
    }
    fn rate_range(&self) -> (f64, f64) {
        (60.0, 100.0)
    }
    fn plan(&self, rate: f64, spec: &RhythmSpec, duration: f64, rng: &mut Rng) -> BeatPlan {
        let pr = normal_pr(rng);
        let beats = sinus_beats(rate, pr, spec, duration, rng);
        let pos = ectopic_positions(beats.len(), spec.ectopic_probability, rng);
        let beats = premature(beats, &pos, BeatKind::Pvc, (0.55, 0.7), pr, 60.0 / rate, rng);
        plan(beats, AtrialActivity::Sinus, rate)
    }
}

struct PacOverlay;

impl RhythmGenerator for PacOverlay {
    fn name(&self) -> &'static str {
        "pac_overlay"
    }
    fn labels(&self) -> &'static [&'static str] {
        &[class::PAC, class::SINUS_RHYTHM]
    }
    fn rate_range(&self) -> (f64, f64) {
        (60.0, 100.0)
    }
    fn plan(&self, rate: f64, spec: &RhythmSpec, duration: f64, rng: &mut Rng) -> BeatPlan {
        let pr = normal_pr(rng);
        let beats = sinus_beats(rate, pr, spec, duration, rng);
        let pos = ectopic_positions(beats.len(), spec.ectopic_probability, rng);
        let beats = premature(beats, &pos, BeatKind::Pac, (0.6, 0.8), pr, 60.0 / rate, rng);
        plan(beats, AtrialActivity::Sinus, rate)
    }
}

/// Sinus rhythm with premature P waves that fail to conduct. The pause
/// mimics a Wenckebach drop, but PR stays constant.
struct BlockedPacOverlay;

impl RhythmGenerator for BlockedPacOverlay {
    fn name(&self) -> &'static str {
        "blocked_pac"
    }
    fn labels(&self) -> &'static [&'static str] {
        &[class::PAC, class::SINUS_RHYTHM]
    }
    fn rate_range(&self) -> (f64, f64) {
        (60.0, 100.0)
    }
    fn plan(&self, rate: f64, spec: &RhythmSpec, duration: f64, rng: &mut Rng) -> BeatPlan {
        let pr = normal_pr(rng);
        let rr = 60.0 / rate;
        let mut beats = sinus_beats(rate, pr, spec, duration, rng);
        for i in ectopic_positions(beats.len(), spec.ectopic_probability, rng) {
            let prev = beats[i - 1].p_onset.expect("sinus beats have P");
            let p = prev + rng.gen_range(0.55..=0.75) * rr;
            let shift = beats[i].p_onset.expect("sinus beats have P") - p;
            beats[i] = Beat {
                kind: BeatKind::BlockedPac,
                p_onset: Some(p),
                qrs_onset: None,
            };
            for b in &mut beats[i + 1..] {
                b.qrs_onset = b.qrs_onset.map(|q| q - shift);
                b.p_onset = b.p_onset.map(|p| p - shift);
            }
        }
        plan(beats, AtrialActivity::Sinus, rate)
    }
}

struct Bigeminy;

impl RhythmGenerator for Bigeminy {
    fn name(&self) -> &'static str {
        "bigeminy"
    }
    fn labels(&self) -> &'static [&'static str] {
        &[class::BIGEMINY, class::PVC, class::SINUS_RHYTHM]
    }
    fn rate_range(&self) -> (f64, f64) {
        (60.0, 100.0)
    }
    fn plan(&self, rate: f64, spec: &RhythmSpec, duration: f64, rng: &mut Rng) -> BeatPlan {
        let pr = normal_pr(rng);
        let beats = sinus_beats(rate, pr, spec, duration, rng);
        let pos: Vec<usize> = (1..beats.len()).step_by(2).collect();
        let beats = premature(beats, &pos, BeatKind::Pvc, (0.55, 0.7), pr, 60.0 / rate, rng);
        plan(beats, AtrialActivity::Sinus, rate)
    }
}

struct Fusion;

impl RhythmGenerator for Fusion {
    fn name(&self) -> &'static str {
        "fusion"
    }
    fn labels(&self) -> &'static [&'static str] {
        &[class::FUSION, class::SINUS_RHYTHM]
    }
    fn rate_range(&self) -> (f64, f64) {
        (60.0, 100.0)
    }
    fn plan(&self, rate: f64, spec: &RhythmSpec, duration: f64, rng: &mut Rng) -> BeatPlan {
        let pr = normal_pr(rng);
        let mut beats = sinus_beats(rate, pr, spec, duration, rng);
        for i in ectopic_positions(beats.len(), spec.ectopic_probability, rng) {
            beats[i].kind = BeatKind::Fusion;
        }
        plan(beats, AtrialActivity::Sinus, rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use std::collections::HashSet;

    fn spec(kind: &str, rate: Option<f64>, jitter: f64) -> RhythmSpec {
        RhythmSpec {
            kind: kind.into(),
            rate_bpm: rate,
            jitter,
            ..RhythmSpec::default()
        }
    }

    #[test]
    fn registry_names_unique() {
        let names: HashSet<_> = registry().iter().map(|g| g.name()).collect();
        assert_eq!(names.len(), 16);
        assert!(rhythm("nope").is_err());
    }

    #[test]
    fn sinus_sixty_bpm() {
        let p = rr_sequence(&spec("sinus", Some(60.0), 0.0), 10.0, &mut rng::stream(1, 0, 0)).unwrap();
        assert_eq!(p.qrs_onsets().len(), 10);
        for rr in p.rr_intervals() {
            assert!((rr - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn vt_one_fifty() {
        let p = rr_sequence(&spec("ventricular_tachycardia", Some(150.0), 0.0), 10.0, &mut rng::stream(2, 0, 0)).unwrap();
        assert_eq!(p.qrs_onsets().len(), 25);
        assert!(p.rr_intervals().iter().all(|rr| (rr - 0.4).abs() < 1e-9));
        assert!(p.beats.iter().all(|b| b.kind == BeatKind::Pvc));
    }

    #[test]
    fn repeatable_with_seed() {
        let s = spec("atrial_fibrillation", None, 0.0);
        let a = rr_sequence(&s, 10.0, &mut rng::stream(3, 0, 0)).unwrap();
        let b = rr_sequence(&s, 10.0, &mut rng::stream(3, 0, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_duration_and_rate() {
        let mut r = rng::stream(0, 0, 0);
        assert!(matches!(
            rr_sequence(&spec("sinus", None, 0.0), 0.0, &mut r),
            Err(SynthError::InvalidDuration(_))
        ));
        assert!(rr_sequence(&spec("sinus_bradycardia", Some(70.0), 0.0), 10.0, &mut r).is_err());
    }

    #[test]
    fn rates_stay_in_class_ranges() {
        for g in registry() {
            for seed in 0..30 {
                let p = rr_sequence(&spec(g.name(), None, 0.02), 10.0, &mut rng::stream(seed, 1, 0)).unwrap();
                let (lo, hi) = g.rate_range();
                assert!(p.rate_bpm >= lo && p.rate_bpm <= hi, "{}", g.name());
                assert!(p.beats.iter().all(|b| b.qrs_onset.map_or(true, |q| (0.0..10.0).contains(&q))));
            }
        }
    }

    #[test]
    fn sinus_regular_afib_irregular() {
        for seed in 0..50 {
            let s = rr_sequence(&spec("sinus", None, 0.03), 10.0, &mut rng::stream(seed, 2, 0)).unwrap();
            assert!(coefficient_of_variation(&s.rr_intervals()) < 0.05);
            let a = rr_sequence(&spec("atrial_fibrillation", None, 0.03), 10.0, &mut rng::stream(seed, 2, 1)).unwrap();
            assert!(coefficient_of_variation(&a.rr_intervals()) >= 0.15);
        }
    }

    #[test]
    fn mobitz_lengthens_then_drops() {
        for seed in 0..50 {
            let p = rr_sequence(&spec("mobitz_i", None, 0.0), 10.0, &mut rng::stream(seed, 3, 0)).unwrap();
            let dropped: Vec<&Beat> = p.beats.iter().filter(|b| b.kind == BeatKind::Dropped).collect();
            assert!(!dropped.is_empty());
            // no QRS within 300 ms of a dropped P
            for d in dropped {
                let pt = d.p_onset.unwrap();
                assert!(p.qrs_onsets().iter().all(|&q| !(q > pt && q - pt < 0.3)));
            }
            // PR grows within a conducted run
            let prs: Vec<Option<f64>> = p
                .beats
                .iter()
                .map(|b| b.qrs_onset.map(|q| q - b.p_onset.unwrap()))
                .collect();
            for w in prs.windows(2) {
                if let [Some(a), Some(b)] = w {
                    assert!(b - a > 0.0 && b - a <= 0.12 + 1e-9);
                }
            }
            // and by shrinking steps
            for w in prs.windows(3) {
                if let [Some(a), Some(b), Some(c)] = w {
                    assert!(((c - b) - WENCKEBACH_DECAY * (b - a)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn mobitz_ii_drops_with_fixed_pr() {
        for seed in 0..30 {
            let p = rr_sequence(&spec("mobitz_ii", None, 0.0), 10.0, &mut rng::stream(seed, 6, 0)).unwrap();
            assert!(p.beats.iter().any(|b| b.kind == BeatKind::Dropped));
            let prs: Vec<f64> = p
                .beats
                .iter()
                .filter_map(|b| Some(b.qrs_onset? - b.p_onset?))
                .collect();
            assert!(prs.iter().all(|&x| (x - prs[0]).abs() < 1e-12 && (0.18..=0.26).contains(&x)));
        }
    }

    #[test]
    fn blocked_pacs_pause_with_constant_pr() {
        for seed in 0..30 {
            let p = rr_sequence(&spec("blocked_pac", None, 0.0), 10.0, &mut rng::stream(seed, 5, 0)).unwrap();
            let blocked: Vec<&Beat> = p.beats.iter().filter(|b| b.kind == BeatKind::BlockedPac).collect();
            assert!(!blocked.is_empty());
            assert!(blocked.iter().all(|b| b.qrs_onset.is_none()));
            let prs: Vec<f64> = p
                .beats
                .iter()
                .filter_map(|b| Some(b.qrs_onset? - b.p_onset?))
                .collect();
            assert!(prs.iter().all(|&x| (x - prs[0]).abs() < 1e-12));
            let rr = p.rr_intervals();
            let median = {
                let mut s = rr.clone();
                s.sort_by(f64::total_cmp);
                s[s.len() / 2]
            };
            assert!(rr.iter().any(|&x| x > 1.4 * median), "{rr:?}");
        }
    }

    #[test]
    fn heart_block_trains_independent() {
        let p = rr_sequence(&spec("complete_heart_block", Some(80.0), 0.0), 10.0, &mut rng::stream(4, 0, 0)).unwrap();
        let escape: Vec<f64> = p.qrs_onsets();
        assert!(p.beats.iter().filter(|b| b.kind == BeatKind::Dropped).count() >= 13);
        let rr = 60.0 / (escape[1] - escape[0]);
        assert!((30.0..=45.0).contains(&rr));
    }

    #[test]
    fn bigeminy_alternates_strictly() {
        for seed in 0..20 {
            let p = rr_sequence(&spec("bigeminy", None, 0.02), 10.0, &mut rng::stream(seed, 5, 0)).unwrap();
            let kinds: Vec<BeatKind> = p.beats.iter().map(|b| b.kind).collect();
            assert!(kinds.windows(2).all(|w| w[0] != w[1]), "{kinds:?}");
            assert!(kinds.contains(&BeatKind::Pvc));
        }
    }

    #[test]
    fn overlays_contain_ectopy() {
        for (name, kind) in [("pvc_overlay", BeatKind::Pvc), ("pac_overlay", BeatKind::Pac), ("fusion", BeatKind::Fusion)] {
            for seed in 0..20 {
                let p = rr_sequence(&spec(name, None, 0.02), 10.0, &mut rng::stream(seed, 6, 0)).unwrap();
                assert!(p.beats.iter().any(|b| b.kind == kind), "{name}");
                let q = p.qrs_onsets();
                assert!(q.windows(2).all(|w| w[1] > w[0] + 0.2), "{name}");
            }
        }
    }
}
