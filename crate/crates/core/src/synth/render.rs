use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::rhythm::{AtrialActivity, BeatKind, BeatPlan};
use super::template::{BeatTemplate, Wave};
use super::NoiseConfig;
use crate::record::{LEADS, SAMPLES, SAMPLE_RATE_HZ};
use crate::rng::Rng;

#[derive(Clone, Copy)]
enum Source {
    P,
    Q,
    R,
    S,
    T,
    EctopicQrs,
    EctopicT,
}

/// Lead gains per source; leads are I, II, III, aVR, aVL, aVF, V1..V6.
/// Constant across the corpus.
const GAINS: [[f64; LEADS]; 7] = [
    [0.6, 1.0, 0.4, -0.8, 0.2, 0.7, 0.5, 0.6, 0.5, 0.5, 0.4, 0.4],
    [0.5, 0.6, 0.4, -0.5, 0.3, 0.5, 0.0, 0.1, 0.2, 0.4, 0.5, 0.4],
    [0.7, 1.0, 0.5, -0.8, 0.3, 0.8, 0.3, 0.6, 1.0, 1.4, 1.2, 0.9],
    [0.3, 0.4, 0.5, -0.3, 0.5, 0.4, 1.5, 1.6, 1.0, 0.6, 0.3, 0.2],
    [0.6, 0.8, 0.3, -0.7, 0.2, 0.6, -0.2, 0.9, 1.0, 0.9, 0.7, 0.6],
    [-0.4, 0.9, 1.0, 0.2, -0.9, 1.0, -1.1, -0.9, -0.3, 0.6, 1.0, 1.1],
    [-0.3, 0.8, 0.9, 0.1, -0.7, 0.9, -0.8, -0.6, -0.2, 0.4, 0.8, 0.9],
];

const DT: f64 = 1.0 / SAMPLE_RATE_HZ as f64;

struct Canvas {
    leads: Vec<f64>,
}

impl Canvas {
    fn new() -> Self {
        Self {
            leads: vec![0.0; LEADS * SAMPLES],
        }
    }

    fn wave(&mut self, source: Source, wave: Wave, origin: f64, weight: f64) {
        if wave.amplitude == 0.0 || weight == 0.0 {
            return;
        }
        let center = origin + wave.center;
        let lo = ((center - 5.0 * wave.width) / DT).floor().max(0.0) as usize;
        let hi = (((center + 5.0 * wave.width) / DT).ceil().max(0.0) as usize).min(SAMPLES);
        if lo >= hi {
            return;
        }
        let gains = &GAINS[source as usize];
        for i in lo..hi {
            let v = weight * wave.value(i as f64 * DT - origin);
            for (lead, g) in gains.iter().enumerate() {
                self.leads[lead * SAMPLES + i] += g * v;
            }
        }
    }

    fn ventricular(&mut self, t: &BeatTemplate, ectopic: bool, qrs: f64, weight: f64) {
        let sources = if ectopic {
            [Source::EctopicQrs, Source::EctopicQrs, Source::EctopicQrs, Source::EctopicT]
        } else {
            [Source::Q, Source::R, Source::S, Source::T]
        };
        for (src, w) in sources.into_iter().zip(t.ventricular_waves()) {
            self.wave(src, w, qrs, weight);
        }
    }

    /// Adds `f(t)` projected through a source's gains.
    fn continuous(&mut self, source: Source, f: impl Fn(f64) -> f64) {
        let gains = &GAINS[source as usize];
        for i in 0..SAMPLES {
            let v = f(i as f64 * DT);
            for (lead, g) in gains.iter().enumerate() {
                self.leads[lead * SAMPLES + i] += g * v;
            }
        }
    }
}

struct Morphology {
    normal: BeatTemplate,
    pvc: BeatTemplate,
    pac_p: Wave,
    ectopic_p: Wave,
    fusion_weight: f64,
    wide_escape: bool,
}

fn vary(w: Wave, rng: &mut Rng, amp: f64, width: f64) -> Wave {
    let a = rng.gen_range(1.0 - amp..=1.0 + amp);
    let s = rng.gen_range(1.0 - width..=1.0 + width);
    Wave {
        amplitude: w.amplitude * a,
        center: w.center * s,
        width: w.width * s,
    }
}

impl Morphology {
    fn draw(rate_bpm: f64, rng: &mut Rng) -> Self {
        // repolarization shortens at faster rates
        let qt = (60.0 / rate_bpm).sqrt().clamp(0.55, 1.15);
        let mut normal = BeatTemplate::normal();
        let p = vary(normal.p.expect("normal beats have P"), rng, 0.3, 0.15);
        normal.p = Some(p);
        normal.q = vary(normal.q, rng, 0.5, 0.15);
        normal.r = vary(normal.r, rng, 0.3, 0.15);
        normal.s = vary(normal.s, rng, 0.4, 0.15);
        normal.t = vary(normal.t, rng, 0.4, 0.15).scaled(1.0, qt);
        let mut pvc = BeatTemplate::pvc();
        pvc.r = vary(pvc.r, rng, 0.25, 0.12);
        pvc.s = vary(pvc.s, rng, 0.4, 0.12);
        pvc.t = vary(pvc.t, rng, 0.3, 0.12).scaled(1.0, qt);
        Self {
            normal,
            pvc,
            pac_p: p.scaled(-rng.gen_range(0.4..=0.8), rng.gen_range(0.7..=0.9)),
            ectopic_p: p.scaled(-rng.gen_range(0.7..=1.0), 1.0),
            fusion_weight: rng.gen_range(0.35..=0.65),
            wide_escape: rng.gen_bool(0.5),
        }
    }
}

/// Lead-major millivolt samples for one plan.
pub(super) fn render(plan: &BeatPlan, noise: &NoiseConfig, rng: &mut Rng) -> Vec<f32> {
    let m = Morphology::draw(plan.rate_bpm, rng);
    let mut c = Canvas::new();
    let sinus_p = match plan.atrial {
        AtrialActivity::EctopicFocus => m.ectopic_p,
        _ => m.normal.p.expect("normal beats have P"),
    };
    for b in &plan.beats {
        if let Some(p) = b.p_onset {
            let wave = if matches!(b.kind, BeatKind::Pac | BeatKind::BlockedPac) { m.pac_p } else { sinus_p };
            c.wave(Source::P, wave, p, 1.0);
        }
        let Some(q) = b.qrs_onset else { continue };
        match b.kind {
            BeatKind::Normal | BeatKind::Pac => c.ventricular(&m.normal, false, q, 1.0),
            BeatKind::Pvc => c.ventricular(&m.pvc, true, q, 1.0),
            BeatKind::Fusion => {
                c.ventricular(&m.normal, false, q, 1.0 - m.fusion_weight);
                c.ventricular(&m.pvc, true, q, m.fusion_weight);
            }
            BeatKind::Escape if m.wide_escape => c.ventricular(&m.pvc, true, q, 0.9),
            BeatKind::Escape => c.ventricular(&m.normal, false, q, 1.0),
            BeatKind::Dropped | BeatKind::BlockedPac => {}
        }
    }
    match plan.atrial {
        AtrialActivity::Fibrillation => {
            let amp = rng.gen_range(0.03..=0.08);
            let comps: Vec<(f64, f64)> = (0..3)
                .map(|_| (rng.gen_range(4.0..=9.0), rng.gen_range(0.0..TAU)))
                .collect();
            c.continuous(Source::P, |t| {
                amp * comps.iter().map(|&(f, ph)| (TAU * f * t + ph).sin()).sum::<f64>()
            });
        }
        AtrialActivity::Flutter { rate_bpm, phase_s } => {
            let ff = 60.0 / rate_bpm;
            let amp = rng.gen_range(0.1..=0.22);
            // slow descent, sharp return; negative in the inferior leads
            c.continuous(Source::P, |t| {
                let x = ((t - phase_s) / ff).rem_euclid(1.0);
                let saw = if x < 0.8 { x / 0.8 } else { (1.0 - x) / 0.2 };
                -amp * (2.0 * saw - 1.0)
            });
        }
        AtrialActivity::Sinus | AtrialActivity::EctopicFocus => {}
    }
    add_noise(&mut c.leads, noise, rng);
    c.leads.into_iter().map(|v| v as f32).collect()
}

fn add_noise(leads: &mut [f64], noise: &NoiseConfig, rng: &mut Rng) {
    let white = noise.white_std * rng.gen_range(0.25..=1.0);
    let mains = (noise.mains_amplitude > 0.0 && rng.gen_bool(noise.mains_probability.clamp(0.0, 1.0)))
        .then(|| (noise.mains_amplitude * rng.gen_range(0.5..=1.0), rng.gen_range(0.0..TAU)));
    let normal = (white > 0.0).then(|| Normal::new(0.0, white).expect("positive std"));
    for lead in leads.chunks_exact_mut(SAMPLES) {
        let wander: Vec<(f64, f64, f64)> = if noise.wander_amplitude > 0.0 {
            (0..2)
                .map(|_| {
                    (
                        noise.wander_amplitude * rng.gen_range(0.0..=0.5),
                        rng.gen_range(0.05..=noise.wander_max_hz.max(0.05)),
                        rng.gen_range(0.0..TAU),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        for (i, v) in lead.iter_mut().enumerate() {
            let t = i as f64 * DT;
            *v += wander.iter().map(|&(a, f, ph)| a * (TAU * f * t + ph).sin()).sum::<f64>();
            if let Some((a, ph)) = mains {
                *v += a * (TAU * 60.0 * t + ph).sin();
            }
            if let Some(n) = &normal {
                *v += n.sample(rng);
            }
        }
    }
}
