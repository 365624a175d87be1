//! R-peak counting, used as an independent check on generated rhythms.

use super::{Result, SynthError};
use crate::record::{EcgRecord, LEADS, SAMPLE_RATE_HZ};

const REFRACTORY_S: f64 = 0.2;
const THRESHOLD: f64 = 0.6;
const DETREND_WINDOW_S: f64 = 1.0;

fn detrended(x: &[f32]) -> Vec<f64> {
    let half = (DETREND_WINDOW_S * SAMPLE_RATE_HZ as f64 / 2.0) as usize;
    let mut prefix = vec![0.0f64; x.len() + 1];
    for (i, &v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v as f64;
    }
    (0..x.len())
        .map(|i| {
            let (lo, hi) = (i.saturating_sub(half), (i + half + 1).min(x.len()));
            x[i] as f64 - (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Sample indices of R peaks on the highest-variance lead after moving-average
/// detrending: local maxima of |x| above 60% of the lead's peak, at least
/// 200 ms apart.
pub fn detect_r_peaks(record: &EcgRecord) -> Result<Vec<usize>> {
    let lead = (0..LEADS)
        .map(|l| detrended(record.lead(l)))
        .max_by(|a, b| variance(a).total_cmp(&variance(b)))
        .expect("records have leads");
    let max = lead.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(max > 0.0) {
        return Err(SynthError::NoBeats);
    }
    let threshold = THRESHOLD * max;
    let refractory = (REFRACTORY_S * SAMPLE_RATE_HZ as f64) as usize;
    let mut peaks: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < lead.len() {
        if lead[i].abs() < threshold {
            i += 1;
            continue;
        }
        let mut best = i;
        while i < lead.len() && lead[i].abs() >= threshold {
            if lead[i].abs() > lead[best].abs() {
                best = i;
            }
            i += 1;
        }
        match peaks.last() {
            Some(&last) if best - last < refractory => {
                if lead[best].abs() > lead[last].abs() {
                    *peaks.last_mut().expect("nonempty") = best;
                }
            }
            _ => peaks.push(best),
        }
    }
    Ok(peaks)
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

fn intervals(record: &EcgRecord) -> Result<Vec<f64>> {
    let peaks = detect_r_peaks(record)?;
    if peaks.len() < 2 {
        return Err(SynthError::NoBeats);
    }
    Ok(peaks
        .windows(2)
        .map(|w| (w[1] - w[0]) as f64 / SAMPLE_RATE_HZ as f64)
        .collect())
}

/// Beats per minute from the mean detected R-R interval.
pub fn estimate_heart_rate(record: &EcgRecord) -> Result<f64> {
    let rr = intervals(record)?;
    Ok(60.0 * rr.len() as f64 / rr.iter().sum::<f64>())
}

/// Population coefficient of variation of detected R-R intervals.
pub fn rr_coefficient_of_variation(record: &EcgRecord) -> Result<f64> {
    let rr = intervals(record)?;
    Ok(variance(&rr).sqrt() / (rr.iter().sum::<f64>() / rr.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::synth::{synthesize_record, NoiseConfig, RhythmSpec};

    fn record(kind: &str, rate: Option<f64>, seed: u64) -> EcgRecord {
        let spec = RhythmSpec {
            rate_bpm: rate,
            ..RhythmSpec::new(kind)
        };
        synthesize_record(&spec, &NoiseConfig::default(), &mut rng::stream(seed, 9, 0)).unwrap()
    }

    #[test]
    fn flatline_has_no_beats() {
        assert!(matches!(
            estimate_heart_rate(&EcgRecord::zeros("z")),
            Err(SynthError::NoBeats)
        ));
    }

    #[test]
    fn sinus_sixty() {
        for seed in 0..10 {
            let bpm = estimate_heart_rate(&record("sinus", Some(60.0), seed)).unwrap();
            assert!((bpm - 60.0).abs() <= 5.0, "{bpm}");
        }
    }

    #[test]
    fn vt_one_eighty() {
        for seed in 0..10 {
            let bpm = estimate_heart_rate(&record("ventricular_tachycardia", Some(180.0), seed)).unwrap();
            assert!(bpm > 100.0, "{bpm}");
        }
    }
}
