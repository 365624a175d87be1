use serde::{Deserialize, Serialize};

use super::{Result, SynthError};
use crate::record::SAMPLE_RATE_HZ;

/// A Gaussian bump: `amplitude * exp(-((t - center) / width)^2 / 2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    /// Millivolts.
    pub amplitude: f64,
    /// Seconds from the wave's reference onset.
    pub center: f64,
    /// Standard deviation in seconds.
    pub width: f64,
}

impl Wave {
    pub const fn new(amplitude: f64, center: f64, width: f64) -> Self {
        Self {
            amplitude,
            center,
            width,
        }
    }

    pub const fn zero(center: f64, width: f64) -> Self {
        Self::new(0.0, center, width)
    }

    pub fn value(&self, t: f64) -> f64 {
        let z = (t - self.center) / self.width;
        self.amplitude * (-0.5 * z * z).exp()
    }

    pub fn scaled(self, amplitude: f64, time: f64) -> Self {
        Self {
            amplitude: self.amplitude * amplitude,
            center: self.center * time,
            width: self.width * time,
        }
    }
}

/// One beat's morphology. The P wave is placed relative to P onset; Q, R, S
/// and T are placed relative to QRS onset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeatTemplate {
    pub p: Option<Wave>,
    pub q: Wave,
    pub r: Wave,
    pub s: Wave,
    pub t: Wave,
    pub qrs_duration: f64,
    pub pr_interval: f64,
}

impl BeatTemplate {
    /// Narrow sinus-conducted beat.
    pub fn normal() -> Self {
        Self {
            p: Some(Wave::new(0.15, 0.05, 0.022)),
            q: Wave::new(-0.10, 0.012, 0.008),
            r: Wave::new(1.0, 0.040, 0.011),
            s: Wave::new(-0.25, 0.068, 0.010),
            t: Wave::new(0.30, 0.30, 0.050),
            qrs_duration: 0.09,
            pr_interval: 0.16,
        }
    }

    /// Wide ventricular beat: no P, inverted broad R, discordant T.
    pub fn pvc() -> Self {
        Self {
            p: None,
            q: Wave::zero(0.02, 0.01),
            r: Wave::new(-1.3, 0.080, 0.035),
            s: Wave::new(0.25, 0.150, 0.025),
            t: Wave::new(0.45, 0.36, 0.065),
            qrs_duration: 0.16,
            pr_interval: 0.16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let waves = [self.q, self.r, self.s, self.t].into_iter().chain(self.p);
        for w in waves {
            if !(w.width > 0.0) || !w.amplitude.is_finite() || !w.center.is_finite() {
                return Err(SynthError::InvalidTemplate(format!("bad wave {w:?}")));
            }
        }
        if !(0.04..=0.3).contains(&self.qrs_duration) {
            return Err(SynthError::InvalidTemplate(format!(
                "qrs duration {} outside [0.04, 0.3] s",
                self.qrs_duration
            )));
        }
        if self.p.is_some() && !(0.05..=0.6).contains(&self.pr_interval) {
            return Err(SynthError::InvalidTemplate(format!(
                "pr interval {} outside [0.05, 0.6] s",
                self.pr_interval
            )));
        }
        Ok(())
    }

    /// Q, R, S, T in that order.
    pub fn ventricular_waves(&self) -> [Wave; 4] {
        [self.q, self.r, self.s, self.t]
    }
}

/// Single-source waveform of one beat over `length` samples. P onset is at
/// t = 0 and QRS onset at `pr_interval`.
pub fn beat_waveform(template: &BeatTemplate, length: usize) -> Result<Vec<f64>> {
    template.validate()?;
    let qrs = template.pr_interval;
    Ok((0..length)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE_HZ as f64;
            let p = template.p.map_or(0.0, |w| w.value(t));
            p + template
                .ventricular_waves()
                .iter()
                .map(|w| w.value(t - qrs))
                .sum::<f64>()
        })
        .collect())
}
