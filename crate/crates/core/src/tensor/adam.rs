use serde::{Deserialize, Serialize};

use super::{Result, Scalar, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Which parameters receive the L2 penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Scope {
    /// Convolution and affine weights only.
    #[default]
    Weights,
    /// Every trainable tensor, including biases and batch-norm scale/shift.
    AllParameters,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step_count: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, param_lengths: &[usize]) -> Self {
        Self {
            config,
            first_moment: param_lengths.iter().map(|&n| vec![T::zero(); n]).collect(),
            second_moment: param_lengths.iter().map(|&n| vec![T::zero(); n]).collect(),
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update.
///
/// Parameters flagged in `decay` see the gradient `g + 2 * l2_lambda * w`,
/// the derivative of `l2_lambda * sum(w^2)`.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    decay: &[bool],
    state: &mut AdamState<T>,
    l2_lambda: f64,
) -> Result<()> {
    let n = params.len();
    for (what, got) in [
        ("gradient list", grads.len()),
        ("decay mask", decay.len()),
        ("first moments", state.first_moment.len()),
        ("second moments", state.second_moment.len()),
    ] {
        if got != n {
            return Err(TensorError::LengthMismatch {
                what: what.into(),
                got,
                expected: n,
            });
        }
    }
    for (i, p) in params.iter().enumerate() {
        for (what, got) in [
            ("gradient", grads[i].len()),
            ("first moment", state.first_moment[i].len()),
            ("second moment", state.second_moment[i].len()),
        ] {
            if got != p.len() {
                return Err(TensorError::LengthMismatch {
                    what: format!("{what} of parameter {i}"),
                    got,
                    expected: p.len(),
                });
            }
        }
    }

    state.step_count += 1;
    let cfg = state.config;
    let t = state.step_count as i32;
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let lr = T::from_f64(cfg.learning_rate);
    let eps = T::from_f64(cfg.epsilon);
    let two_lambda = T::from_f64(2.0 * l2_lambda);

    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..p.len() {
            let mut g = grads[i][j];
            if decay[i] {
                g += two_lambda * p[j];
            }
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = vec![0.5f64, -2.0];
        let mut st = AdamState::new(AdamConfig::default(), &[2]);
        adam_step(&mut [&mut w[..]], &[&[0.0, 0.0][..]], &[true], &mut st, 0.0).unwrap();
        assert_eq!(w, vec![0.5, -2.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0f64, -0.25, 1e-3] {
            let mut w = vec![1.0f64; 3];
            let mut st = AdamState::new(AdamConfig::default(), &[3]);
            adam_step(&mut [&mut w[..]], &[&[g; 3][..]], &[false], &mut st, 0.0).unwrap();
            for x in w {
                let moved = 1.0 - x;
                assert!((moved - 1e-3 * g.signum()).abs() < 1e-8, "g={g} moved {moved}");
            }
        }
    }

    #[test]
    fn decay_shrinks_positive_weight() {
        let mut w = vec![2.0f32];
        let mut st = AdamState::new(AdamConfig::default(), &[1]);
        adam_step(&mut [&mut w[..]], &[&[0.0][..]], &[true], &mut st, 1e-2).unwrap();
        assert!(w[0] < 2.0);
        let mut b = vec![2.0f32];
        let mut st = AdamState::new(AdamConfig::default(), &[1]);
        adam_step(&mut [&mut b[..]], &[&[0.0][..]], &[false], &mut st, 1e-2).unwrap();
        assert_eq!(b[0], 2.0);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut w = vec![0.0f32; 2];
        let mut st = AdamState::new(AdamConfig::default(), &[2]);
        let err = adam_step(&mut [&mut w[..]], &[&[0.0][..]], &[false], &mut st, 0.0);
        assert!(matches!(err, Err(TensorError::LengthMismatch { .. })));
        let mut st = AdamState::new(AdamConfig::default(), &[3]);
        assert!(adam_step(&mut [&mut w[..]], &[&[0.0, 0.0][..]], &[false], &mut st, 0.0).is_err());
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn identical_inputs_give_identical_bits() {
        let run = || {
            let mut w: Vec<f32> = (0..50).map(|i| (i as f32 * 0.37).sin()).collect();
            let g: Vec<f32> = (0..50).map(|i| (i as f32 * 1.3).cos()).collect();
            let mut st = AdamState::new(AdamConfig::default(), &[50]);
            for _ in 0..5 {
                adam_step(&mut [&mut w[..]], &[&g[..]], &[true], &mut st, 1e-4).unwrap();
            }
            w.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
