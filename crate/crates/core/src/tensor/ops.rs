//! Numeric kernels behind the tape operations. Everything here works on flat
//! row-major slices; shape validation happens in the tape layer.

use serde::{Deserialize, Serialize};

use super::{gemm::matmul, Scalar};

/// Batch-norm variance floor.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding so that the output length is `ceil(len / stride)`.
    Same,
    /// No padding.
    Valid,
}

/// Output length and left padding for `same` convolution.
pub fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let needed = (out - 1) * stride + kernel;
    let total = needed.saturating_sub(len);
    (out, total / 2)
}

/// Output length of a convolution, `None` when a valid convolution has no
/// complete window.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Same => Some(same_padding(len, kernel, stride).0),
        Padding::Valid => (len >= kernel).then(|| (len - kernel) / stride + 1),
    }
}

/// Ceil-mode pooling length.
pub fn pool_output_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub out_len: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad_left == 0 && self.out_len == self.len
    }
}

/// Unfolds one sample `[c_in, len]` into `[c_in * kernel, out_len]`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    for i in 0..g.c_in {
        let row_in = &x[i * g.len..(i + 1) * g.len];
        for k in 0..g.kernel {
            let out = &mut col[(i * g.kernel + k) * g.out_len..(i * g.kernel + k + 1) * g.out_len];
            let offset = k as isize - g.pad_left as isize;
            if g.stride == 1 {
                let lo = ((-offset).max(0) as usize).min(g.out_len);
                let hi = ((g.len as isize - offset).max(0) as usize)
                    .min(g.out_len)
                    .max(lo);
                out[..lo].fill(T::zero());
                if lo < hi {
                    let src = (lo as isize + offset) as usize;
                    out[lo..hi].copy_from_slice(&row_in[src..src + (hi - lo)]);
                }
                out[hi..].fill(T::zero());
            } else {
                for (t, o) in out.iter_mut().enumerate() {
                    let pos = (t * g.stride) as isize + offset;
                    *o = if pos >= 0 && (pos as usize) < g.len {
                        row_in[pos as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back, accumulating into `dx`.
fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    for i in 0..g.c_in {
        let row = &mut dx[i * g.len..(i + 1) * g.len];
        for k in 0..g.kernel {
            let src = &col[(i * g.kernel + k) * g.out_len..(i * g.kernel + k + 1) * g.out_len];
            let offset = k as isize - g.pad_left as isize;
            for (t, &v) in src.iter().enumerate() {
                let pos = (t * g.stride) as isize + offset;
                if pos >= 0 && (pos as usize) < g.len {
                    row[pos as usize] += v;
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let in_stride = g.c_in * g.len;
    let out_stride = g.c_out * g.out_len;
    let mut out = vec![T::zero(); g.batch * out_stride];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * g.out_len]
    };
    for b in 0..g.batch {
        let xb = &x[b * in_stride..(b + 1) * in_stride];
        let yb = &mut out[b * out_stride..(b + 1) * out_stride];
        if let Some(bias) = bias {
            for (c, row) in yb.chunks_exact_mut(g.out_len).enumerate() {
                row.fill(bias[c]);
            }
        }
        let rhs = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        matmul(g.c_out, g.col_rows(), g.out_len, w, false, rhs, false, T::one(), yb);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_dx, need_dw, need_db) = need;
    let in_stride = g.c_in * g.len;
    let out_stride = g.c_out * g.out_len;
    let rows = g.col_rows();
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * in_stride]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.c_out * rows]);
    let dbias = need_db.then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for b in 0..g.batch {
            let dyb = &dy[b * out_stride..(b + 1) * out_stride];
            for (c, row) in dyb.chunks_exact(g.out_len).enumerate() {
                db[c] += row.iter().copied().sum::<T>();
            }
        }
        db
    });
    let pointwise = g.is_pointwise();
    let mut col = vec![T::zero(); if pointwise { 0 } else { rows * g.out_len }];
    let mut dcol = vec![T::zero(); if pointwise || !need_dx { 0 } else { rows * g.out_len }];
    for b in 0..g.batch {
        let xb = &x[b * in_stride..(b + 1) * in_stride];
        let dyb = &dy[b * out_stride..(b + 1) * out_stride];
        if let Some(dw) = dw.as_mut() {
            let rhs = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut col);
                &col
            };
            // dW += dY * col^T
            matmul(g.c_out, g.out_len, rows, dyb, false, rhs, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
            if pointwise {
                matmul(rows, g.c_out, g.out_len, w, true, dyb, false, T::zero(), dxb);
            } else {
                matmul(rows, g.c_out, g.out_len, w, true, dyb, false, T::zero(), &mut dcol);
                col2im_add(&dcol, g, dxb);
            }
        }
    }
    ConvGrads { dx, dw, dbias }
}

/// Ceil-mode max pooling over the last axis of `rows` rows of length `len`.
/// Returns the pooled values and the flat input index of each maximum.
pub(crate) fn maxpool_forward<T: Scalar>(
    x: &[T],
    rows: usize,
    len: usize,
    size: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let out_len = pool_output_len(len, stride);
    let mut out = Vec::with_capacity(rows * out_len);
    let mut arg = Vec::with_capacity(rows * out_len);
    for r in 0..rows {
        let row = &x[r * len..(r + 1) * len];
        for j in 0..out_len {
            let start = j * stride;
            let end = (start + size).min(len);
            let mut best = start;
            for i in start + 1..end {
                if row[i] > row[best] {
                    best = i;
                }
            }
            out.push(row[best]);
            arg.push(r * len + best);
        }
    }
    (out, arg)
}

pub(crate) struct BnTrainOutput<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) fn batchnorm_train<T: Scalar>(
    x: &[T],
    (batch, channels, len): (usize, usize, usize),
    gamma: &[T],
    beta: &[T],
) -> BnTrainOutput<T> {
    let n = (batch * len) as f64;
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    let mut inv_std = vec![T::zero(); channels];
    for c in 0..channels {
        let mut sum = 0.0f64;
        for b in 0..batch {
            let off = (b * channels + c) * len;
            sum += x[off..off + len].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = sum / n;
        let mut sq = 0.0f64;
        for b in 0..batch {
            let off = (b * channels + c) * len;
            sq += x[off..off + len]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        let v = sq / n;
        mean[c] = T::from_f64(mu);
        var[c] = T::from_f64(v);
        inv_std[c] = T::from_f64(1.0 / (v + BN_EPSILON).sqrt());
    }
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * len;
            let (mu, is, g, bt) = (mean[c], inv_std[c], gamma[c], beta[c]);
            for i in off..off + len {
                let h = (x[i] - mu) * is;
                xhat[i] = h;
                y[i] = g * h + bt;
            }
        }
    }
    BnTrainOutput {
        y,
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Input gradient of training-mode batch norm.
pub(crate) fn batchnorm_train_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    (batch, channels, len): (usize, usize, usize),
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = (batch * len) as f64;
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    let mut dx = vec![T::zero(); dy.len()];
    for c in 0..channels {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..batch {
            let off = (b * channels + c) * len;
            for i in off..off + len {
                let d = dy[i].as_f64();
                sum_dy += d;
                sum_dy_xhat += d * xhat[i].as_f64();
            }
        }
        dgamma[c] = T::from_f64(sum_dy_xhat);
        dbeta[c] = T::from_f64(sum_dy);
        let scale = T::from_f64(gamma[c].as_f64() * inv_std[c].as_f64() / n);
        let n_t = T::from_f64(n);
        let (sdy, sdyx) = (T::from_f64(sum_dy), T::from_f64(sum_dy_xhat));
        for b in 0..batch {
            let off = (b * channels + c) * len;
            for i in off..off + len {
                dx[i] = scale * (n_t * dy[i] - sdy - xhat[i] * sdyx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// `max(z, 0) - z*y + ln(1 + e^{-|z|})`
pub(crate) fn sigmoid_ce_element(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_splits_even_kernels_left_short() {
        assert_eq!(same_padding(2500, 16, 1), (2500, 7));
        assert_eq!(same_padding(10, 3, 1), (10, 1));
        assert_eq!(same_padding(5, 1, 1), (5, 0));
        assert_eq!(same_padding(5, 3, 2), (3, 1));
    }

    #[test]
    fn valid_length_requires_full_window() {
        assert_eq!(conv_output_len(4, 2, 1, Padding::Valid), Some(3));
        assert_eq!(conv_output_len(1, 2, 1, Padding::Valid), None);
        assert_eq!(conv_output_len(7, 3, 2, Padding::Valid), Some(3));
    }

    #[test]
    fn strided_conv_matches_brute_force() {
        let g = ConvGeom {
            batch: 1,
            c_in: 2,
            len: 7,
            c_out: 1,
            kernel: 3,
            stride: 2,
            pad_left: 1,
            out_len: 4,
        };
        let x: Vec<f64> = (0..14).map(|i| i as f64).collect();
        let w: Vec<f64> = vec![1.0, -1.0, 0.5, 2.0, 0.0, -0.5];
        let y = conv_forward(&x, &w, None, &g);
        for t in 0..4 {
            let mut want = 0.0;
            for i in 0..2 {
                for k in 0..3 {
                    let pos = (t * 2 + k) as isize - 1;
                    if (0..7).contains(&pos) {
                        want += x[i * 7 + pos as usize] * w[i * 3 + k];
                    }
                }
            }
            assert_eq!(y[t], want);
        }
    }

    #[test]
    fn maxpool_partial_final_window() {
        let (y, arg) = maxpool_forward(&[3.0f64, 1.0, 4.0, 1.0, 5.0], 1, 5, 2, 2);
        assert_eq!(y, vec![3.0, 4.0, 5.0]);
        assert_eq!(arg, vec![0, 2, 4]);
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let (_, arg) = maxpool_forward(&[2.0f64, 2.0, 2.0], 1, 3, 2, 2);
        assert_eq!(arg, vec![0, 2]);
    }

    #[test]
    fn stable_ce_matches_direct_form() {
        assert!((sigmoid_ce_element(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((sigmoid_ce_element(1.0, 0.0) - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!(sigmoid_ce_element(800.0, 0.0).is_finite());
        assert!(sigmoid(-800.0) >= 0.0);
    }
}
