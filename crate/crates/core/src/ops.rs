//! Row-wise kernels shared by the tape and by direct (tape-free) callers.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::{Mask, Matrix};
use crate::rng::RngStream;

/// Additive surrogate for −∞ applied to masked scores before exponentiation.
pub const MASKED_SCORE: f64 = -1e9;

/// Softmax over each row, restricted to unmasked entries.
///
/// Masked scores are shifted by [`MASKED_SCORE`], the row maximum is taken
/// over unmasked entries only, and masked outputs are then forced to exactly
/// zero.
pub fn masked_softmax_rows(scores: &Matrix, mask: Option<&Mask>) -> Result<Matrix> {
    if let Some(mask) = mask {
        if mask.shape() != scores.shape() {
            return Err(Error::shape("masked_softmax_rows", scores.shape(), mask.shape()));
        }
    }
    let mut out = scores.clone();
    for i in 0..scores.rows() {
        let allow = mask.map(|m| m.row(i));
        let row = out.row_mut(i);
        let mut max = f64::NEG_INFINITY;
        for (j, v) in row.iter_mut().enumerate() {
            if allow.is_some_and(|a| !a[j]) {
                *v += MASKED_SCORE;
            } else if *v > max {
                max = *v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateMask { row: i });
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if allow.is_some_and(|a| !a[j]) {
                *v = 0.0;
            } else {
                *v = libm::exp(*v - max);
                sum += *v;
            }
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Per-row normalization statistics retained for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormOutput {
    pub output: Matrix,
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer normalization with population variance.
pub fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<LayerNormOutput> {
    let d = x.cols();
    if gain.shape() != (1, d) {
        return Err(Error::shape("layer_norm gain", x.shape(), gain.shape()));
    }
    if bias.shape() != (1, d) {
        return Err(Error::shape("layer_norm bias", x.shape(), bias.shape()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(alloc::format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut output = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    let n = d as f64;
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / libm::sqrt(var + eps);
        inv_std.push(inv);
        let xn = normalized.row_mut(i);
        for j in 0..d {
            xn[j] = (row[j] - mean) * inv;
        }
        let out = output.row_mut(i);
        for j in 0..d {
            out[j] = xn[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(LayerNormOutput { output, normalized, inv_std })
}

/// Draws an inverted-dropout multiplier mask: each entry is 0 with
/// probability `rate`, otherwise `1 / (1 − rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    check_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect())
}

/// Inverted dropout; the identity when `training` is off or `rate` is 0.
pub fn dropout(x: &Matrix, rate: f64, rng: &mut RngStream, training: bool) -> Result<Matrix> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng)?;
    let mut out = x.clone();
    for (v, m) in out.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok(out)
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidParameter(alloc::format!("dropout rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// `log σ(x)` without overflow for large |x|.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -libm::log1p(libm::exp(-x))
    } else {
        x - libm::log1p(libm::exp(x))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn uniform_scores_give_uniform_weights() {
        let s = Matrix::zeros(1, 3);
        let p = masked_softmax_rows(&s, None).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_survivor_takes_all_mass() {
        let s = Matrix::row_vector(&[0.7, 123.0]);
        let mask = Mask::new(1, 2, vec![true, false]).unwrap();
        let p = masked_softmax_rows(&s, Some(&mask)).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn matches_direct_formula() {
        let s = Matrix::row_vector(&[1.0, 2.0, 3.0]);
        let p = masked_softmax_rows(&s, None).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((p.get(0, j) - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let s = Matrix::zeros(2, 2);
        let mask = Mask::new(2, 2, vec![true, false, false, false]).unwrap();
        assert_eq!(masked_softmax_rows(&s, Some(&mask)).unwrap_err(), Error::DegenerateMask { row: 1 });
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Matrix::filled(1, 4, 3.25);
        let g = Matrix::filled(1, 4, 1.0);
        let b = Matrix::zeros(1, 4);
        let y = layer_norm(&x, &g, &b, 1e-8).unwrap().output;
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_two_point() {
        let x = Matrix::row_vector(&[1.0, 3.0]);
        let g = Matrix::filled(1, 2, 1.0);
        let b = Matrix::zeros(1, 2);
        let y = layer_norm(&x, &g, &b, 1e-12).unwrap().output;
        assert!((y.get(0, 0) + 1.0).abs() < 1e-5);
        assert!((y.get(0, 1) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_random_rows_are_standardized() {
        let mut rng = RngStream::new(3);
        let x = rng.normal_matrix(5, 16, 3.0);
        let g = Matrix::filled(1, 16, 1.0);
        let b = Matrix::zeros(1, 16);
        let y = layer_norm(&x, &g, &b, 1e-8).unwrap().output;
        for i in 0..5 {
            let r = y.row(i);
            let mean = r.iter().sum::<f64>() / 16.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = RngStream::new(0);
        let x = rng.normal_matrix(3, 3, 1.0);
        assert_eq!(dropout(&x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(dropout(&x, 0.7, &mut rng, false).unwrap(), x);
        assert!(matches!(dropout(&x, 1.0, &mut rng, true), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn dropout_zero_fraction() {
        let mut rng = RngStream::new(11);
        let x = Matrix::filled(1, 100_000, 1.0);
        let y = dropout(&x, 0.5, &mut rng, true).unwrap();
        let zeros = y.data().iter().filter(|v| **v == 0.0).count() as f64 / 1e5;
        assert!((zeros - 0.5).abs() < 0.01, "{zeros}");
        assert!(y.data().iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + core::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(log_sigmoid(1e9), 0.0);
        assert!((log_sigmoid(-1e9) + 1e9).abs() < 1e-6);
    }
}
