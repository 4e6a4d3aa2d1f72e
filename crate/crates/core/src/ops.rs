//! Elementwise and small vector kernels with their analytic derivatives.

use std::f64::consts::PI;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Variance floor used by [`layer_norm`].
pub const LN_EPS: f64 = 1e-5;

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Gradient of the softmax input given its output `y` and upstream `dy`.
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(yi, gi)| yi * (gi - dot)).collect()
}

/// Normalisation statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LnStats {
    pub inv_std: f64,
}

/// Zero-mean unit-variance normalisation (no affine parameters).
pub fn layer_norm(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() < 2 {
        return Err(invalid(format!(
            "layer norm needs at least 2 elements, got {}",
            v.len()
        )));
    }
    Ok(layer_norm_with_stats(v).0)
}

pub fn layer_norm_with_stats(v: &[f64]) -> (Vec<f64>, LnStats) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    (
        v.iter().map(|x| (x - mean) * inv_std).collect(),
        LnStats { inv_std },
    )
}

/// Backward of [`layer_norm`] from its output `y`.
pub fn layer_norm_backward(y: &[f64], stats: &LnStats, dy: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let mean_dy = dy.iter().sum::<f64>() / n;
    let mean_dy_y = dy.iter().zip(y).map(|(g, yi)| g * yi).sum::<f64>() / n;
    y.iter()
        .zip(dy)
        .map(|(yi, gi)| stats.inv_std * (gi - mean_dy - yi * mean_dy_y))
        .collect()
}

pub fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

pub fn relu_tensor(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for x in out.data_mut() {
        *x = x.max(0.0);
    }
    out
}

/// Upstream gradient masked by the sign of the ReLU output.
pub fn relu_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    y.iter()
        .zip(dy)
        .map(|(yi, gi)| if *yi > 0.0 { *gi } else { 0.0 })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Result of a bilinear lookup. Points outside the lattice hull return a zero
/// vector with `valid == false`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub value: Vec<f64>,
    pub valid: bool,
}

/// Interpolation stencil: the four lattice neighbours and their weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

pub(crate) fn stencil(h: usize, w: usize, x: f64, y: f64) -> Option<Stencil> {
    // also rejects NaN
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let (x0, x1, fx) = axis_stencil(w, x);
    let (y0, y1, fy) = axis_stencil(h, y);
    Some(Stencil {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
    })
}

fn axis_stencil(extent: usize, t: f64) -> (usize, usize, f64) {
    if extent == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (t.floor() as usize).min(extent - 2);
    (i0, i0 + 1, t - i0 as f64)
}

/// 4-neighbour bilinear interpolation of a `[C, H, W]` map at continuous
/// coordinates `(x, y)` = (column, row).
pub fn bilinear_sample(map: &Tensor, x: f64, y: f64) -> Sample {
    let c = map.dim(0);
    let mut value = vec![0.0; c];
    let valid = bilinear_sample_into(map, x, y, &mut value);
    Sample { value, valid }
}

/// Writes the interpolated vector into `out` (zeroed when invalid).
pub fn bilinear_sample_into(map: &Tensor, x: f64, y: f64, out: &mut [f64]) -> bool {
    let (x, y) = if crate::fault::swap_bilinear_axes() { (y, x) } else { (x, y) };
    let (h, w) = (map.dim(1), map.dim(2));
    out.fill(0.0);
    let Some(s) = stencil(h, w, x, y) else {
        return false;
    };
    let plane = h * w;
    let data = map.data();
    let w00 = (1.0 - s.fx) * (1.0 - s.fy);
    let w01 = s.fx * (1.0 - s.fy);
    let w10 = (1.0 - s.fx) * s.fy;
    let w11 = s.fx * s.fy;
    let i00 = s.y0 * w + s.x0;
    let i01 = s.y0 * w + s.x1;
    let i10 = s.y1 * w + s.x0;
    let i11 = s.y1 * w + s.x1;
    for (k, o) in out.iter_mut().enumerate() {
        let b = k * plane;
        *o = w00 * data[b + i00] + w01 * data[b + i01] + w10 * data[b + i10] + w11 * data[b + i11];
    }
    true
}

/// Backward of [`bilinear_sample`]: scatters `d_value` into `d_map` (when
/// given) and returns the gradient with respect to the sampling point.
/// Invalid points contribute nothing.
pub fn bilinear_backward(
    map: &Tensor,
    x: f64,
    y: f64,
    d_value: &[f64],
    d_map: Option<&mut Tensor>,
) -> (f64, f64) {
    let (h, w) = (map.dim(1), map.dim(2));
    let Some(s) = stencil(h, w, x, y) else {
        return (0.0, 0.0);
    };
    let plane = h * w;
    let data = map.data();
    let i00 = s.y0 * w + s.x0;
    let i01 = s.y0 * w + s.x1;
    let i10 = s.y1 * w + s.x0;
    let i11 = s.y1 * w + s.x1;
    let (mut gx, mut gy) = (0.0, 0.0);
    let dx_live = if w > 1 { 1.0 } else { 0.0 };
    let dy_live = if h > 1 { 1.0 } else { 0.0 };
    for (k, g) in d_value.iter().enumerate() {
        if *g == 0.0 {
            continue;
        }
        let b = k * plane;
        let (v00, v01, v10, v11) = (data[b + i00], data[b + i01], data[b + i10], data[b + i11]);
        gx += g * dx_live * ((1.0 - s.fy) * (v01 - v00) + s.fy * (v11 - v10));
        gy += g * dy_live * ((1.0 - s.fx) * (v10 - v00) + s.fx * (v11 - v01));
    }
    if let Some(dm) = d_map {
        let w00 = (1.0 - s.fx) * (1.0 - s.fy);
        let w01 = s.fx * (1.0 - s.fy);
        let w10 = (1.0 - s.fx) * s.fy;
        let w11 = s.fx * s.fy;
        let out = dm.data_mut();
        for (k, g) in d_value.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let b = k * plane;
            out[b + i00] += g * w00;
            out[b + i01] += g * w01;
            out[b + i10] += g * w10;
            out[b + i11] += g * w11;
        }
    }
    (gx, gy)
}

/// Angular frequency divisor of slot pair `k` for an encoding of `dim` values.
fn frequency(k: usize, dim: usize) -> f64 {
    10000f64.powf(2.0 * k as f64 / (dim / 2) as f64)
}

fn check_encoding_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim % 4 != 0 {
        return Err(invalid(format!(
            "sinusoidal encoding dim must be a positive multiple of 4, got {dim}"
        )));
    }
    Ok(())
}

/// Sinusoidal encoding of a normalised 2-D point.
///
/// Layout: the first `dim/2` slots encode `x`, the last `dim/2` encode `y`;
/// within a block slot `2k` is `sin(2π t / 10000^(2k/(dim/2)))` and slot
/// `2k+1` the matching cosine.
pub fn sinusoidal_encode(x: f64, y: f64, dim: usize) -> Result<Vec<f64>> {
    check_encoding_dim(dim)?;
    let mut out = vec![0.0; dim];
    encode_into(x, y, &mut out);
    Ok(out)
}

pub(crate) fn encode_into(x: f64, y: f64, out: &mut [f64]) {
    let dim = out.len();
    let half = dim / 2;
    for (axis, t) in [x, y].into_iter().enumerate() {
        let block = &mut out[axis * half..(axis + 1) * half];
        for k in 0..half / 2 {
            let arg = 2.0 * PI * t / frequency(k, dim);
            block[2 * k] = arg.sin();
            block[2 * k + 1] = arg.cos();
        }
    }
}

/// Gradient of `d_out · encode(x, y)` with respect to `(x, y)`.
pub(crate) fn encode_backward(x: f64, y: f64, d_out: &[f64]) -> (f64, f64) {
    let dim = d_out.len();
    let half = dim / 2;
    let mut grads = [0.0; 2];
    for (axis, t) in [x, y].into_iter().enumerate() {
        let block = &d_out[axis * half..(axis + 1) * half];
        for k in 0..half / 2 {
            let scale = 2.0 * PI / frequency(k, dim);
            let arg = scale * t;
            grads[axis] += block[2 * k] * scale * arg.cos() - block[2 * k + 1] * scale * arg.sin();
        }
    }
    (grads[0], grads[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let y = softmax(&[3.0; 4]).unwrap();
        assert!(y.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let y = softmax(&[0.0, 2f64.ln()]).unwrap();
        assert!((y[0] - 1.0 / 3.0).abs() < 1e-15 && (y[1] - 2.0 / 3.0).abs() < 1e-15);
        let y = softmax(&[1000.0, 0.0]).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y[0] - 1.0).abs() < 1e-15 && y[1] < 1e-300);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        assert_eq!(layer_norm(&[4.0; 5]).unwrap(), vec![0.0; 5]);
        let y = layer_norm(&[0.0, 2.0]).unwrap();
        assert!((y[0] + 1.0).abs() < 1e-5 && (y[1] - 1.0).abs() < 1e-5);
        assert!(layer_norm(&[1.0]).is_err());
    }

    #[test]
    fn layer_norm_idempotent_on_unit_variance_input() {
        // A unit-variance input makes the second pass see variance 1/(1+eps),
        // so the eps terms cancel to second order.
        for v in [vec![0.0, 2.0], vec![-1.0, 1.0, -1.0, 1.0], vec![3.0, 5.0, 3.0, 5.0]] {
            let once = layer_norm(&v).unwrap();
            let twice = layer_norm(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu(&[-3.0, -0.5]), vec![0.0, 0.0]);
    }

    #[test]
    fn bilinear_examples() {
        let map = Tensor::from_fn(&[1, 3, 3], |i| i as f64 * 1.5);
        let s = bilinear_sample(&map, 1.0, 1.0);
        assert!(s.valid);
        assert_eq!(s.value, vec![map.at3(0, 1, 1)]);

        let map = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let s = bilinear_sample(&map, 0.5, 0.5);
        assert!((s.value[0] - 1.5).abs() < 1e-15);

        let s = bilinear_sample(&map, -10.0, -10.0);
        assert!(!s.valid);
        assert_eq!(s.value, vec![0.0]);
    }

    #[test]
    fn bilinear_edges_are_inclusive() {
        let map = Tensor::new(vec![1, 2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let s = bilinear_sample(&map, 2.0, 1.0);
        assert!(s.valid);
        assert_eq!(s.value, vec![5.0]);
        assert!(!bilinear_sample(&map, 2.0 + 1e-12, 1.0).valid);
        assert!(!bilinear_sample(&map, f64::NAN, 0.0).valid);
        // axes are (column, row)
        assert_eq!(bilinear_sample(&map, 1.0, 0.0).value, vec![1.0]);
        assert_eq!(bilinear_sample(&map, 0.0, 1.0).value, vec![3.0]);
    }

    #[test]
    fn sinusoidal_examples() {
        let e = sinusoidal_encode(0.0, 0.0, 16).unwrap();
        for k in 0..8 {
            assert_eq!(e[2 * k], 0.0);
            assert_eq!(e[2 * k + 1], 1.0);
        }
        let a = sinusoidal_encode(0.2, 0.7, 8).unwrap();
        let b = sinusoidal_encode(0.7, 0.2, 8).unwrap();
        assert_eq!(&a[..4], &b[4..]);
        assert_eq!(&a[4..], &b[..4]);
        assert!(sinusoidal_encode(0.1, 0.1, 6).is_err());
        assert!(sinusoidal_encode(0.1, 0.1, 7).is_err());
    }

    #[test]
    fn sinusoidal_dim8_scalar_evaluation() {
        // dim 8: two frequency pairs per axis, divisors 10000^0 = 1 and 10000^(2/4) = 100.
        let e = sinusoidal_encode(0.5, 0.5, 8).unwrap();
        let expected = [
            (PI).sin(),
            (PI).cos(),
            (PI / 100.0).sin(),
            (PI / 100.0).cos(),
        ];
        for k in 0..4 {
            assert!((e[k] - expected[k]).abs() < 1e-15);
            assert!((e[4 + k] - expected[k]).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..32),
            c in -100.0f64..100.0,
        ) {
            let y = softmax(&v).unwrap();
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(y.iter().all(|p| *p > 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let ys = softmax(&shifted).unwrap();
            for (a, b) in y.iter().zip(&ys) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn layer_norm_moments(v in prop::collection::vec(-100.0f64..100.0, 2..40)) {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            prop_assume!(var > 0.0);
            let y = layer_norm(&v).unwrap();
            let m = y.iter().sum::<f64>() / n;
            let out_var = y.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            prop_assert!(m.abs() < 1e-9);
            // eps in the denominator shrinks the variance to var/(var+eps)
            prop_assert!((out_var - var / (var + LN_EPS)).abs() < 1e-9);
            if var >= 10.0 {
                prop_assert!((out_var - 1.0).abs() < 1e-6);
            }
            let twice = layer_norm(&y).unwrap();
            let rescale = 1.0 / (out_var + LN_EPS).sqrt();
            for (a, b) in y.iter().zip(&twice) {
                prop_assert!((a * rescale - b).abs() < 1e-9);
                if var >= 10.0 {
                    prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
                }
            }
        }

        #[test]
        fn relu_is_idempotent(v in prop::collection::vec(-10.0f64..10.0, 0..20)) {
            let once = relu(&v);
            prop_assert_eq!(relu(&once), once);
        }

        #[test]
        fn bilinear_linear_along_grid_segments(
            vals in prop::collection::vec(-5.0f64..5.0, 2 * 4 * 5),
            row in 0usize..4, col in 0usize..4, t in 0.0f64..1.0,
        ) {
            let map = Tensor::new(vec![2, 4, 5], vals).unwrap();
            // horizontal segment (col, row) -> (col+1, row)
            let a = bilinear_sample(&map, col as f64, row as f64).value;
            let b = bilinear_sample(&map, col as f64 + 1.0, row as f64).value;
            let m = bilinear_sample(&map, col as f64 + t, row as f64).value;
            for k in 0..2 {
                prop_assert!((m[k] - ((1.0 - t) * a[k] + t * b[k])).abs() < 1e-12);
                prop_assert_eq!(a[k], map.at3(k, row, col));
            }
            if row + 1 < 4 {
                let b = bilinear_sample(&map, col as f64, row as f64 + 1.0).value;
                let m = bilinear_sample(&map, col as f64, row as f64 + t).value;
                for k in 0..2 {
                    prop_assert!((m[k] - ((1.0 - t) * a[k] + t * b[k])).abs() < 1e-12);
                }
            }
        }
    }
}
