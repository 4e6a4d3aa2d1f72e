//! Dense row-major tensors and per-cell linear maps.
//!
//! Everything in the crate is carried by [`Tensor`], a plain `f64` buffer with
//! a shape. Feature maps are stored channel-major as `[C, H, W]`, so the
//! feature vector of a single BEV cell is strided by `H * W`; [`Tensor::cell`]
//! and [`Tensor::set_cell`] gather and scatter those vectors.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Checked constructor: extents must be positive, `data` must match the
    /// shape, and every scalar must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        debug_assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, x) in t.data.iter_mut().enumerate() {
            *x = f(i);
        }
        t
    }

    /// 1-D tensor from a vector.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn random_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std.max(0.0)).expect("std is non-negative");
        Self::from_fn(shape, |_| normal.sample(rng))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        validate_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `(C, H, W)` of a rank-3 feature map.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(shape_err(format!("expected a [C,H,W] map, got {s:?}"))),
        }
    }

    /// Channel vector of cell `(row, col)` in a `[C, H, W]` map.
    pub fn cell(&self, row: usize, col: usize) -> Vec<f64> {
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let plane = h * w;
        let base = row * w + col;
        (0..c).map(|k| self.data[k * plane + base]).collect()
    }

    pub fn set_cell(&mut self, row: usize, col: usize, values: &[f64]) {
        let (h, w) = (self.shape[1], self.shape[2]);
        let plane = h * w;
        let base = row * w + col;
        for (k, v) in values.iter().enumerate() {
            self.data[k * plane + base] = *v;
        }
    }

    pub fn add_to_cell(&mut self, row: usize, col: usize, values: &[f64]) {
        let (h, w) = (self.shape[1], self.shape[2]);
        let plane = h * w;
        let base = row * w + col;
        for (k, v) in values.iter().enumerate() {
            self.data[k * plane + base] += *v;
        }
    }

    pub fn at3(&self, c: usize, row: usize, col: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + row) * w + col]
    }

    pub fn set3(&mut self, c: usize, row: usize, col: usize, value: f64) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + row) * w + col] = value;
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(shape_err(format!(
            "extents must be non-empty and positive, got {shape:?}"
        )));
    }
    Ok(())
}

/// Affine map `y = W x + b` with `W: [out, in]`.
///
/// Also used as the generator for every per-cell "convolution" in the view
/// transform: those are 1x1 and therefore a linear map applied to one cell's
/// feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearMap {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || weight.dim(0) != bias.dim(0) {
            return Err(shape_err(format!(
                "weight {:?} and bias {:?} disagree",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    /// Gaussian weights scaled by `gain / sqrt(in)`, zero bias.
    pub fn random<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain / (in_dim as f64).sqrt();
        Self {
            weight: Tensor::random_normal(&[out_dim, in_dim], std, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn from_rows(rows: &[&[f64]], bias: &[f64]) -> Result<Self> {
        let out = rows.len();
        let inp = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != inp) {
            return Err(shape_err("ragged weight rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(
            Tensor::new(vec![out, inp], data)?,
            Tensor::new(vec![bias.len()], bias.to_vec())?,
        )
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.out_dim(), self.in_dim())
    }

    /// Checked application.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(shape_err(format!(
                "linear map expects {} inputs, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        let mut y = vec![0.0; self.out_dim()];
        self.apply_into(x, &mut y);
        Ok(y)
    }

    /// Unchecked application; zero inputs are skipped, which makes the per-cell
    /// generators cheap on empty LiDAR cells.
    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim());
        debug_assert_eq!(y.len(), self.out_dim());
        let n_in = self.in_dim();
        let w = self.weight.data();
        y.copy_from_slice(self.bias.data());
        if x.iter().all(|v| *v == 0.0) {
            return;
        }
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            *yo += acc;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out_dim()];
        self.apply_into(x, &mut y);
        y
    }

    /// Applies the map to each row of a row-major `[n, in]` matrix.
    pub fn forward_rows(&self, x: &[f64]) -> Vec<f64> {
        let n_in = self.in_dim();
        let n_out = self.out_dim();
        let rows = x.len() / n_in;
        let mut y = vec![0.0; rows * n_out];
        for r in 0..rows {
            self.apply_into(&x[r * n_in..(r + 1) * n_in], &mut y[r * n_out..(r + 1) * n_out]);
        }
        y
    }

    /// Accumulates `dW += dy xᵀ`, `db += dy` into `grad` and returns `Wᵀ dy`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut LinearMap) -> Vec<f64> {
        self.accumulate_param_grad(x, dy, grad);
        self.input_grad(dy)
    }

    pub fn input_grad(&self, dy: &[f64]) -> Vec<f64> {
        let n_in = self.in_dim();
        let w = self.weight.data();
        let mut dx = vec![0.0; n_in];
        for (o, g) in dy.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let row = &w[o * n_in..(o + 1) * n_in];
            for (d, wi) in dx.iter_mut().zip(row) {
                *d += g * wi;
            }
        }
        dx
    }

    pub fn accumulate_param_grad(&self, x: &[f64], dy: &[f64], grad: &mut LinearMap) {
        let n_in = self.in_dim();
        let gw = grad.weight.data_mut();
        let x_nonzero = x.iter().any(|v| *v != 0.0);
        for (o, g) in dy.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            if x_nonzero {
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for (d, xi) in row.iter_mut().zip(x) {
                    *d += g * xi;
                }
            }
        }
        for (d, g) in grad.bias.data_mut().iter_mut().zip(dy) {
            *d += g;
        }
    }

    /// Row-wise backward for [`LinearMap::forward_rows`].
    pub fn backward_rows(&self, x: &[f64], dy: &[f64], grad: &mut LinearMap) -> Vec<f64> {
        let n_in = self.in_dim();
        let n_out = self.out_dim();
        let rows = x.len() / n_in;
        let mut dx = Vec::with_capacity(x.len());
        for r in 0..rows {
            dx.extend(self.backward(
                &x[r * n_in..(r + 1) * n_in],
                &dy[r * n_out..(r + 1) * n_out],
                grad,
            ));
        }
        dx
    }
}

/// Checked `y = W x + b` on 1-D tensors.
pub fn linear_apply(map: &LinearMap, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(invalid(format!("expected a vector, got shape {:?}", x.shape())));
    }
    let y = map.apply(x.data())?;
    Tensor::vector(y)
}

/// Uniform access to every trainable tensor of a parameter bundle.
///
/// Gradients are stored in a value of the same type as the parameters, so the
/// same visitor drives gradient descent, finite-difference checks and
/// zero-initialisation of gradient buffers.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn zero_(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// `self += scale * other`, tensor by tensor.
    fn axpy(&mut self, scale: f64, other: &Self)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for ((_, dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.data_mut().iter_mut().zip(s.data()) {
                *d += scale * v;
            }
        }
    }

    fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

impl ParamSet for LinearMap {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

/// Prefixes the names of a nested parameter set.
pub(crate) fn nest<'a>(prefix: &str, items: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

pub(crate) fn nest_mut<'a>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor)>,
) -> Vec<(String, &'a mut Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_rejects_bad_input() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(1))
        ));
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn cell_gather_scatter() {
        let mut t = Tensor::from_fn(&[3, 2, 4], |i| i as f64);
        assert_eq!(t.cell(1, 2), vec![6.0, 14.0, 22.0]);
        t.set_cell(0, 0, &[-1.0, -2.0, -3.0]);
        assert_eq!(t.at3(2, 0, 0), -3.0);
    }

    #[test]
    fn linear_apply_examples() {
        let id = LinearMap::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]).unwrap();
        let y = linear_apply(&id, &Tensor::vector(vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);

        let m = LinearMap::from_rows(&[&[1.0, 1.0]], &[1.0]).unwrap();
        assert_eq!(m.apply(&[2.0, 3.0]).unwrap(), vec![6.0]);

        let mut zero = LinearMap::zeros(1, 3);
        zero.bias.data_mut()[0] = 5.0;
        assert_eq!(zero.apply(&[7.0, -1.0, 0.25]).unwrap(), vec![5.0]);
    }

    #[test]
    fn linear_apply_dimension_mismatch() {
        let m = LinearMap::zeros(2, 3);
        assert!(m.apply(&[1.0, 2.0]).is_err());
        assert!(LinearMap::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn linear_backward_accumulates() {
        let m = LinearMap::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]], &[0.5, -0.5]).unwrap();
        let mut g = m.zeros_like();
        let dx = m.backward(&[1.0, -1.0], &[1.0, 2.0], &mut g);
        assert_eq!(dx, vec![7.0, 10.0]);
        assert_eq!(g.weight.data(), &[1.0, -1.0, 2.0, -2.0]);
        assert_eq!(g.bias.data(), &[1.0, 2.0]);
    }
}
