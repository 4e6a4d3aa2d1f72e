//! LiDAR-guided camera-to-BEV view transformation.
//!
//! For every BEV cell the LiDAR feature vector drives three per-cell linear
//! generators:
//!
//! * `height_gen` proposes `N_h` sampling heights, squashed into the grid's
//!   z-range with `z_mid + tanh(raw) * z_half`;
//! * `weight_gen` produces `N_s * N_h` logits whose softmax pools the features
//!   sampled at every (scale, height) pair (adaptive sampling);
//! * `kernel_gen` produces a `C x C` kernel applied to the pooled vector as
//!   `row × K` (adaptive projection).
//!
//! Sampled features are averaged over the cameras that see the point; a point
//! no camera sees contributes a zero vector but keeps its pooling weight.
//! The fixed-height baseline uses the same sampler with cell-independent
//! heights and uniform weights.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{invalid, shape_err, Result};
use crate::geometry::{BevGrid, CameraModel, FeaturePyramid};
use crate::ops::{bilinear_backward, bilinear_sample_into, softmax_backward, softmax_in_place};
use crate::tensor::{nest, nest_mut, LinearMap, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AsapParams {
    pub n_heights: usize,
    pub n_scales: usize,
    /// `[C -> N_h]`
    pub height_gen: LinearMap,
    /// `[C -> N_s * N_h]`, output index `j * N_h + i` for scale `j`, height `i`.
    pub weight_gen: LinearMap,
    /// `[C -> C * C]`, reshaped row-major into `K[m][k]`.
    pub kernel_gen: LinearMap,
    /// `[2C -> C]` on `concat(camera, lidar)`.
    pub fuse: LinearMap,
}

impl AsapParams {
    pub fn zeros(channels: usize, n_heights: usize, n_scales: usize) -> Self {
        Self {
            n_heights,
            n_scales,
            height_gen: LinearMap::zeros(n_heights, channels),
            weight_gen: LinearMap::zeros(n_scales * n_heights, channels),
            kernel_gen: LinearMap::zeros(channels * channels, channels),
            fuse: LinearMap::zeros(channels, 2 * channels),
        }
    }

    /// Starting point for fitting: heights at the z-midpoint, uniform pooling
    /// weights, identity kernels plus small noise, and an even camera/LiDAR
    /// blend in the fusion map.
    pub fn init<R: Rng + ?Sized>(channels: usize, n_heights: usize, n_scales: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(channels, n_heights, n_scales);
        p.height_gen = LinearMap::random(n_heights, channels, 0.01, rng);
        p.weight_gen = LinearMap::random(n_scales * n_heights, channels, 0.01, rng);
        p.kernel_gen = LinearMap::random(channels * channels, channels, 0.01, rng);
        for k in 0..channels {
            p.kernel_gen.bias.data_mut()[k * channels + k] = 1.0;
        }
        p.fuse = LinearMap::random(channels, 2 * channels, 0.05, rng);
        for k in 0..channels {
            let w = p.fuse.weight.data_mut();
            w[k * 2 * channels + k] += 0.5;
            w[k * 2 * channels + channels + k] += 0.5;
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.fuse.out_dim()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let (nh, ns) = (self.n_heights, self.n_scales);
        if nh == 0 || ns == 0 {
            return Err(invalid("need at least one height and one scale"));
        }
        let checks = [
            ("height_gen", &self.height_gen, nh, channels),
            ("weight_gen", &self.weight_gen, ns * nh, channels),
            ("kernel_gen", &self.kernel_gen, channels * channels, channels),
            ("fuse", &self.fuse, channels, 2 * channels),
        ];
        for (name, m, out, inp) in checks {
            if m.out_dim() != out || m.in_dim() != inp {
                return Err(shape_err(format!(
                    "{name} is [{} -> {}], expected [{inp} -> {out}]",
                    m.in_dim(),
                    m.out_dim()
                )));
            }
        }
        Ok(())
    }
}

impl ParamSet for AsapParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = nest("height_gen", self.height_gen.tensors());
        v.extend(nest("weight_gen", self.weight_gen.tensors()));
        v.extend(nest("kernel_gen", self.kernel_gen.tensors()));
        v.extend(nest("fuse", self.fuse.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = nest_mut("height_gen", self.height_gen.tensors_mut());
        v.extend(nest_mut("weight_gen", self.weight_gen.tensors_mut()));
        v.extend(nest_mut("kernel_gen", self.kernel_gen.tensors_mut()));
        v.extend(nest_mut("fuse", self.fuse.tensors_mut()));
        v
    }
}

/// BEV image features plus per-cell sampling diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct VtOutput {
    /// `[C, H, W]`
    pub bev: Tensor,
    /// `[N_h, H, W]` sampling heights in metres.
    pub per_cell_heights: Tensor,
    /// `[N_s * N_h, H, W]` pooling weights, summing to one per cell.
    pub per_cell_weights: Tensor,
    /// `[H, W]` fraction of sampling points seen by at least one camera.
    pub validity_fraction: Tensor,
}

/// Cameras paired with their feature pyramids.
#[derive(Clone, Copy, Debug)]
pub struct CameraViews<'a> {
    pub cameras: &'a [CameraModel],
    pub pyramids: &'a [FeaturePyramid],
}

impl<'a> CameraViews<'a> {
    pub fn new(cameras: &'a [CameraModel], pyramids: &'a [FeaturePyramid]) -> Result<Self> {
        if cameras.len() != pyramids.len() {
            return Err(shape_err(format!(
                "{} cameras but {} pyramids",
                cameras.len(),
                pyramids.len()
            )));
        }
        if let Some(first) = pyramids.first() {
            let strides = first.strides();
            let c = first.channels();
            for p in pyramids {
                if p.strides() != strides || p.channels() != c {
                    return Err(shape_err("camera pyramids disagree on strides or channels"));
                }
            }
        }
        Ok(Self { cameras, pyramids })
    }

    fn check(&self, channels: usize, n_scales: usize) -> Result<()> {
        for p in self.pyramids {
            if p.levels.len() != n_scales {
                return Err(shape_err(format!(
                    "pyramid has {} levels, expected {n_scales}",
                    p.levels.len()
                )));
            }
            if p.channels() != channels {
                return Err(shape_err(format!(
                    "pyramid has {} channels, expected {channels}",
                    p.channels()
                )));
            }
        }
        Ok(())
    }
}

/// Where one 3-D sampling point lands in one camera.
#[derive(Clone, Copy, Debug)]
struct Hit {
    camera: usize,
    px: f64,
    py: f64,
    /// `d(px, py) / dZ`
    dz: (f64, f64),
}

/// Projects `(x, y, z)` into every camera.
fn project_point(views: &CameraViews<'_>, x: f64, y: f64, z: f64, hits: &mut Vec<Hit>) {
    hits.clear();
    for (ci, cam) in views.cameras.iter().enumerate() {
        let (p, jac) = cam.project_with_jacobian([x, y, z]);
        if p.valid {
            hits.push(Hit {
                camera: ci,
                px: p.x,
                py: p.y,
                dz: (jac[0][2], jac[1][2]),
            });
        }
    }
}

/// Camera-averaged feature at scale `j` for a set of hits. Returns the number
/// of cameras whose lookup was in bounds.
fn sample_scale(
    views: &CameraViews<'_>,
    hits: &[Hit],
    scale: usize,
    out: &mut [f64],
    scratch: &mut [f64],
    valid_mask: Option<&mut Vec<bool>>,
) -> usize {
    out.fill(0.0);
    let mut count = 0;
    let mut mask = valid_mask;
    if let Some(m) = mask.as_deref_mut() {
        m.clear();
    }
    for hit in hits {
        let level = &views.pyramids[hit.camera].levels[scale];
        let s = level.stride as f64;
        let ok = bilinear_sample_into(&level.map, hit.px / s, hit.py / s, scratch);
        if let Some(m) = mask.as_deref_mut() {
            m.push(ok);
        }
        if ok {
            count += 1;
            for (o, v) in out.iter_mut().zip(scratch.iter()) {
                *o += v;
            }
        }
    }
    if count > 1 {
        let inv = 1.0 / count as f64;
        for o in out.iter_mut() {
            *o *= inv;
        }
    }
    count
}

struct CellResult {
    feature: Vec<f64>,
    heights: Vec<f64>,
    weights: Vec<f64>,
    valid_fraction: f64,
}

/// Pools camera features for one cell given its heights and weights.
fn pool_cell(
    views: &CameraViews<'_>,
    x: f64,
    y: f64,
    heights: &[f64],
    weights: &[f64],
    n_scales: usize,
    channels: usize,
) -> (Vec<f64>, f64) {
    let n_h = heights.len();
    let mut out = vec![0.0; channels];
    let mut f = vec![0.0; channels];
    let mut scratch = vec![0.0; channels];
    let mut hits = Vec::with_capacity(views.cameras.len());
    let mut seen = 0usize;
    for (i, &z) in heights.iter().enumerate() {
        project_point(views, x, y, z, &mut hits);
        for j in 0..n_scales {
            let n = sample_scale(views, &hits, j, &mut f, &mut scratch, None);
            if n > 0 {
                seen += 1;
                let w = weights[j * n_h + i];
                for (o, v) in out.iter_mut().zip(&f) {
                    *o += w * v;
                }
            }
        }
    }
    (out, seen as f64 / (n_h * n_scales) as f64)
}

fn assemble(results: Vec<CellResult>, grid: &BevGrid, channels: usize, n_h: usize, n_w: usize) -> VtOutput {
    let (h, w) = (grid.height(), grid.width());
    let mut bev = Tensor::zeros(&[channels, h, w]);
    let mut hts = Tensor::zeros(&[n_h, h, w]);
    let mut wts = Tensor::zeros(&[n_w, h, w]);
    let mut valid = Tensor::zeros(&[h, w]);
    for (idx, r) in results.into_iter().enumerate() {
        let (v, u) = (idx / w, idx % w);
        bev.set_cell(v, u, &r.feature);
        hts.set_cell(v, u, &r.heights);
        wts.set_cell(v, u, &r.weights);
        valid.data_mut()[idx] = r.valid_fraction;
    }
    VtOutput {
        bev,
        per_cell_heights: hts,
        per_cell_weights: wts,
        validity_fraction: valid,
    }
}

fn check_lidar(lidar: &Tensor, grid: &BevGrid, channels: usize) -> Result<()> {
    let (c, h, w) = lidar.chw()?;
    if c != channels || h != grid.height() || w != grid.width() {
        return Err(shape_err(format!(
            "LiDAR BEV is {:?}, expected [{channels}, {}, {}]",
            lidar.shape(),
            grid.height(),
            grid.width()
        )));
    }
    Ok(())
}

/// Sampling heights `{Z_i}` proposed for cell `(u, v)`.
pub fn generate_heights(params: &AsapParams, lidar: &Tensor, grid: &BevGrid, u: usize, v: usize) -> Result<Vec<f64>> {
    let (_, h, w) = lidar.chw()?;
    if u >= w || v >= h {
        return Err(crate::Error::OutOfRange(format!("cell ({u}, {v})")));
    }
    let raw = params.height_gen.apply(&lidar.cell(v, u))?;
    Ok(heights_from_raw(&raw, grid))
}

pub(crate) fn heights_from_raw(raw: &[f64], grid: &BevGrid) -> Vec<f64> {
    raw.iter().map(|r| grid.z_mid() + r.tanh() * grid.z_half()).collect()
}

/// Adaptive sampling: LiDAR-predicted heights and softmax pooling weights.
pub fn adaptive_sample(
    params: &AsapParams,
    lidar: &Tensor,
    views: &CameraViews<'_>,
    grid: &BevGrid,
) -> Result<VtOutput> {
    let c = params.channels();
    params.validate(c)?;
    check_lidar(lidar, grid, c)?;
    views.check(c, params.n_scales)?;
    let (n_h, n_s) = (params.n_heights, params.n_scales);
    let w = grid.width();
    let results: Vec<CellResult> = (0..grid.n_cells())
        .into_par_iter()
        .map(|idx| {
            let (v, u) = (idx / w, idx % w);
            let feat = lidar.cell(v, u);
            let heights = heights_from_raw(&params.height_gen.forward(&feat), grid);
            let mut weights = params.weight_gen.forward(&feat);
            softmax_in_place(&mut weights);
            let (x, y) = grid.cell_center(u, v);
            let (feature, valid_fraction) = pool_cell(views, x, y, &heights, &weights, n_s, c);
            CellResult {
                feature,
                heights,
                weights,
                valid_fraction,
            }
        })
        .collect();
    Ok(assemble(results, grid, c, n_h, n_s * n_h))
}

/// Fixed-height baseline: every cell samples the same heights and pools with
/// uniform weights `1 / (N_s * N_h)`.
pub fn vanilla_vt(views: &CameraViews<'_>, grid: &BevGrid, fixed_heights: &[f64]) -> Result<VtOutput> {
    if fixed_heights.is_empty() {
        return Err(crate::Error::Empty("fixed heights"));
    }
    if let Some(z) = fixed_heights
        .iter()
        .find(|z| **z < grid.z_range[0] || **z > grid.z_range[1])
    {
        return Err(invalid(format!("fixed height {z} outside z-range {:?}", grid.z_range)));
    }
    let Some(first) = views.pyramids.first() else {
        return Err(crate::Error::Empty("camera views"));
    };
    let c = first.channels();
    let n_s = first.levels.len();
    views.check(c, n_s)?;
    let n_h = fixed_heights.len();
    let weights = vec![1.0 / (n_s * n_h) as f64; n_s * n_h];
    let w = grid.width();
    let results: Vec<CellResult> = (0..grid.n_cells())
        .into_par_iter()
        .map(|idx| {
            let (v, u) = (idx / w, idx % w);
            let (x, y) = grid.cell_center(u, v);
            let (feature, valid_fraction) = pool_cell(views, x, y, fixed_heights, &weights, n_s, c);
            CellResult {
                feature,
                heights: fixed_heights.to_vec(),
                weights: weights.clone(),
                valid_fraction,
            }
        })
        .collect();
    Ok(assemble(results, grid, c, n_h, n_s * n_h))
}

/// `N_h` heights at the centres of equal bins spanning the z-range
/// (a single height sits at the z-midpoint).
pub fn evenly_spread_heights(grid: &BevGrid, n_heights: usize) -> Vec<f64> {
    let step = (grid.z_range[1] - grid.z_range[0]) / n_heights as f64;
    (0..n_heights)
        .map(|i| grid.z_range[0] + (i as f64 + 0.5) * step)
        .collect()
}

/// Gradient buffers for [`adaptive_sample_backward`].
pub struct SampleGrads<'g> {
    pub params: &'g mut AsapParams,
    /// Accumulates into camera feature maps when present.
    pub pyramids: Option<&'g mut [FeaturePyramid]>,
}

/// Backward of [`adaptive_sample`] for upstream `d_bev` (`[C, H, W]`) and an
/// optional direct gradient on the per-cell heights (`[N_h, H, W]`).
pub fn adaptive_sample_backward(
    params: &AsapParams,
    lidar: &Tensor,
    views: &CameraViews<'_>,
    grid: &BevGrid,
    d_bev: &Tensor,
    d_heights: Option<&Tensor>,
    grads: SampleGrads<'_>,
) -> Result<()> {
    let c = params.channels();
    params.validate(c)?;
    check_lidar(lidar, grid, c)?;
    views.check(c, params.n_scales)?;
    let (n_h, n_s) = (params.n_heights, params.n_scales);
    let w = grid.width();
    let SampleGrads {
        params: g,
        mut pyramids,
    } = grads;
    let mut f = vec![0.0; c];
    let mut scratch = vec![0.0; c];
    let mut hits = Vec::new();
    let mut mask = Vec::new();
    let mut d_logits_in = vec![0.0; n_s * n_h];
    let mut d_raw = vec![0.0; n_h];
    let mut d_f = vec![0.0; c];
    for idx in 0..grid.n_cells() {
        let (v, u) = (idx / w, idx % w);
        let d_out = d_bev.cell(v, u);
        let d_h = d_heights.map(|t| t.cell(v, u));
        let out_zero = d_out.iter().all(|x| *x == 0.0);
        if out_zero && d_h.as_ref().is_none_or(|d| d.iter().all(|x| *x == 0.0)) {
            continue;
        }
        let feat = lidar.cell(v, u);
        let raw = params.height_gen.forward(&feat);
        let tanh: Vec<f64> = raw.iter().map(|r| r.tanh()).collect();
        let mut weights = params.weight_gen.forward(&feat);
        softmax_in_place(&mut weights);
        let (x, y) = grid.cell_center(u, v);
        d_logits_in.fill(0.0);
        for i in 0..n_h {
            let z = grid.z_mid() + tanh[i] * grid.z_half();
            let mut d_z = d_h.as_ref().map_or(0.0, |d| d[i]);
            if !out_zero {
                project_point(views, x, y, z, &mut hits);
                for j in 0..n_s {
                    let n = sample_scale(views, &hits, j, &mut f, &mut scratch, Some(&mut mask));
                    let wt = weights[j * n_h + i];
                    d_logits_in[j * n_h + i] = f.iter().zip(&d_out).map(|(a, b)| a * b).sum();
                    if n == 0 {
                        continue;
                    }
                    let scale = wt / n as f64;
                    for (df, dv) in d_f.iter_mut().zip(&d_out) {
                        *df = scale * dv;
                    }
                    for (hit, ok) in hits.iter().zip(&mask) {
                        if !ok {
                            continue;
                        }
                        let level = &views.pyramids[hit.camera].levels[j];
                        let s = level.stride as f64;
                        let d_map = pyramids
                            .as_deref_mut()
                            .map(|p| &mut p[hit.camera].levels[j].map);
                        let (gx, gy) = bilinear_backward(&level.map, hit.px / s, hit.py / s, &d_f, d_map);
                        d_z += (gx * hit.dz.0 + gy * hit.dz.1) / s;
                    }
                }
            }
            d_raw[i] = d_z * grid.z_half() * (1.0 - tanh[i] * tanh[i]);
        }
        if !out_zero {
            let d_logits = softmax_backward(&weights, &d_logits_in);
            params.weight_gen.accumulate_param_grad(&feat, &d_logits, &mut g.weight_gen);
        }
        params.height_gen.accumulate_param_grad(&feat, &d_raw, &mut g.height_gen);
    }
    Ok(())
}

/// Adaptive projection: `out(u, v) = bev_as(u, v) × K(u, v)` with the kernel
/// generated from the LiDAR cell.
pub fn adaptive_project(kernel_gen: &LinearMap, bev_as: &Tensor, lidar: &Tensor) -> Result<Tensor> {
    let (c, h, w) = bev_as.chw()?;
    if lidar.shape() != bev_as.shape() {
        return Err(shape_err(format!(
            "image BEV {:?} and LiDAR BEV {:?} differ",
            bev_as.shape(),
            lidar.shape()
        )));
    }
    if kernel_gen.in_dim() != c || kernel_gen.out_dim() != c * c {
        return Err(shape_err("kernel generator does not match channel count"));
    }
    let cells: Vec<Vec<f64>> = (0..h * w)
        .into_par_iter()
        .map(|idx| {
            let (v, u) = (idx / w, idx % w);
            let k = kernel_gen.forward(&lidar.cell(v, u));
            row_times_kernel(&bev_as.cell(v, u), &k, c)
        })
        .collect();
    let mut out = Tensor::zeros(&[c, h, w]);
    for (idx, cell) in cells.iter().enumerate() {
        out.set_cell(idx / w, idx % w, cell);
    }
    Ok(out)
}

fn row_times_kernel(a: &[f64], k: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for (m, am) in a.iter().enumerate() {
        if *am == 0.0 {
            continue;
        }
        let row = &k[m * c..(m + 1) * c];
        for (o, kv) in out.iter_mut().zip(row) {
            *o += am * kv;
        }
    }
    out
}

/// Backward of [`adaptive_project`]; returns `d bev_as`.
pub fn adaptive_project_backward(
    kernel_gen: &LinearMap,
    bev_as: &Tensor,
    lidar: &Tensor,
    d_out: &Tensor,
    grad: &mut LinearMap,
) -> Result<Tensor> {
    let (c, h, w) = bev_as.chw()?;
    let mut d_as = Tensor::zeros(&[c, h, w]);
    let mut d_k = vec![0.0; c * c];
    for idx in 0..h * w {
        let (v, u) = (idx / w, idx % w);
        let dy = d_out.cell(v, u);
        if dy.iter().all(|x| *x == 0.0) {
            continue;
        }
        let feat = lidar.cell(v, u);
        let k = kernel_gen.forward(&feat);
        let a = bev_as.cell(v, u);
        let mut da = vec![0.0; c];
        for m in 0..c {
            let row = &k[m * c..(m + 1) * c];
            da[m] = row.iter().zip(&dy).map(|(kv, g)| kv * g).sum();
            for kk in 0..c {
                d_k[m * c + kk] = a[m] * dy[kk];
            }
        }
        kernel_gen.accumulate_param_grad(&feat, &d_k, grad);
        d_as.set_cell(v, u, &da);
    }
    Ok(d_as)
}

/// Per-cell linear fusion of `concat(camera, lidar)`.
pub fn fuse_bev(fuse: &LinearMap, bev_camera: &Tensor, bev_lidar: &Tensor) -> Result<Tensor> {
    let (c, h, w) = bev_camera.chw()?;
    let (cl, hl, wl) = bev_lidar.chw()?;
    if (h, w) != (hl, wl) || fuse.in_dim() != c + cl {
        return Err(shape_err(format!(
            "cannot fuse {:?} and {:?} with a [{} -> {}] map",
            bev_camera.shape(),
            bev_lidar.shape(),
            fuse.in_dim(),
            fuse.out_dim()
        )));
    }
    let c_out = fuse.out_dim();
    let cells: Vec<Vec<f64>> = (0..h * w)
        .into_par_iter()
        .map(|idx| {
            let (v, u) = (idx / w, idx % w);
            let mut x = bev_camera.cell(v, u);
            x.extend(bev_lidar.cell(v, u));
            fuse.forward(&x)
        })
        .collect();
    let mut out = Tensor::zeros(&[c_out, h, w]);
    for (idx, cell) in cells.iter().enumerate() {
        out.set_cell(idx / w, idx % w, cell);
    }
    Ok(out)
}

/// Backward of [`fuse_bev`]; returns `d bev_camera` (the LiDAR input is data).
pub fn fuse_bev_backward(
    fuse: &LinearMap,
    bev_camera: &Tensor,
    bev_lidar: &Tensor,
    d_out: &Tensor,
    grad: &mut LinearMap,
) -> Result<Tensor> {
    let (c, h, w) = bev_camera.chw()?;
    let mut d_cam = Tensor::zeros(&[c, h, w]);
    for idx in 0..h * w {
        let (v, u) = (idx / w, idx % w);
        let dy = d_out.cell(v, u);
        if dy.iter().all(|x| *x == 0.0) {
            continue;
        }
        let mut x = bev_camera.cell(v, u);
        x.extend(bev_lidar.cell(v, u));
        let dx = fuse.backward(&x, &dy, grad);
        d_cam.set_cell(v, u, &dx[..c]);
    }
    Ok(d_cam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PyramidLevel, FeaturePyramid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid8() -> BevGrid {
        BevGrid::new([-8.0, 8.0], [-8.0, 8.0], [-5.0, 3.0], [8, 8]).unwrap()
    }

    fn ring(channels: usize, rng: &mut ChaCha8Rng) -> (Vec<CameraModel>, Vec<FeaturePyramid>) {
        let cams: Vec<CameraModel> = (0..2)
            .map(|k| {
                CameraModel::looking_along(k as f64 * std::f64::consts::PI, [0.0, 0.0, 1.0], 12.0, (24, 16))
                    .unwrap()
            })
            .collect();
        let pyrs = cams
            .iter()
            .map(|_| {
                FeaturePyramid::new(vec![
                    PyramidLevel { stride: 1, map: Tensor::random_normal(&[channels, 16, 24], 1.0, rng) },
                    PyramidLevel { stride: 2, map: Tensor::random_normal(&[channels, 8, 12], 1.0, rng) },
                ])
                .unwrap()
            })
            .collect();
        (cams, pyrs)
    }

    #[test]
    fn height_generation_examples() {
        let g = BevGrid::default();
        let lidar = Tensor::zeros(&[3, 180, 180]);
        let p = AsapParams::zeros(3, 4, 2);
        assert_eq!(generate_heights(&p, &lidar, &g, 5, 7).unwrap(), vec![-1.0; 4]);

        let mut p = AsapParams::zeros(3, 1, 1);
        p.height_gen.bias.data_mut()[0] = 1e6;
        assert_eq!(generate_heights(&p, &lidar, &g, 0, 0).unwrap(), vec![3.0]);
        p.height_gen.bias.data_mut()[0] = 0.5;
        let z = generate_heights(&p, &lidar, &g, 0, 0).unwrap()[0];
        assert!((z - (-1.0 + 0.5f64.tanh() * 4.0)).abs() < 1e-15);
        assert!((z - 0.848).abs() < 1e-3);
        assert!(generate_heights(&p, &lidar, &g, 180, 0).is_err());
    }

    #[test]
    fn weights_sum_to_one_and_constant_features_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = grid8();
        let c = 3;
        let (cams, mut pyrs) = ring(c, &mut rng);
        for p in &mut pyrs {
            for l in &mut p.levels {
                let (_, h, w) = l.map.chw().unwrap();
                for v in 0..h {
                    for u in 0..w {
                        l.map.set_cell(v, u, &[0.5, -1.0, 2.0]);
                    }
                }
            }
        }
        let views = CameraViews::new(&cams, &pyrs).unwrap();
        let params = AsapParams::init(c, 3, 2, &mut rng);
        let mut params = params;
        params.weight_gen = LinearMap::random(6, c, 3.0, &mut rng);
        let lidar = Tensor::random_normal(&[c, 8, 8], 1.0, &mut rng);
        let out = adaptive_sample(&params, &lidar, &views, &g).unwrap();
        for v in 0..8 {
            for u in 0..8 {
                let w = out.per_cell_weights.cell(v, u);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(w.iter().all(|x| *x > 0.0 && *x < 1.0));
                if out.validity_fraction.data()[v * 8 + u] == 1.0 {
                    let f = out.bev.cell(v, u);
                    assert!((f[0] - 0.5).abs() < 1e-12 && (f[2] - 2.0).abs() < 1e-12);
                }
                for z in out.per_cell_heights.cell(v, u) {
                    assert!((-5.0..=3.0).contains(&z));
                }
            }
        }
    }

    #[test]
    fn adaptive_project_examples() {
        let c = 2;
        let bev = Tensor::new(vec![2, 1, 1], vec![1.0, 2.0]).unwrap();
        let lidar = Tensor::zeros(&[2, 1, 1]);
        let mut k = LinearMap::zeros(4, 2);
        k.bias.data_mut().copy_from_slice(&[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(adaptive_project(&k, &bev, &lidar).unwrap().data(), &[2.0, 1.0]);
        k.bias.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(adaptive_project(&k, &bev, &lidar).unwrap(), bev);
        let zero = LinearMap::zeros(c * c, c);
        assert!(adaptive_project(&zero, &bev, &lidar).unwrap().data().iter().all(|x| *x == 0.0));
        assert!(adaptive_project(&zero, &bev, &Tensor::zeros(&[2, 2, 1])).is_err());
    }

    #[test]
    fn fuse_examples() {
        let cam = Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap();
        let lid = Tensor::new(vec![1, 1, 1], vec![4.0]).unwrap();
        let f = LinearMap::from_rows(&[&[0.5, 0.5]], &[0.0]).unwrap();
        assert_eq!(fuse_bev(&f, &cam, &lid).unwrap().data(), &[3.0]);
        let first = LinearMap::from_rows(&[&[1.0, 0.0]], &[0.0]).unwrap();
        assert_eq!(fuse_bev(&first, &cam, &lid).unwrap(), cam);
        let last = LinearMap::from_rows(&[&[0.0, 1.0]], &[0.0]).unwrap();
        assert_eq!(fuse_bev(&last, &cam, &lid).unwrap(), lid);
        assert!(fuse_bev(&first, &cam, &Tensor::zeros(&[1, 2, 1])).is_err());
    }

    #[test]
    fn vanilla_matches_adaptive_with_constant_generators() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = grid8();
        let c = 3;
        let (cams, pyrs) = ring(c, &mut rng);
        let views = CameraViews::new(&cams, &pyrs).unwrap();
        let fixed = [-1.5, 0.25];
        let van = vanilla_vt(&views, &g, &fixed).unwrap();
        let mut p = AsapParams::zeros(c, 2, 2);
        for (b, z) in p.height_gen.bias.data_mut().iter_mut().zip(fixed) {
            *b = ((z - g.z_mid()) / g.z_half()).atanh();
        }
        let lidar = Tensor::random_normal(&[c, 8, 8], 1.0, &mut rng);
        let ada = adaptive_sample(&p, &lidar, &views, &g).unwrap();
        assert!(van.bev.max_abs_diff(&ada.bev) < 1e-12);
        assert!(vanilla_vt(&views, &g, &[]).is_err());
        assert!(vanilla_vt(&views, &g, &[7.0]).is_err());
    }

    #[test]
    fn evenly_spread_heights_are_bin_centres() {
        let g = BevGrid::default();
        assert_eq!(evenly_spread_heights(&g, 4), vec![-4.0, -2.0, 0.0, 2.0]);
        assert_eq!(evenly_spread_heights(&g, 1), vec![-1.0]);
    }

    #[test]
    fn mismatched_views_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cams, pyrs) = ring(3, &mut rng);
        assert!(CameraViews::new(&cams[..1], &pyrs).is_err());
        let views = CameraViews::new(&cams, &pyrs).unwrap();
        let p = AsapParams::zeros(3, 2, 1);
        let lidar = Tensor::zeros(&[3, 8, 8]);
        assert!(adaptive_sample(&p, &lidar, &views, &grid8()).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::gradcheck::{compare_params, finite_diff_params};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = BevGrid::new([-6.0, 6.0], [-6.0, 6.0], [-5.0, 3.0], [4, 4]).unwrap();
        let c = 3;
        let (cams, pyrs) = ring(c, &mut rng);
        let views = CameraViews::new(&cams, &pyrs).unwrap();
        let mut params = AsapParams::init(c, 2, 2, &mut rng);
        params.height_gen = LinearMap::random(2, c, 0.5, &mut rng);
        params.weight_gen = LinearMap::random(4, c, 1.0, &mut rng);
        let lidar = Tensor::random_normal(&[c, 4, 4], 1.0, &mut rng);
        let probe = Tensor::random_normal(&[c, 4, 4], 1.0, &mut rng);
        let h_probe = Tensor::random_normal(&[2, 4, 4], 1.0, &mut rng);
        let loss = |p: &AsapParams| {
            let out = adaptive_sample(p, &lidar, &views, &g).unwrap();
            let proj = adaptive_project(&p.kernel_gen, &out.bev, &lidar).unwrap();
            let fused = fuse_bev(&p.fuse, &proj, &lidar).unwrap();
            fused.dot(&probe) + out.per_cell_heights.dot(&h_probe)
        };
        let out = adaptive_sample(&params, &lidar, &views, &g).unwrap();
        let proj = adaptive_project(&params.kernel_gen, &out.bev, &lidar).unwrap();
        let mut grads = params.clone();
        grads.zero_();
        let d_proj = fuse_bev_backward(&params.fuse, &proj, &lidar, &probe, &mut grads.fuse).unwrap();
        let d_as =
            adaptive_project_backward(&params.kernel_gen, &out.bev, &lidar, &d_proj, &mut grads.kernel_gen).unwrap();
        adaptive_sample_backward(
            &params,
            &lidar,
            &views,
            &g,
            &d_as,
            Some(&h_probe),
            SampleGrads { params: &mut grads, pyramids: None },
        )
        .unwrap();
        let num = finite_diff_params(&params, loss, 1e-6).unwrap();
        for r in compare_params(&grads, &num) {
            assert!(r.passes(1e-5), "{}: {} ({} vs {})", r.name, r.rel_err, r.analytic_norm, r.numeric_norm);
        }
    }
}
