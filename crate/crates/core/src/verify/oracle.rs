//! Straightforward reference implementations, written without the library's
//! kernels so that the two can be compared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{BevGrid, CameraModel, FeaturePyramid, PyramidLevel};
use crate::query_select::{GroupKeypoints, GroupSpec, Keypoint};
use crate::tensor::{LinearMap, Tensor};
use crate::view_transform::AsapParams;

const NEAR: f64 = 0.1;

fn linear(m: &LinearMap, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (m.weight.dim(0), m.weight.dim(1));
    let w = m.weight.data();
    (0..rows)
        .map(|r| {
            let mut acc = m.bias.data()[r];
            for c in 0..cols {
                acc += w[r * cols + c] * x[c];
            }
            acc
        })
        .collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Pixel position of a world point, or `None` when it is behind the near
/// plane or off the image.
pub fn project(cam: &CameraModel, p: [f64; 3]) -> Option<(f64, f64)> {
    let mut pc = [0.0; 3];
    for r in 0..3 {
        pc[r] = cam.translation[r];
        for c in 0..3 {
            pc[r] += cam.rotation[r][c] * p[c];
        }
    }
    if pc[2] <= NEAR {
        return None;
    }
    let x = cam.fx * pc[0] / pc[2] + cam.cx;
    let y = cam.fy * pc[1] / pc[2] + cam.cy;
    let (w, h) = cam.image_size;
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return None;
    }
    Some((x, y))
}

/// Bilinear lookup of channel `ch` at column `x`, row `y`.
pub fn bilinear(map: &Tensor, ch: usize, x: f64, y: f64) -> Option<f64> {
    let (h, w) = (map.dim(1), map.dim(2));
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return None;
    }
    let at = |r: usize, c: usize| map.data()[ch * h * w + r * w + c];
    let x0 = if w == 1 { 0 } else { (x.floor() as usize).min(w - 2) };
    let y0 = if h == 1 { 0 } else { (y.floor() as usize).min(h - 2) };
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = if w == 1 { 0.0 } else { x - x0 as f64 };
    let fy = if h == 1 { 0.0 } else { y - y0 as f64 };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

/// Weighted pooling over heights, scales and cameras for explicit per-cell
/// heights `[N_h, H, W]` and weights `[N_s * N_h, H, W]`.
pub fn pool(
    heights: &Tensor,
    weights: &Tensor,
    cameras: &[CameraModel],
    pyramids: &[FeaturePyramid],
    grid: &BevGrid,
    channels: usize,
) -> Tensor {
    let (n_h, rows, cols) = (heights.dim(0), grid.height(), grid.width());
    let n_s = weights.dim(0) / n_h;
    let mut out = Tensor::zeros(&[channels, rows, cols]);
    for v in 0..rows {
        for u in 0..cols {
            let x = grid.x_range[0] + (u as f64 + 0.5) * grid.cell_size_x();
            let y = grid.y_range[0] + (v as f64 + 0.5) * grid.cell_size_y();
            for i in 0..n_h {
                let z = heights.at3(i, v, u);
                for j in 0..n_s {
                    let wt = weights.at3(j * n_h + i, v, u);
                    for ch in 0..channels {
                        let mut sum = 0.0;
                        let mut n = 0;
                        for (cam, pyr) in cameras.iter().zip(pyramids) {
                            let Some((px, py)) = project(cam, [x, y, z]) else {
                                continue;
                            };
                            let level = &pyr.levels[j];
                            let s = level.stride as f64;
                            if let Some(val) = bilinear(&level.map, ch, px / s, py / s) {
                                sum += val;
                                n += 1;
                            }
                        }
                        if n > 0 {
                            let cur = out.at3(ch, v, u);
                            out.set3(ch, v, u, cur + wt * sum / n as f64);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adaptive sampling computed cell by cell, height by height, scale by scale
/// and camera by camera.
pub fn adaptive_sample(
    params: &AsapParams,
    lidar: &Tensor,
    cameras: &[CameraModel],
    pyramids: &[FeaturePyramid],
    grid: &BevGrid,
) -> Tensor {
    let (c, rows, cols) = (lidar.dim(0), grid.height(), grid.width());
    let n_h = params.n_heights;
    let n_w = params.n_scales * n_h;
    let mut heights = Tensor::zeros(&[n_h, rows, cols]);
    let mut weights = Tensor::zeros(&[n_w, rows, cols]);
    let z_mid = 0.5 * (grid.z_range[0] + grid.z_range[1]);
    let z_half = 0.5 * (grid.z_range[1] - grid.z_range[0]);
    for v in 0..rows {
        for u in 0..cols {
            let feat: Vec<f64> = (0..c).map(|ch| lidar.at3(ch, v, u)).collect();
            for (i, r) in linear(&params.height_gen, &feat).iter().enumerate() {
                heights.set3(i, v, u, z_mid + r.tanh() * z_half);
            }
            for (k, w) in softmax(&linear(&params.weight_gen, &feat)).iter().enumerate() {
                weights.set3(k, v, u, *w);
            }
        }
    }
    pool(&heights, &weights, cameras, pyramids, grid, c)
}

/// Fixed heights with uniform weights.
pub fn vanilla(
    fixed: &[f64],
    n_scales: usize,
    cameras: &[CameraModel],
    pyramids: &[FeaturePyramid],
    grid: &BevGrid,
    channels: usize,
) -> Tensor {
    let (rows, cols) = (grid.height(), grid.width());
    let n_h = fixed.len();
    let heights = Tensor::from_fn(&[n_h, rows, cols], |idx| fixed[idx / (rows * cols)]);
    let weights = Tensor::full(&[n_scales * n_h, rows, cols], 1.0 / (n_scales * n_h) as f64);
    pool(&heights, &weights, cameras, pyramids, grid, channels)
}

/// Top-k by sorting every cell once and walking the order twice: first
/// taking cells no neighbour exceeds, then any remaining cells.
pub fn topk(heatmaps: &Tensor, spec: &GroupSpec) -> Vec<GroupKeypoints> {
    let (rows, cols) = (heatmaps.dim(1), heatmaps.dim(2));
    spec.groups
        .iter()
        .enumerate()
        .map(|(g, classes)| {
            let score = |r: usize, c: usize| {
                classes
                    .iter()
                    .map(|&k| heatmaps.at3(k, r, c))
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let mut cells: Vec<(f64, usize)> = (0..rows * cols).map(|i| (score(i / cols, i % cols), i)).collect();
            cells.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let peak = |i: usize| {
                let (r, c) = ((i / cols) as i64, (i % cols) as i64);
                let s = score(r as usize, c as usize);
                (-1..=1).all(|dr| {
                    (-1..=1).all(|dc| {
                        let (nr, nc) = (r + dr, c + dc);
                        nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 || score(nr as usize, nc as usize) <= s
                    })
                })
            };
            let mut chosen: Vec<(f64, usize)> = cells.iter().copied().filter(|(_, i)| peak(*i)).collect();
            chosen.truncate(spec.queries_per_group);
            for cell in cells.iter().filter(|(_, i)| !peak(*i)) {
                if chosen.len() == spec.queries_per_group {
                    break;
                }
                chosen.push(*cell);
            }
            GroupKeypoints {
                group: g,
                points: chosen
                    .into_iter()
                    .map(|(s, i)| Keypoint {
                        u: i % cols,
                        v: i / cols,
                        score: s,
                    })
                    .collect(),
            }
        })
        .collect()
}

/// A random small adaptive-sampling problem.
#[derive(Clone, Debug)]
pub struct SamplingInstance {
    pub params: AsapParams,
    pub lidar: Tensor,
    pub cameras: Vec<CameraModel>,
    pub pyramids: Vec<FeaturePyramid>,
    pub grid: BevGrid,
}

impl SamplingInstance {
    /// Up to 8 channels, a grid of at most 16×16, at most 2 scales and 4
    /// heights, two cameras facing random directions.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(1..=8);
        let n = rng.random_range(2..=16);
        let n_s = rng.random_range(1..=2);
        let n_h = rng.random_range(1..=4);
        let half = rng.random_range(4.0..20.0);
        let grid = BevGrid::square(half, n);
        let image = (rng.random_range(12..=40), rng.random_range(8..=30));
        let cameras: Vec<CameraModel> = (0..2)
            .map(|_| {
                let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let pos = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..1.5)];
                CameraModel::looking_along(yaw, pos, rng.random_range(6.0..20.0), image).expect("valid camera")
            })
            .collect();
        let strides = [1usize, 2];
        let pyramids = cameras
            .iter()
            .map(|_| {
                let levels = strides[..n_s]
                    .iter()
                    .map(|&s| PyramidLevel {
                        stride: s,
                        map: Tensor::random_normal(&[c, image.1.div_ceil(s), image.0.div_ceil(s)], 1.0, &mut rng),
                    })
                    .collect();
                FeaturePyramid::new(levels).expect("valid pyramid")
            })
            .collect();
        let mut params = AsapParams::init(c, n_h, n_s, &mut rng);
        params.height_gen = LinearMap::random(n_h, c, 1.5, &mut rng);
        params.weight_gen = LinearMap::random(n_s * n_h, c, 2.0, &mut rng);
        let lidar = Tensor::random_normal(&[c, n, n], 1.0, &mut rng);
        Self {
            params,
            lidar,
            cameras,
            pyramids,
            grid,
        }
    }
}

/// A random `[K, H, W]` heatmap with plateaus, so ties are exercised.
pub fn random_heatmaps(seed: u64, classes: usize, rows: usize, cols: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = rng.random_range(3..12) as f64;
    Tensor::from_fn(&[classes, rows, cols], |_| (rng.random_range(0.0..1.0) * levels).floor() / levels)
}
