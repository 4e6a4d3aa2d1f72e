//! Seeded synthetic driving scenes.
//!
//! A scene is a set of non-overlapping boxes on a flat ground plane, seen by a
//! ring of cameras at the ego origin. Every box carries a feature signature
//! (a class prototype plus per-box jitter) that shows up in two places: on the
//! LiDAR BEV cells covered by its footprint, and as a Gaussian blob around the
//! projection of its centre in every camera's feature maps. Lifting camera
//! features into BEV at the wrong height smears a blob along the camera ray,
//! which [`ray_smear_metric`] measures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{BevGrid, CameraModel, FeaturePyramid, PyramidLevel};
use crate::labels::{Box3d, ObjectClass, N_CLASSES};
use crate::tensor::Tensor;

/// Ground plane height in the ego frame (metres).
pub const GROUND_Z: f64 = -1.8;
const MAX_ATTEMPTS: usize = 1000;
const PROTOTYPE_SEED: u64 = 0x5EED_C1A5;
const SIGNATURE_JITTER: f64 = 0.3;
const GAP: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_boxes: usize,
    /// Classes assigned round-robin; empty means all classes.
    pub classes: Vec<ObjectClass>,
    /// Boxes with `l / w` below this are stretched along their length.
    pub min_aspect: f64,
    pub yaw_range: [f64; 2],
    /// Minimum distance of a box centre from the ego origin (metres).
    pub min_range: f64,
    /// Keep box centres at least this far inside the grid edge (metres).
    pub edge_margin: f64,
    /// Standard deviation of background LiDAR noise.
    pub noise_std: f64,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
    pub focal: f64,
    pub camera_height: f64,
    pub n_cameras: usize,
    pub strides: Vec<usize>,
    /// Blob size in pixels at stride 1.
    pub splat_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_boxes: 8,
            classes: Vec::new(),
            min_aspect: 0.0,
            yaw_range: [-std::f64::consts::PI, std::f64::consts::PI],
            min_range: 4.0,
            edge_margin: 4.0,
            noise_std: 0.05,
            image_size: (64, 40),
            focal: 32.0,
            camera_height: 0.0,
            n_cameras: 6,
            strides: vec![1, 2],
            splat_sigma: 2.0,
        }
    }
}

impl SceneConfig {
    /// Long vehicles only (`l / w >= 3`), headings in `[-π/2, π/2)`.
    pub fn elongated() -> Self {
        Self {
            classes: vec![ObjectClass::Bus, ObjectClass::Trailer],
            min_aspect: 3.0,
            yaw_range: [-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cameras == 0 {
            return Err(invalid("need at least one camera"));
        }
        if !(self.focal > 0.0) || self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(invalid("camera focal length and image size must be positive"));
        }
        if self.strides.is_empty() {
            return Err(invalid("need at least one pyramid stride"));
        }
        if !(self.yaw_range[1] > self.yaw_range[0]) {
            return Err(invalid("empty yaw range"));
        }
        if !(self.noise_std >= 0.0) || !(self.splat_sigma > 0.0) {
            return Err(invalid("noise and blob size must be non-negative and positive"));
        }
        Ok(())
    }

    fn classes(&self) -> Vec<ObjectClass> {
        if self.classes.is_empty() {
            ObjectClass::ALL.to_vec()
        } else {
            self.classes.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub grid: BevGrid,
    pub channels: usize,
    pub boxes: Vec<Box3d>,
    /// Unit-norm signature per box, `channels - 2` values.
    pub signatures: Vec<Vec<f64>>,
    pub cameras: Vec<CameraModel>,
    pub config: SceneConfig,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

/// Fixed per-class prototype directions.
fn prototypes(dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROTOTYPE_SEED);
    (0..N_CLASSES)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
            normalize(&mut v);
            v
        })
        .collect()
}

/// Separating-axis test on two convex quadrilaterals.
fn overlaps(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> bool {
    for poly in [a, b] {
        for i in 0..4 {
            let p = poly[i];
            let q = poly[(i + 1) % 4];
            let axis = [q[1] - p[1], p[0] - q[0]];
            let proj = |pts: &[[f64; 2]; 4]| {
                pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    let d = v[0] * axis[0] + v[1] * axis[1];
                    (lo.min(d), hi.max(d))
                })
            };
            let (a0, a1) = proj(a);
            let (b0, b1) = proj(b);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
    }
    true
}

fn inflated(b: &Box3d) -> [[f64; 2]; 4] {
    let mut big = *b;
    big.size[0] += GAP;
    big.size[1] += GAP;
    big.footprint()
}

/// Builds the camera ring: evenly spaced headings starting along +X.
pub fn camera_ring(cfg: &SceneConfig) -> Result<Vec<CameraModel>> {
    (0..cfg.n_cameras)
        .map(|k| {
            let yaw = std::f64::consts::TAU * k as f64 / cfg.n_cameras as f64;
            CameraModel::looking_along(yaw, [0.0, 0.0, cfg.camera_height], cfg.focal, cfg.image_size)
        })
        .collect()
}

/// Generates a scene. Fails if the boxes cannot be placed without overlap.
pub fn make_scene(seed: u64, cfg: &SceneConfig, grid: &BevGrid, channels: usize) -> Result<Scene> {
    cfg.validate()?;
    grid.validate()?;
    if channels < 3 {
        return Err(invalid(format!("scenes need at least 3 channels, got {channels}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = cfg.classes();
    let protos = prototypes(channels - 2);
    let lo = [grid.x_range[0] + cfg.edge_margin, grid.y_range[0] + cfg.edge_margin];
    let hi = [grid.x_range[1] - cfg.edge_margin, grid.y_range[1] - cfg.edge_margin];
    if !(hi[0] > lo[0] && hi[1] > lo[1]) {
        return Err(invalid("edge margin leaves no room for boxes"));
    }
    let mut boxes: Vec<Box3d> = Vec::with_capacity(cfg.n_boxes);
    let mut signatures = Vec::with_capacity(cfg.n_boxes);
    let mut attempts = 0;
    while boxes.len() < cfg.n_boxes {
        let class = classes[boxes.len() % classes.len()];
        let base = class.mean_size();
        let mut size = base.map(|s| s * rng.random_range(0.9..1.1));
        if size[0] < cfg.min_aspect * size[1] {
            size[0] = cfg.min_aspect * size[1];
        }
        let x = rng.random_range(lo[0]..hi[0]);
        let y = rng.random_range(lo[1]..hi[1]);
        let yaw = rng.random_range(cfg.yaw_range[0]..cfg.yaw_range[1]);
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Placement {
                requested: cfg.n_boxes,
                placed: boxes.len(),
                attempts: MAX_ATTEMPTS,
            });
        }
        if x.hypot(y) < cfg.min_range {
            continue;
        }
        let cand = Box3d::new(class, [x, y, GROUND_Z + size[2] / 2.0], size, yaw)?;
        let fp = inflated(&cand);
        if boxes.iter().any(|b| overlaps(&fp, &inflated(b))) {
            continue;
        }
        let mut sig: Vec<f64> = protos[class.index()]
            .iter()
            .map(|p| p + SIGNATURE_JITTER * normal(&mut rng))
            .collect();
        normalize(&mut sig);
        boxes.push(cand);
        signatures.push(sig);
    }
    Ok(Scene {
        seed,
        grid: grid.clone(),
        channels,
        boxes,
        signatures,
        cameras: camera_ring(cfg)?,
        config: cfg.clone(),
    })
}

/// Cells whose centres fall inside the box footprint; the nearest cell to the
/// centre when the box is smaller than a cell. Empty if the box is off-grid.
pub fn footprint_cells(b: &Box3d, grid: &BevGrid) -> Vec<(usize, usize)> {
    let fp = b.footprint();
    let (xs, ys): (Vec<f64>, Vec<f64>) = fp.iter().map(|p| (p[0], p[1])).unzip();
    let (u0, v0) = grid.world_to_cell(
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        ys.iter().cloned().fold(f64::INFINITY, f64::min),
    );
    let (u1, v1) = grid.world_to_cell(
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let clamp = |t: f64, n: usize| t.max(0.0).min((n - 1) as f64);
    let (w, h) = (grid.width(), grid.height());
    let mut cells = Vec::new();
    if u1 >= 0.0 && v1 >= 0.0 && u0 <= (w - 1) as f64 && v0 <= (h - 1) as f64 {
        for v in clamp(v0.floor(), h) as usize..=clamp(v1.ceil(), h) as usize {
            for u in clamp(u0.floor(), w) as usize..=clamp(u1.ceil(), w) as usize {
                let (x, y) = grid.cell_center(u, v);
                if b.contains_xy(x, y) {
                    cells.push((u, v));
                }
            }
        }
    }
    if cells.is_empty() {
        if let Some(c) = grid.nearest_cell(b.center[0], b.center[1]) {
            cells.push(c);
        }
    }
    cells
}

/// LiDAR BEV `[C, H, W]`: footprint cells hold the box signature in the first
/// `C - 2` channels, the box centre height in channel `C - 2` and occupancy 1
/// in channel `C - 1`; background cells hold Gaussian noise in the signature
/// channels only.
pub fn rasterize_lidar_bev(scene: &Scene) -> Tensor {
    let grid = &scene.grid;
    let (c, h, w) = (scene.channels, grid.height(), grid.width());
    let mut bev = Tensor::zeros(&[c, h, w]);
    let mut occupied = vec![false; h * w];
    for (b, sig) in scene.boxes.iter().zip(&scene.signatures) {
        let mut cell = sig.clone();
        cell.push(b.center[2]);
        cell.push(1.0);
        for (u, v) in footprint_cells(b, grid) {
            bev.set_cell(v, u, &cell);
            occupied[v * w + u] = true;
        }
    }
    if scene.config.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x11DA_4000_0000_0001);
        for (idx, occ) in occupied.iter().enumerate() {
            if *occ {
                continue;
            }
            for ch in 0..c - 2 {
                bev.data_mut()[ch * h * w + idx] = scene.config.noise_std * normal(&mut rng);
            }
        }
    }
    bev
}

/// Per-camera feature pyramids with a Gaussian blob of each visible box's
/// signature centred on the projection of the box centre.
pub fn render_camera_features(scene: &Scene) -> Result<Vec<FeaturePyramid>> {
    let cfg = &scene.config;
    let c = scene.channels;
    scene
        .cameras
        .iter()
        .map(|cam| {
            let levels = cfg
                .strides
                .iter()
                .map(|&s| {
                    let fw = cfg.image_size.0.div_ceil(s);
                    let fh = cfg.image_size.1.div_ceil(s);
                    let mut map = Tensor::zeros(&[c, fh, fw]);
                    let sigma = cfg.splat_sigma / s as f64;
                    let reach = (4.0 * sigma).ceil() as i64;
                    for (b, sig) in scene.boxes.iter().zip(&scene.signatures) {
                        let p = cam.project(b.center);
                        if !(p.depth > crate::geometry::NEAR_PLANE) {
                            continue;
                        }
                        let (px, py) = (p.x / s as f64, p.y / s as f64);
                        let (cx, cy) = (px.round() as i64, py.round() as i64);
                        for y in (cy - reach).max(0)..=(cy + reach).min(fh as i64 - 1) {
                            for x in (cx - reach).max(0)..=(cx + reach).min(fw as i64 - 1) {
                                let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                                let a = (-d2 / (2.0 * sigma * sigma)).exp();
                                for (ch, sv) in sig.iter().enumerate() {
                                    let i = (ch * fh + y as usize) * fw + x as usize;
                                    map.data_mut()[i] += a * sv;
                                }
                            }
                        }
                    }
                    PyramidLevel { stride: s, map }
                })
                .collect();
            FeaturePyramid::new(levels)
        })
        .collect()
}

/// Fraction of camera-BEV feature energy (sum of squares over channels) that
/// lies within one cell (Chebyshev) of some box footprint. Higher means less
/// smearing along camera rays.
pub fn ray_smear_metric(bev_camera: &Tensor, scene: &Scene) -> Result<f64> {
    if scene.boxes.is_empty() {
        return Err(Error::Empty("scene has no boxes"));
    }
    let (c, h, w) = bev_camera.chw()?;
    let mut near = vec![false; h * w];
    for b in &scene.boxes {
        for (u, v) in footprint_cells(b, &scene.grid) {
            for vv in v.saturating_sub(1)..=(v + 1).min(h - 1) {
                for uu in u.saturating_sub(1)..=(u + 1).min(w - 1) {
                    near[vv * w + uu] = true;
                }
            }
        }
    }
    let plane = h * w;
    let data = bev_camera.data();
    let (mut inside, mut total) = (0.0, 0.0);
    for (idx, is_near) in near.iter().enumerate() {
        let e: f64 = (0..c).map(|ch| data[ch * plane + idx].powi(2)).sum();
        total += e;
        if *is_near {
            inside += e;
        }
    }
    if total == 0.0 {
        return Err(Error::Empty("camera BEV carries no energy"));
    }
    Ok(inside / total)
}
