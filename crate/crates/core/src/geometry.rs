//! Pinhole cameras, the BEV grid, and multi-scale image feature pyramids.
//!
//! World frame: X forward, Y left, Z up (metres). Camera frame: x right,
//! y down, z along the optical axis. BEV cell `(u, v)` is column `u` (along X)
//! and row `v` (along Y) of a `[C, H, W]` map.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Points closer than this to the image plane are treated as not visible.
pub const NEAR_PLANE: f64 = 0.1;

pub type Point3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation (metres).
    pub translation: Point3,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

/// Pixel coordinates of a projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    pub valid: bool,
}

impl CameraModel {
    pub fn new(
        intrinsics: [f64; 4],
        rotation: Mat3,
        translation: Point3,
        image_size: (usize, usize),
    ) -> Result<Self> {
        let [fx, fy, cx, cy] = intrinsics;
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            image_size,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(invalid(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(invalid("image size must be positive"));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot - target).abs() >= 1e-9 {
                    return Err(invalid("rotation is not orthonormal"));
                }
            }
        }
        Ok(())
    }

    /// Horizontal camera at `position` looking along world yaw `yaw`
    /// (radians from +X towards +Y), principal point at the image centre.
    pub fn looking_along(
        yaw: f64,
        position: Point3,
        focal: f64,
        image_size: (usize, usize),
    ) -> Result<Self> {
        let (s, c) = yaw.sin_cos();
        // rows: camera x (right), y (down), z (forward) in world coordinates
        let rotation = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
        let translation = neg(mat_vec(&rotation, &position));
        Self::new(
            [
                focal,
                focal,
                (image_size.0 as f64 - 1.0) / 2.0,
                (image_size.1 as f64 - 1.0) / 2.0,
            ],
            rotation,
            translation,
            image_size,
        )
    }

    pub fn to_camera(&self, p: Point3) -> Point3 {
        add(mat_vec(&self.rotation, &p), self.translation)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Point3 {
        neg(mat_t_vec(&self.rotation, &self.translation))
    }

    pub fn project(&self, p: Point3) -> Projection {
        let pc = self.to_camera(p);
        self.project_camera_point(pc)
    }

    fn project_camera_point(&self, pc: Point3) -> Projection {
        let depth = pc[2];
        if !(depth > NEAR_PLANE) {
            return Projection {
                x: 0.0,
                y: 0.0,
                depth,
                valid: false,
            };
        }
        let x = self.fx * pc[0] / depth + self.cx;
        let y = self.fy * pc[1] / depth + self.cy;
        let (w, h) = self.image_size;
        let valid = x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64;
        Projection { x, y, depth, valid }
    }

    /// Projection plus `d(x, y) / d(world point)`. The Jacobian is only
    /// meaningful in front of the near plane.
    pub fn project_with_jacobian(&self, p: Point3) -> (Projection, [[f64; 3]; 2]) {
        let pc = self.to_camera(p);
        let proj = self.project_camera_point(pc);
        let mut jac = [[0.0; 3]; 2];
        if pc[2] > NEAR_PLANE {
            let iz = 1.0 / pc[2];
            let dx_dpc = [self.fx * iz, 0.0, -self.fx * pc[0] * iz * iz];
            let dy_dpc = [0.0, self.fy * iz, -self.fy * pc[1] * iz * iz];
            for k in 0..3 {
                jac[0][k] = (0..3).map(|m| dx_dpc[m] * self.rotation[m][k]).sum();
                jac[1][k] = (0..3).map(|m| dy_dpc[m] * self.rotation[m][k]).sum();
            }
        }
        (proj, jac)
    }

    /// Applies a world-frame rigid motion `(R, t)` to the camera rig, so that
    /// a point moved by the same motion projects to the same pixel.
    pub fn moved(&self, r: &Mat3, t: Point3) -> Self {
        // new world->cam: p' = R p + t  =>  p = Rᵀ(p' - t)
        let rt = transpose(r);
        let rotation = mat_mul(&self.rotation, &rt);
        let translation = add(self.translation, neg(mat_vec(&rotation, &t)));
        Self {
            rotation,
            translation,
            ..self.clone()
        }
    }
}

pub fn project_to_image(cam: &CameraModel, p: Point3) -> Projection {
    cam.project(p)
}

/// Pixel coordinates scaled to a pyramid level with the given stride.
pub fn to_feature_level(px: (f64, f64), stride: usize) -> (f64, f64) {
    let s = stride as f64;
    (px.0 / s, px.1 / s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevGrid {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    /// `[H, W]`.
    pub cells: [usize; 2],
}

impl Default for BevGrid {
    fn default() -> Self {
        Self {
            x_range: [-54.0, 54.0],
            y_range: [-54.0, 54.0],
            z_range: [-5.0, 3.0],
            cells: [180, 180],
        }
    }
}

impl BevGrid {
    pub fn new(x_range: [f64; 2], y_range: [f64; 2], z_range: [f64; 2], cells: [usize; 2]) -> Result<Self> {
        let g = Self {
            x_range,
            y_range,
            z_range,
            cells,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn square(half_extent: f64, n: usize) -> Self {
        Self {
            x_range: [-half_extent, half_extent],
            y_range: [-half_extent, half_extent],
            z_range: [-5.0, 3.0],
            cells: [n, n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("x", self.x_range), ("y", self.y_range), ("z", self.z_range)] {
            if !(r[1] > r[0]) {
                return Err(invalid(format!("{name}_range must have max > min, got {r:?}")));
            }
        }
        if self.cells[0] == 0 || self.cells[1] == 0 {
            return Err(invalid("grid must have at least one cell per axis"));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.cells[0]
    }

    pub fn width(&self) -> usize {
        self.cells[1]
    }

    pub fn n_cells(&self) -> usize {
        self.cells[0] * self.cells[1]
    }

    pub fn cell_size_x(&self) -> f64 {
        (self.x_range[1] - self.x_range[0]) / self.width() as f64
    }

    pub fn cell_size_y(&self) -> f64 {
        (self.y_range[1] - self.y_range[0]) / self.height() as f64
    }

    pub fn z_mid(&self) -> f64 {
        0.5 * (self.z_range[0] + self.z_range[1])
    }

    pub fn z_half(&self) -> f64 {
        0.5 * (self.z_range[1] - self.z_range[0])
    }

    /// Metric centre of cell `(u, v)`.
    pub fn cell_to_world(&self, u: usize, v: usize) -> Result<(f64, f64)> {
        if u >= self.width() || v >= self.height() {
            return Err(Error::OutOfRange(format!(
                "cell ({u}, {v}) outside {}x{} grid",
                self.width(),
                self.height()
            )));
        }
        Ok(self.cell_center(u, v))
    }

    pub(crate) fn cell_center(&self, u: usize, v: usize) -> (f64, f64) {
        (
            self.x_range[0] + (u as f64 + 0.5) * self.cell_size_x(),
            self.y_range[0] + (v as f64 + 0.5) * self.cell_size_y(),
        )
    }

    /// Continuous cell coordinates; may fall outside the grid.
    pub fn world_to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.x_range[0]) / self.cell_size_x() - 0.5,
            (y - self.y_range[0]) / self.cell_size_y() - 0.5,
        )
    }

    /// Index of the cell whose centre is nearest to a world point, if inside.
    pub fn nearest_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (u, v) = self.world_to_cell(x, y);
        let (ur, vr) = (u.round(), v.round());
        if ur < 0.0 || vr < 0.0 || ur >= self.width() as f64 || vr >= self.height() as f64 {
            return None;
        }
        Some((ur as usize, vr as usize))
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.x_range[0] && x <= self.x_range[1] && y >= self.y_range[0] && y <= self.y_range[1]
    }
}

/// One pyramid level: feature map `[C, H_j, W_j]` at downsampling stride `S_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub stride: usize,
    pub map: Tensor,
}

/// Multi-scale perspective-view features of one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<PyramidLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Empty("feature pyramid"));
        }
        let c = levels[0].map.dim(0);
        for pair in levels.windows(2) {
            if pair[1].stride <= pair[0].stride {
                return Err(invalid("pyramid strides must be strictly increasing"));
            }
        }
        for l in &levels {
            l.map.chw()?;
            if l.stride == 0 {
                return Err(invalid("stride must be at least 1"));
            }
            if l.map.dim(0) != c {
                return Err(invalid("pyramid levels disagree on channel count"));
            }
        }
        Ok(Self { levels })
    }

    /// Zero maps sized `ceil(image / stride)` for each stride.
    pub fn zeros(image_size: (usize, usize), strides: &[usize], channels: usize) -> Result<Self> {
        Self::new(
            strides
                .iter()
                .map(|&s| PyramidLevel {
                    stride: s,
                    map: Tensor::zeros(&[
                        channels,
                        image_size.1.div_ceil(s.max(1)),
                        image_size.0.div_ceil(s.max(1)),
                    ]),
                })
                .collect(),
        )
    }

    pub fn channels(&self) -> usize {
        self.levels[0].map.dim(0)
    }

    pub fn strides(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.stride).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            levels: self
                .levels
                .iter()
                .map(|l| PyramidLevel {
                    stride: l.stride,
                    map: Tensor::zeros(l.map.shape()),
                })
                .collect(),
        }
    }
}

pub(crate) fn mat_vec(m: &Mat3, v: &Point3) -> Point3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_t_vec(m: &Mat3, v: &Point3) -> Point3 {
    mat_vec(&transpose(m), v)
}

pub(crate) fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn neg(a: Point3) -> Point3 {
    [-a[0], -a[1], -a[2]]
}

/// Rotation from Z-Y-X Euler angles (yaw about Z, pitch about Y, roll about X).
pub fn rotation_zyx(yaw: f64, pitch: f64, roll: f64) -> Mat3 {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let rz = [[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]];
    let ry = [[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    fn test_camera() -> CameraModel {
        CameraModel::new([100.0, 100.0, 50.0, 50.0], IDENTITY, [0.0; 3], (101, 101)).unwrap()
    }

    #[test]
    fn projection_examples() {
        let cam = test_camera();
        let p = cam.project([0.0, 0.0, 10.0]);
        assert!(p.valid);
        assert_eq!((p.x, p.y), (50.0, 50.0));
        let p = cam.project([1.0, 0.0, 10.0]);
        assert!(p.valid);
        assert!((p.x - 60.0).abs() < 1e-12 && (p.y - 50.0).abs() < 1e-12);
        assert!(!cam.project([0.0, 0.0, -5.0]).valid);
        assert!(!cam.project([0.0, 0.0, 0.05]).valid);
        assert!(!cam.project([100.0, 0.0, 10.0]).valid);
    }

    #[test]
    fn camera_validation() {
        assert!(CameraModel::new([0.0, 1.0, 0.0, 0.0], IDENTITY, [0.0; 3], (4, 4)).is_err());
        let skewed = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraModel::new([1.0, 1.0, 0.0, 0.0], skewed, [0.0; 3], (4, 4)).is_err());
        assert!(CameraModel::new([1.0, 1.0, 0.0, 0.0], IDENTITY, [0.0; 3], (0, 4)).is_err());
    }

    #[test]
    fn looking_along_sees_forward() {
        let cam = CameraModel::looking_along(0.0, [0.0, 0.0, 0.0], 40.0, (65, 41)).unwrap();
        let p = cam.project([10.0, 0.0, 0.0]);
        assert!(p.valid);
        assert!((p.x - 32.0).abs() < 1e-12 && (p.y - 20.0).abs() < 1e-12);
        // +Y is to the left, so it appears at smaller x
        assert!(cam.project([10.0, 1.0, 0.0]).x < 32.0);
        // +Z is up, so it appears at smaller y
        assert!(cam.project([10.0, 0.0, 1.0]).y < 20.0);
        assert!(!cam.project([-10.0, 0.0, 0.0]).valid);
        let side = CameraModel::looking_along(std::f64::consts::FRAC_PI_2, [1.0, 2.0, 0.5], 40.0, (65, 41)).unwrap();
        let c = side.center();
        assert!((c[0] - 1.0).abs() < 1e-12 && (c[1] - 2.0).abs() < 1e-12 && (c[2] - 0.5).abs() < 1e-12);
        assert!(side.project([1.0, 12.0, 0.5]).valid);
    }

    #[test]
    fn feature_level_scaling() {
        assert_eq!(to_feature_level((64.0, 32.0), 8), (8.0, 4.0));
        assert_eq!(to_feature_level((3.5, -2.0), 1), (3.5, -2.0));
        assert_eq!(to_feature_level((60.0, 50.0), 4), (15.0, 12.5));
    }

    #[test]
    fn grid_examples() {
        let g = BevGrid::default();
        let (x, y) = g.cell_to_world(90, 90).unwrap();
        assert!((x - 0.3).abs() < 1e-12 && (y - 0.3).abs() < 1e-12);
        let (x, y) = g.cell_to_world(0, 0).unwrap();
        assert!((x + 53.7).abs() < 1e-12 && (y + 53.7).abs() < 1e-12);
        let (u, v) = g.world_to_cell(0.3, 0.3);
        assert!((u - 90.0).abs() < 1e-12 && (v - 90.0).abs() < 1e-12);
        let (u, _) = g.world_to_cell(-54.0, 0.0);
        assert!((u + 0.5).abs() < 1e-12);
        assert!(g.cell_to_world(180, 0).is_err());
        assert!(BevGrid::new([1.0, 1.0], [0.0, 1.0], [0.0, 1.0], [2, 2]).is_err());
        assert!(BevGrid::new([0.0, 1.0], [0.0, 1.0], [0.0, 1.0], [0, 2]).is_err());
    }

    #[test]
    fn grid_round_trip_all_cells() {
        let g = BevGrid::default();
        for v in 0..g.height() {
            for u in 0..g.width() {
                let (x, y) = g.cell_to_world(u, v).unwrap();
                let (uu, vv) = g.world_to_cell(x, y);
                assert!((uu - u as f64).abs() < 1e-12 && (vv - v as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pyramid_validation() {
        let p = FeaturePyramid::zeros((64, 40), &[1, 2, 4], 3).unwrap();
        assert_eq!(p.levels[2].map.shape(), &[3, 10, 16]);
        let bad = FeaturePyramid::new(vec![
            PyramidLevel { stride: 2, map: Tensor::zeros(&[1, 2, 2]) },
            PyramidLevel { stride: 2, map: Tensor::zeros(&[1, 1, 1]) },
        ]);
        assert!(bad.is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cam = CameraModel::new(
            [80.0, 90.0, 31.0, 22.0],
            rotation_zyx(0.3, -0.2, 0.1),
            [0.5, -0.3, 4.0],
            (64, 48),
        )
        .unwrap();
        let p = [0.4, 0.2, 3.0];
        let (_, jac) = cam.project_with_jacobian(p);
        let h = 1e-6;
        for k in 0..3 {
            let mut a = p;
            let mut b = p;
            a[k] += h;
            b[k] -= h;
            let (pa, pb) = (cam.project(a), cam.project(b));
            assert!(((pa.x - pb.x) / (2.0 * h) - jac[0][k]).abs() < 1e-5);
            assert!(((pa.y - pb.y) / (2.0 * h) - jac[1][k]).abs() < 1e-5);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn projection_is_invariant_under_shared_rigid_motion(
            yaw in -3.0f64..3.0, pitch in -1.0f64..1.0, roll in -1.0f64..1.0,
            t in prop::array::uniform3(-5.0f64..5.0),
            p in prop::array::uniform3(-2.0f64..2.0),
        ) {
            let cam = CameraModel::looking_along(0.0, [0.0, 0.0, 0.0], 50.0, (200, 200)).unwrap();
            let point = [p[0] + 8.0, p[1], p[2]];
            let r = rotation_zyx(yaw, pitch, roll);
            let moved_cam = cam.moved(&r, t);
            let moved_point = add(mat_vec(&r, &point), t);
            let a = cam.project(point);
            let b = moved_cam.project(moved_point);
            prop_assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
            prop_assert_eq!(a.valid, b.valid);
        }

        #[test]
        fn optical_axis_hits_principal_point(
            fx in 1.0f64..500.0, fy in 1.0f64..500.0, depth in 0.2f64..100.0,
        ) {
            let cam = CameraModel::new([fx, fy, 12.5, 7.5], IDENTITY, [0.0; 3], (26, 16)).unwrap();
            let p = cam.project([0.0, 0.0, depth]);
            prop_assert_eq!((p.x, p.y), (12.5, 7.5));
        }
    }
}
