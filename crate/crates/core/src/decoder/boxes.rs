//! Box parameterisation shared by the decoder heads and the box loss.
//!
//! The regression head emits `[Δu, Δv, z, ln l, ln w, ln h, sin θ, cos θ]`.
//! Centres live in BEV cell coordinates relative to the query's reference
//! point; `z` and sizes are metres.

use serde::Serialize;

use crate::geometry::BevGrid;
use crate::labels::{Box3d, ObjectClass};

pub const BOX_DIM: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct BoxState {
    /// `(u, v)` in cells.
    pub center: [f64; 2],
    pub z: f64,
    /// Length, metres.
    pub l: f64,
    /// Width, metres.
    pub w: f64,
    /// Height, metres.
    pub h: f64,
    pub theta: f64,
}

impl BoxState {
    /// A degenerate box at `center`: what queries carry before the first
    /// decode.
    pub fn point(center: [f64; 2]) -> Self {
        Self {
            center,
            ..Self::default()
        }
    }

    pub fn to_world(&self, grid: &BevGrid, class: ObjectClass) -> Box3d {
        let x = grid.x_range[0] + (self.center[0] + 0.5) * grid.cell_size_x();
        let y = grid.y_range[0] + (self.center[1] + 0.5) * grid.cell_size_y();
        Box3d {
            class,
            center: [x, y, self.z],
            size: [self.l, self.w, self.h],
            yaw: self.theta,
        }
    }
}

/// `θ = atan2(s, c)`, with a zero vector mapping to 0.
pub fn heading(s: f64, c: f64) -> f64 {
    if s == 0.0 && c == 0.0 {
        0.0
    } else {
        s.atan2(c)
    }
}

pub fn decode_box(reg: &[f64], ref_point: [f64; 2]) -> BoxState {
    BoxState {
        center: [ref_point[0] + reg[0], ref_point[1] + reg[1]],
        z: reg[2],
        l: reg[3].exp(),
        w: reg[4].exp(),
        h: reg[5].exp(),
        theta: heading(reg[6], reg[7]),
    }
}

/// Regression target for a ground-truth box seen from `ref_point`.
pub fn encode_box(b: &Box3d, ref_point: [f64; 2], grid: &BevGrid) -> [f64; BOX_DIM] {
    let (u, v) = grid.world_to_cell(b.center[0], b.center[1]);
    [
        u - ref_point[0],
        v - ref_point[1],
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

/// Gradient with respect to the box fields the sampling offsets depend on.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoxGrad {
    pub center: [f64; 2],
    pub l: f64,
    pub w: f64,
    pub theta: f64,
}

impl BoxGrad {
    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }
}

/// Chains a [`BoxGrad`] back to the regression outputs.
pub fn decode_box_backward(reg: &[f64], g: &BoxGrad) -> [f64; BOX_DIM] {
    let mut d = [0.0; BOX_DIM];
    d[0] = g.center[0];
    d[1] = g.center[1];
    d[3] = g.l * reg[3].exp();
    d[4] = g.w * reg[4].exp();
    let (s, c) = (reg[6], reg[7]);
    let n2 = s * s + c * c;
    if n2 > 0.0 {
        d[6] = g.theta * c / n2;
        d[7] = -g.theta * s / n2;
    }
    d
}
