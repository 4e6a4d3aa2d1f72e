//! Query-to-BEV cross-attention variants.
//!
//! The geometry-aware variant places sampling points around the four corners
//! of the query's current box estimate, samples the fused BEV there and mixes
//! the samples along channels and then along points with kernels generated
//! from the query. The deformable variants place points freely around the box
//! centre and pool them with softmax weights; the standard variant attends to
//! every BEV cell.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{KeyValues, Mha};
use super::boxes::{BoxGrad, BoxState};
use crate::error::{shape_err, Result};
use crate::ops::{
    bilinear_backward, bilinear_sample_into, encode_backward, encode_into, layer_norm_backward, layer_norm_with_stats,
    relu_backward, softmax_backward, softmax_in_place, LnStats,
};
use crate::tensor::{nest, nest_mut, LinearMap, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    GeometryAware,
    DeformableCenter,
    DeformableScaledRotated,
    Standard,
}

/// Corner sign pattern `(I_j, I'_j)` for point `i`, `j = i mod 4`.
pub const CORNER_SIGNS: [[f64; 2]; 4] = [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];

fn rotate(theta: f64, a: f64, b: f64) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * a - s * b, s * a + c * b]
}

/// Gradient of `d · R(θ)[a, b]` with respect to `(a, b, θ)`.
fn rotate_backward(theta: f64, a: f64, b: f64, d: [f64; 2]) -> (f64, f64, f64) {
    let (s, c) = theta.sin_cos();
    let da = c * d[0] + s * d[1];
    let db = -s * d[0] + c * d[1];
    let dt = d[0] * (-s * a - c * b) + d[1] * (c * a - s * b);
    (da, db, dt)
}

/// Corner-anchored sampling points in cell coordinates:
/// `center + R(θ) [I_j l/2 + Δx', I'_j w/2 + Δy']` with `l`, `w` in cells.
/// `raw` holds `(Δx', Δy')` pairs.
pub fn corner_offsets(raw: &[f64], b: &BoxState, cell_size: f64) -> Vec<[f64; 2]> {
    let (lc, wc) = (b.l / cell_size, b.w / cell_size);
    raw.chunks_exact(2)
        .enumerate()
        .map(|(i, d)| {
            let [si, sj] = CORNER_SIGNS[i % 4];
            let r = rotate(b.theta, si * lc / 2.0 + d[0], sj * wc / 2.0 + d[1]);
            [b.center[0] + r[0], b.center[1] + r[1]]
        })
        .collect()
}

pub fn corner_offsets_backward(
    raw: &[f64],
    b: &BoxState,
    cell_size: f64,
    d_points: &[[f64; 2]],
) -> (Vec<f64>, BoxGrad) {
    let (lc, wc) = (b.l / cell_size, b.w / cell_size);
    let mut d_raw = vec![0.0; raw.len()];
    let mut g = BoxGrad::default();
    for (i, (d, dp)) in raw.chunks_exact(2).zip(d_points).enumerate() {
        let [si, sj] = CORNER_SIGNS[i % 4];
        let (a, bb) = (si * lc / 2.0 + d[0], sj * wc / 2.0 + d[1]);
        let (da, db, dt) = rotate_backward(b.theta, a, bb, *dp);
        d_raw[2 * i] = da;
        d_raw[2 * i + 1] = db;
        g.center[0] += dp[0];
        g.center[1] += dp[1];
        g.l += da * si / (2.0 * cell_size);
        g.w += db * sj / (2.0 * cell_size);
        g.theta += dt;
    }
    (d_raw, g)
}

/// Points scattered around the box centre by raw offsets.
pub fn center_offsets(raw: &[f64], b: &BoxState) -> Vec<[f64; 2]> {
    raw.chunks_exact(2)
        .map(|d| [b.center[0] + d[0], b.center[1] + d[1]])
        .collect()
}

/// `center + R(θ) [Δx' (1 + l/2), Δy' (1 + w/2)]`, sizes in cells.
pub fn scaled_rotated_offsets(raw: &[f64], b: &BoxState, cell_size: f64) -> Vec<[f64; 2]> {
    let (lc, wc) = (b.l / cell_size, b.w / cell_size);
    raw.chunks_exact(2)
        .map(|d| {
            let r = rotate(b.theta, d[0] * (1.0 + lc / 2.0), d[1] * (1.0 + wc / 2.0));
            [b.center[0] + r[0], b.center[1] + r[1]]
        })
        .collect()
}

fn scaled_rotated_backward(raw: &[f64], b: &BoxState, cell_size: f64, d_points: &[[f64; 2]]) -> (Vec<f64>, BoxGrad) {
    let (lc, wc) = (b.l / cell_size, b.w / cell_size);
    let (kl, kw) = (1.0 + lc / 2.0, 1.0 + wc / 2.0);
    let mut d_raw = vec![0.0; raw.len()];
    let mut g = BoxGrad::default();
    for (i, (d, dp)) in raw.chunks_exact(2).zip(d_points).enumerate() {
        let (da, db, dt) = rotate_backward(b.theta, d[0] * kl, d[1] * kw, *dp);
        d_raw[2 * i] = da * kl;
        d_raw[2 * i + 1] = db * kw;
        g.center[0] += dp[0];
        g.center[1] += dp[1];
        g.l += da * d[0] / (2.0 * cell_size);
        g.w += db * d[1] / (2.0 * cell_size);
        g.theta += dt;
    }
    (d_raw, g)
}

fn center_backward(raw: &[f64], d_points: &[[f64; 2]]) -> (Vec<f64>, BoxGrad) {
    let mut g = BoxGrad::default();
    let mut d_raw = Vec::with_capacity(raw.len());
    for dp in d_points {
        d_raw.extend_from_slice(dp);
        g.center[0] += dp[0];
        g.center[1] += dp[1];
    }
    (d_raw, g)
}

/// The fused BEV as seen by one decoder layer.
pub struct BevView<'a> {
    pub bev: &'a Tensor,
    pub cell_size: f64,
    /// Keys/values over all cells, only for the standard variant.
    pub kv: Option<KeyValues>,
    /// Per-cell inputs the keys/values were projected from.
    pub kv_inputs: Option<Vec<Vec<f64>>>,
}

impl BevView<'_> {
    fn size(&self) -> (f64, f64) {
        (self.bev.dim(2) as f64, self.bev.dim(1) as f64)
    }
}

/// Gradient sinks for one layer's cross-attention.
pub struct BevGrads<'a> {
    pub d_bev: &'a mut Tensor,
    pub d_k: Vec<Vec<f64>>,
    pub d_v: Vec<Vec<f64>>,
}

fn sample_points(bev: &Tensor, points: &[[f64; 2]]) -> (Vec<Vec<f64>>, Vec<bool>) {
    let c = bev.dim(0);
    points
        .iter()
        .map(|p| {
            let mut s = vec![0.0; c];
            let ok = bilinear_sample_into(bev, p[0], p[1], &mut s);
            (s, ok)
        })
        .unzip()
}

fn sample_points_backward(bev: &Tensor, points: &[[f64; 2]], d_samples: &[Vec<f64>], d_bev: &mut Tensor) -> Vec<[f64; 2]> {
    points
        .iter()
        .zip(d_samples)
        .map(|(p, d)| {
            let (gx, gy) = bilinear_backward(bev, p[0], p[1], d, Some(&mut *d_bev));
            [gx, gy]
        })
        .collect()
}

/// Parameters of position-aware mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct MixParams {
    /// `[pe_dim -> C]`, projects sinusoidal point encodings.
    pub pos_proj: LinearMap,
    /// `[C -> C * C]`, channel-mixing kernel.
    pub channel_mix_gen: LinearMap,
    /// `[C -> N_p * N_p]`, point-mixing kernel.
    pub spatial_mix_gen: LinearMap,
    /// `[N_p * C -> C]`
    pub out_proj: LinearMap,
}

impl MixParams {
    pub fn new<R: Rng + ?Sized>(channels: usize, n_points: usize, pe_dim: usize, rng: &mut R) -> Self {
        Self {
            pos_proj: LinearMap::random(channels, pe_dim, 0.5, rng),
            channel_mix_gen: LinearMap::random(channels * channels, channels, 0.5 / (channels as f64).sqrt(), rng),
            spatial_mix_gen: LinearMap::random(n_points * n_points, channels, 0.5 / (n_points as f64).sqrt(), rng),
            out_proj: LinearMap::random(channels, n_points * channels, 0.5, rng),
        }
    }

    pub fn n_points(&self) -> usize {
        self.out_proj.in_dim() / self.channels()
    }

    pub fn channels(&self) -> usize {
        self.out_proj.out_dim()
    }
}

impl ParamSet for MixParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = nest("pos_proj", self.pos_proj.tensors());
        v.extend(nest("channel_mix_gen", self.channel_mix_gen.tensors()));
        v.extend(nest("spatial_mix_gen", self.spatial_mix_gen.tensors()));
        v.extend(nest("out_proj", self.out_proj.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = nest_mut("pos_proj", self.pos_proj.tensors_mut());
        v.extend(nest_mut("channel_mix_gen", self.channel_mix_gen.tensors_mut()));
        v.extend(nest_mut("spatial_mix_gen", self.spatial_mix_gen.tensors_mut()));
        v.extend(nest_mut("out_proj", self.out_proj.tensors_mut()));
        v
    }
}

struct MixTrace {
    pe: Vec<Vec<f64>>,
    /// `G = samples + e`, `N_p` rows of `C`.
    g: Vec<Vec<f64>>,
    wc: Vec<f64>,
    /// Row-normalised `G × W_c` and its stats.
    ln_a: Vec<Vec<f64>>,
    st_a: Vec<LnStats>,
    gc: Vec<Vec<f64>>,
    ws: Vec<f64>,
    /// Row-normalised `G_cᵀ × W_s` (`C` rows of `N_p`).
    ln_b: Vec<Vec<f64>>,
    st_b: Vec<LnStats>,
    flat: Vec<f64>,
}

fn mix_forward(mix: &MixParams, q: &[f64], samples: &[Vec<f64>], points: &[[f64; 2]], size: (f64, f64)) -> (Vec<f64>, MixTrace) {
    let c = mix.channels();
    let n_p = samples.len();
    let pe_dim = mix.pos_proj.in_dim();
    let mut pe = Vec::with_capacity(n_p);
    let mut g = Vec::with_capacity(n_p);
    for (s, p) in samples.iter().zip(points) {
        let mut e_in = vec![0.0; pe_dim];
        encode_into(p[0] / size.0, p[1] / size.1, &mut e_in);
        let e = mix.pos_proj.forward(&e_in);
        g.push(s.iter().zip(&e).map(|(a, b)| a + b).collect::<Vec<f64>>());
        pe.push(e_in);
    }
    let wc = mix.channel_mix_gen.forward(q);
    let mut ln_a = Vec::with_capacity(n_p);
    let mut st_a = Vec::with_capacity(n_p);
    let mut gc = Vec::with_capacity(n_p);
    for row in &g {
        let mut a = vec![0.0; c];
        for (ai, gi) in row.iter().enumerate() {
            for (o, w) in a.iter_mut().zip(&wc[ai * c..(ai + 1) * c]) {
                *o += gi * w;
            }
        }
        let (y, st) = layer_norm_with_stats(&a);
        gc.push(y.iter().map(|x| x.max(0.0)).collect::<Vec<f64>>());
        ln_a.push(y);
        st_a.push(st);
    }
    let ws = mix.spatial_mix_gen.forward(q);
    let mut ln_b = Vec::with_capacity(c);
    let mut st_b = Vec::with_capacity(c);
    let mut flat = vec![0.0; n_p * c];
    for ch in 0..c {
        let mut b = vec![0.0; n_p];
        for (i, row) in gc.iter().enumerate() {
            let gi = row[ch];
            if gi == 0.0 {
                continue;
            }
            for (o, w) in b.iter_mut().zip(&ws[i * n_p..(i + 1) * n_p]) {
                *o += gi * w;
            }
        }
        let (y, st) = layer_norm_with_stats(&b);
        for (k, yk) in y.iter().enumerate() {
            flat[k * c + ch] = yk.max(0.0);
        }
        ln_b.push(y);
        st_b.push(st);
    }
    let mut out = mix.out_proj.forward(&flat);
    for (o, qi) in out.iter_mut().zip(q) {
        *o += qi;
    }
    (
        out,
        MixTrace {
            pe,
            g,
            wc,
            ln_a,
            st_a,
            gc,
            ws,
            ln_b,
            st_b,
            flat,
        },
    )
}

/// Returns `(d q, d samples, d points)`.
fn mix_backward(
    mix: &MixParams,
    q: &[f64],
    samples: &[Vec<f64>],
    points: &[[f64; 2]],
    size: (f64, f64),
    d_out: &[f64],
    grads: &mut MixParams,
) -> (Vec<f64>, Vec<Vec<f64>>, Vec<[f64; 2]>) {
    let (_, t) = mix_forward(mix, q, samples, points, size);
    let c = mix.channels();
    let n_p = samples.len();
    let d_flat = mix.out_proj.backward(&t.flat, d_out, &mut grads.out_proj);
    let mut d_q = d_out.to_vec();

    let mut d_gc = vec![vec![0.0; c]; n_p];
    let mut d_ws = vec![0.0; n_p * n_p];
    for ch in 0..c {
        let relu_out: Vec<f64> = t.ln_b[ch].iter().map(|x| x.max(0.0)).collect();
        let d_relu: Vec<f64> = (0..n_p).map(|k| d_flat[k * c + ch]).collect();
        let d_y = relu_backward(&relu_out, &d_relu);
        let d_b = layer_norm_backward(&t.ln_b[ch], &t.st_b[ch], &d_y);
        for i in 0..n_p {
            let gi = t.gc[i][ch];
            let w_row = &t.ws[i * n_p..(i + 1) * n_p];
            let mut acc = 0.0;
            for k in 0..n_p {
                acc += d_b[k] * w_row[k];
                d_ws[i * n_p + k] += gi * d_b[k];
            }
            d_gc[i][ch] = acc;
        }
    }
    for (a, b) in d_q.iter_mut().zip(mix.spatial_mix_gen.backward(q, &d_ws, &mut grads.spatial_mix_gen)) {
        *a += b;
    }

    let mut d_wc = vec![0.0; c * c];
    let mut d_samples = Vec::with_capacity(n_p);
    let mut d_points = Vec::with_capacity(n_p);
    for i in 0..n_p {
        let d_y = relu_backward(&t.gc[i], &d_gc[i]);
        let d_a = layer_norm_backward(&t.ln_a[i], &t.st_a[i], &d_y);
        let mut d_g = vec![0.0; c];
        for (a, dg) in d_g.iter_mut().enumerate() {
            let w_row = &t.wc[a * c..(a + 1) * c];
            *dg = w_row.iter().zip(&d_a).map(|(w, d)| w * d).sum();
            let ga = t.g[i][a];
            for (dw, d) in d_wc[a * c..(a + 1) * c].iter_mut().zip(&d_a) {
                *dw += ga * d;
            }
        }
        let d_pe = mix.pos_proj.backward(&t.pe[i], &d_g, &mut grads.pos_proj);
        let (dx, dy) = encode_backward(points[i][0] / size.0, points[i][1] / size.1, &d_pe);
        d_points.push([dx / size.0, dy / size.1]);
        d_samples.push(d_g);
    }
    for (a, b) in d_q.iter_mut().zip(mix.channel_mix_gen.backward(q, &d_wc, &mut grads.channel_mix_gen)) {
        *a += b;
    }
    (d_q, d_samples, d_points)
}

/// Position-aware mixing of `N_p` sampled features for one query:
/// returns the updated query `q + out_proj(flatten(G_cs))`.
pub fn position_aware_mix(
    mix: &MixParams,
    q: &[f64],
    samples: &[Vec<f64>],
    points: &[[f64; 2]],
    bev_size: (usize, usize),
) -> Result<Vec<f64>> {
    let c = mix.channels();
    if q.len() != c || samples.len() != mix.n_points() || points.len() != samples.len() {
        return Err(shape_err("query, samples or points do not match the mixing parameters"));
    }
    if samples.iter().any(|s| s.len() != c) {
        return Err(shape_err(format!("sampled features must have {c} channels")));
    }
    Ok(mix_forward(mix, q, samples, points, (bev_size.0 as f64, bev_size.1 as f64)).0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryCross {
    /// `[C -> 2 N_p]`
    pub offset_gen: LinearMap,
    pub mix: MixParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformableCross {
    pub n_heads: usize,
    /// Whether offsets are scaled by the box size and rotated by its heading.
    pub scaled: bool,
    pub offset_gen: LinearMap,
    /// `[C -> N_p]`, softmax-normalised within each head's points.
    pub attn_gen: LinearMap,
    pub value_proj: LinearMap,
    pub out_proj: LinearMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StandardCross {
    pub attn: Mha,
    /// `[pe_dim -> C]`
    pub pos_proj: LinearMap,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CrossAttention {
    Geometry(GeometryCross),
    Deformable(DeformableCross),
    Standard(StandardCross),
}

/// Shapes shared by all cross-attention variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossShape {
    pub channels: usize,
    pub n_points: usize,
    pub n_heads: usize,
    pub pe_dim: usize,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(mode: AttentionMode, s: CrossShape, rng: &mut R) -> Self {
        let c = s.channels;
        let mut offset_gen = LinearMap::random(2 * s.n_points, c, 0.1, rng);
        // start from a small ring of points around the centre
        for i in 0..s.n_points {
            let a = std::f64::consts::TAU * i as f64 / s.n_points as f64;
            offset_gen.bias.data_mut()[2 * i] = a.cos();
            offset_gen.bias.data_mut()[2 * i + 1] = a.sin();
        }
        match mode {
            AttentionMode::GeometryAware => CrossAttention::Geometry(GeometryCross {
                offset_gen,
                mix: MixParams::new(c, s.n_points, s.pe_dim, rng),
            }),
            AttentionMode::DeformableCenter | AttentionMode::DeformableScaledRotated => {
                CrossAttention::Deformable(DeformableCross {
                    n_heads: s.n_heads,
                    scaled: mode == AttentionMode::DeformableScaledRotated,
                    offset_gen,
                    attn_gen: LinearMap::random(s.n_points, c, 0.1, rng),
                    value_proj: LinearMap::random(c, c, 1.0, rng),
                    out_proj: LinearMap::random(c, c, 0.5, rng),
                })
            }
            AttentionMode::Standard => CrossAttention::Standard(StandardCross {
                attn: Mha::new(c, s.n_heads, rng),
                pos_proj: LinearMap::random(c, s.pe_dim, 0.5, rng),
            }),
        }
    }

    /// Prepares per-layer state (keys and values for the standard variant).
    pub fn view<'a>(&self, bev: &'a Tensor, cell_size: f64) -> BevView<'a> {
        let (kv, kv_inputs) = match self {
            CrossAttention::Standard(s) => {
                let inputs = standard_kv_inputs(s, bev);
                (Some(s.attn.project_kv(&inputs)), Some(inputs))
            }
            _ => (None, None),
        };
        BevView {
            bev,
            cell_size,
            kv,
            kv_inputs,
        }
    }

    /// Sampling points for a query given its previous box.
    pub fn sampling_points(&self, q: &[f64], prev: &BoxState, cell_size: f64) -> Vec<[f64; 2]> {
        match self {
            CrossAttention::Geometry(g) => corner_offsets(&g.offset_gen.forward(q), prev, cell_size),
            CrossAttention::Deformable(d) => {
                let raw = d.offset_gen.forward(q);
                if d.scaled {
                    scaled_rotated_offsets(&raw, prev, cell_size)
                } else {
                    center_offsets(&raw, prev)
                }
            }
            CrossAttention::Standard(_) => Vec::new(),
        }
    }

    /// Updated query (residual included) and the points it sampled.
    pub fn forward(&self, q: &[f64], prev: &BoxState, view: &BevView<'_>) -> (Vec<f64>, Vec<[f64; 2]>) {
        let points = self.sampling_points(q, prev, view.cell_size);
        let out = match self {
            CrossAttention::Geometry(g) => {
                let (samples, _) = sample_points(view.bev, &points);
                mix_forward(&g.mix, q, &samples, &points, view.size()).0
            }
            CrossAttention::Deformable(d) => deformable_forward(d, q, &points, view.bev).0,
            CrossAttention::Standard(s) => {
                let xq = standard_query_input(s, q, prev, view.size()).0;
                let kv = view.kv.as_ref().expect("standard view carries keys");
                let mut out = s.attn.attend(&xq, kv);
                for (o, qi) in out.iter_mut().zip(q) {
                    *o += qi;
                }
                out
            }
        };
        (out, points)
    }

    /// Backward of [`CrossAttention::forward`]; returns `d q` and the gradient
    /// on the previous box.
    pub fn backward(
        &self,
        q: &[f64],
        prev: &BoxState,
        view: &BevView<'_>,
        d_out: &[f64],
        grads: &mut CrossAttention,
        sinks: &mut BevGrads<'_>,
    ) -> (Vec<f64>, BoxGrad) {
        let points = self.sampling_points(q, prev, view.cell_size);
        match (self, grads) {
            (CrossAttention::Geometry(g), CrossAttention::Geometry(gg)) => {
                let (samples, _) = sample_points(view.bev, &points);
                let (mut d_q, d_samples, mut d_points) =
                    mix_backward(&g.mix, q, &samples, &points, view.size(), d_out, &mut gg.mix);
                let d_pts = sample_points_backward(view.bev, &points, &d_samples, sinks.d_bev);
                for (a, b) in d_points.iter_mut().zip(d_pts) {
                    a[0] += b[0];
                    a[1] += b[1];
                }
                let raw = g.offset_gen.forward(q);
                let (d_raw, box_grad) = corner_offsets_backward(&raw, prev, view.cell_size, &d_points);
                add_into(&mut d_q, &g.offset_gen.backward(q, &d_raw, &mut gg.offset_gen));
                (d_q, box_grad)
            }
            (CrossAttention::Deformable(d), CrossAttention::Deformable(gd)) => {
                let (mut d_q, d_points) = deformable_backward(d, q, &points, view.bev, d_out, gd, sinks.d_bev);
                let raw = d.offset_gen.forward(q);
                let (d_raw, box_grad) = if d.scaled {
                    scaled_rotated_backward(&raw, prev, view.cell_size, &d_points)
                } else {
                    center_backward(&raw, &d_points)
                };
                add_into(&mut d_q, &d.offset_gen.backward(q, &d_raw, &mut gd.offset_gen));
                (d_q, box_grad)
            }
            (CrossAttention::Standard(s), CrossAttention::Standard(gs)) => {
                let (xq, pe) = standard_query_input(s, q, prev, view.size());
                let kv = view.kv.as_ref().expect("standard view carries keys");
                let d_xq = s.attn.attend_backward(&xq, kv, d_out, &mut gs.attn, &mut sinks.d_k, &mut sinks.d_v);
                let d_pe = s.pos_proj.backward(&pe, &d_xq, &mut gs.pos_proj);
                let (w, h) = view.size();
                let (dx, dy) = encode_backward(prev.center[0] / w, prev.center[1] / h, &d_pe);
                let mut d_q = d_out.to_vec();
                add_into(&mut d_q, &d_xq);
                let g = BoxGrad {
                    center: [dx / w, dy / h],
                    ..BoxGrad::default()
                };
                (d_q, g)
            }
            _ => panic!("gradient buffer does not match the attention variant"),
        }
    }

    /// Backward of the shared key/value projection of the standard variant,
    /// run once per layer after every query's backward.
    pub fn finish_backward(&self, view: &BevView<'_>, grads: &mut CrossAttention, sinks: &mut BevGrads<'_>) {
        let (CrossAttention::Standard(s), CrossAttention::Standard(gs)) = (self, grads) else {
            return;
        };
        let inputs = view.kv_inputs.as_ref().expect("standard view carries inputs");
        let d_x = s.attn.kv_backward(inputs, &sinks.d_k, &sinks.d_v, &mut gs.attn);
        let (_, h, w) = (view.bev.dim(0), view.bev.dim(1), view.bev.dim(2));
        let pe_dim = s.pos_proj.in_dim();
        let mut pe = vec![0.0; pe_dim];
        for (idx, dx) in d_x.iter().enumerate() {
            let (v, u) = (idx / w, idx % w);
            sinks.d_bev.add_to_cell(v, u, dx);
            encode_into(u as f64 / w as f64, v as f64 / h as f64, &mut pe);
            s.pos_proj.accumulate_param_grad(&pe, dx, &mut gs.pos_proj);
        }
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Per-head softmax over the head's consecutive block of points.
fn head_softmax(logits: &mut [f64], n_heads: usize) {
    let per = logits.len() / n_heads;
    for chunk in logits.chunks_mut(per) {
        softmax_in_place(chunk);
    }
}

struct DeformTrace {
    samples: Vec<Vec<f64>>,
    valid: Vec<bool>,
    values: Vec<Vec<f64>>,
    weights: Vec<f64>,
    pooled: Vec<f64>,
}

fn deformable_forward(d: &DeformableCross, q: &[f64], points: &[[f64; 2]], bev: &Tensor) -> (Vec<f64>, DeformTrace) {
    let c = q.len();
    let n_p = points.len();
    let hd = c / d.n_heads;
    let per = n_p / d.n_heads;
    let (samples, valid) = sample_points(bev, points);
    let values: Vec<Vec<f64>> = samples
        .iter()
        .zip(&valid)
        .map(|(s, ok)| if *ok { d.value_proj.forward(s) } else { vec![0.0; c] })
        .collect();
    let mut weights = d.attn_gen.forward(q);
    head_softmax(&mut weights, d.n_heads);
    let mut pooled = vec![0.0; c];
    for (i, (v, a)) in values.iter().zip(&weights).enumerate() {
        let h = i / per;
        for ch in h * hd..(h + 1) * hd {
            pooled[ch] += a * v[ch];
        }
    }
    let mut out = d.out_proj.forward(&pooled);
    add_into(&mut out, q);
    (
        out,
        DeformTrace {
            samples,
            valid,
            values,
            weights,
            pooled,
        },
    )
}

/// Returns `(d q, d points)`.
fn deformable_backward(
    d: &DeformableCross,
    q: &[f64],
    points: &[[f64; 2]],
    bev: &Tensor,
    d_out: &[f64],
    g: &mut DeformableCross,
    d_bev: &mut Tensor,
) -> (Vec<f64>, Vec<[f64; 2]>) {
    let (_, t) = deformable_forward(d, q, points, bev);
    let c = q.len();
    let n_p = points.len();
    let hd = c / d.n_heads;
    let per = n_p / d.n_heads;
    let d_pooled = d.out_proj.backward(&t.pooled, d_out, &mut g.out_proj);
    let mut d_w = vec![0.0; n_p];
    let mut d_samples = Vec::with_capacity(n_p);
    for i in 0..n_p {
        let h = i / per;
        let hs = h * hd..(h + 1) * hd;
        d_w[i] = t.values[i][hs.clone()].iter().zip(&d_pooled[hs.clone()]).map(|(a, b)| a * b).sum();
        if !t.valid[i] {
            d_samples.push(vec![0.0; c]);
            continue;
        }
        let mut d_v = vec![0.0; c];
        for ch in hs {
            d_v[ch] = t.weights[i] * d_pooled[ch];
        }
        d_samples.push(d.value_proj.backward(&t.samples[i], &d_v, &mut g.value_proj));
    }
    let mut d_logits = Vec::with_capacity(n_p);
    for (w, dw) in t.weights.chunks(per).zip(d_w.chunks(per)) {
        d_logits.extend(softmax_backward(w, dw));
    }
    let mut d_q = d_out.to_vec();
    add_into(&mut d_q, &d.attn_gen.backward(q, &d_logits, &mut g.attn_gen));
    let d_points = sample_points_backward(bev, points, &d_samples, d_bev);
    (d_q, d_points)
}

fn standard_kv_inputs(s: &StandardCross, bev: &Tensor) -> Vec<Vec<f64>> {
    let (_, h, w) = (bev.dim(0), bev.dim(1), bev.dim(2));
    let pe_dim = s.pos_proj.in_dim();
    (0..h * w)
        .map(|idx| {
            let (v, u) = (idx / w, idx % w);
            let mut pe = vec![0.0; pe_dim];
            encode_into(u as f64 / w as f64, v as f64 / h as f64, &mut pe);
            let mut x = bev.cell(v, u);
            add_into(&mut x, &s.pos_proj.forward(&pe));
            x
        })
        .collect()
}

/// Query plus the projected encoding of its box centre; also returns the raw
/// encoding.
fn standard_query_input(s: &StandardCross, q: &[f64], prev: &BoxState, size: (f64, f64)) -> (Vec<f64>, Vec<f64>) {
    let mut pe = vec![0.0; s.pos_proj.in_dim()];
    encode_into(prev.center[0] / size.0, prev.center[1] / size.1, &mut pe);
    let mut x = q.to_vec();
    add_into(&mut x, &s.pos_proj.forward(&pe));
    (x, pe)
}

impl ParamSet for CrossAttention {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            CrossAttention::Geometry(g) => {
                let mut v = nest("offset_gen", g.offset_gen.tensors());
                v.extend(nest("mix", g.mix.tensors()));
                v
            }
            CrossAttention::Deformable(d) => {
                let mut v = nest("offset_gen", d.offset_gen.tensors());
                v.extend(nest("attn_gen", d.attn_gen.tensors()));
                v.extend(nest("value_proj", d.value_proj.tensors()));
                v.extend(nest("out_proj", d.out_proj.tensors()));
                v
            }
            CrossAttention::Standard(s) => {
                let mut v = nest("attn", s.attn.tensors());
                v.extend(nest("pos_proj", s.pos_proj.tensors()));
                v
            }
        }
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            CrossAttention::Geometry(g) => {
                let mut v = nest_mut("offset_gen", g.offset_gen.tensors_mut());
                v.extend(nest_mut("mix", g.mix.tensors_mut()));
                v
            }
            CrossAttention::Deformable(d) => {
                let mut v = nest_mut("offset_gen", d.offset_gen.tensors_mut());
                v.extend(nest_mut("attn_gen", d.attn_gen.tensors_mut()));
                v.extend(nest_mut("value_proj", d.value_proj.tensors_mut()));
                v.extend(nest_mut("out_proj", d.out_proj.tensors_mut()));
                v
            }
            CrossAttention::Standard(s) => {
                let mut v = nest_mut("attn", s.attn.tensors_mut());
                v.extend(nest_mut("pos_proj", s.pos_proj.tensors_mut()));
                v
            }
        }
    }
}
