//! Transformer decoder refining object queries against the fused BEV.
//!
//! Each layer runs self-attention over the queries, cross-attention into the
//! BEV guided by the box decoded by the previous layer, and a feed-forward
//! block; shared heads then decode a box and class logits per query.

pub mod attention;
pub mod boxes;
pub mod cross;
pub mod loss;

use rand::Rng;
use rayon::prelude::*;

pub use attention::Mha;
pub use boxes::{decode_box, encode_box, BoxGrad, BoxState, BOX_DIM};
pub use cross::{corner_offsets, position_aware_mix, AttentionMode, CrossAttention, CrossShape, MixParams};

use crate::error::{invalid, Result};
use crate::geometry::BevGrid;
use crate::labels::N_CLASSES;
use crate::ops::relu_backward;
use crate::query_select::Queries;
use crate::tensor::{nest, nest_mut, LinearMap, ParamSet, Tensor};
use cross::BevGrads;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub channels: usize,
    pub n_points: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub pe_dim: usize,
    pub mode: AttentionMode,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(invalid("decoder needs at least one layer"));
        }
        if self.n_heads == 0 || self.channels % self.n_heads != 0 {
            return Err(invalid(format!(
                "{} channels cannot be split into {} heads",
                self.channels, self.n_heads
            )));
        }
        if self.n_points == 0 || self.n_points % 4 != 0 {
            return Err(invalid(format!("{} sampling points do not cycle over four corners", self.n_points)));
        }
        if self.pe_dim == 0 || self.pe_dim % 4 != 0 {
            return Err(invalid(format!("positional encoding size {} is not a multiple of 4", self.pe_dim)));
        }
        let deformable = matches!(
            self.mode,
            AttentionMode::DeformableCenter | AttentionMode::DeformableScaledRotated
        );
        if deformable && self.n_points % self.n_heads != 0 {
            return Err(invalid(format!(
                "{} sampling points cannot be split into {} heads",
                self.n_points, self.n_heads
            )));
        }
        Ok(())
    }

    fn cross_shape(&self) -> CrossShape {
        CrossShape {
            channels: self.channels,
            n_points: self.n_points,
            n_heads: self.n_heads,
            pe_dim: self.pe_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: Mha,
    pub cross: CrossAttention,
    /// `[C -> 2C]`
    pub ffn1: LinearMap,
    /// `[2C -> C]`
    pub ffn2: LinearMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub layers: Vec<DecoderLayer>,
    /// `[C -> 8]`, shared by all layers.
    pub reg_head: LinearMap,
    /// `[C -> N_CLASSES]`, shared by all layers.
    pub cls_head: LinearMap,
}

impl DecoderParams {
    pub fn new<R: Rng + ?Sized>(config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let layers = (0..config.n_layers)
            .map(|_| DecoderLayer {
                self_attn: Mha::new(c, config.n_heads, rng),
                cross: CrossAttention::new(config.mode, config.cross_shape(), rng),
                ffn1: LinearMap::random(2 * c, c, 1.0, rng),
                ffn2: LinearMap::random(c, 2 * c, 0.5, rng),
            })
            .collect();
        let mut reg_head = LinearMap::random(BOX_DIM, c, 0.05, rng);
        // start from a generic car-sized, axis-aligned box on the ground
        reg_head
            .bias
            .data_mut()
            .copy_from_slice(&[0.0, 0.0, -1.0, 4.0f64.ln(), 2.0f64.ln(), 1.6f64.ln(), 0.0, 1.0]);
        let mut cls_head = LinearMap::random(N_CLASSES, c, 0.05, rng);
        cls_head.bias.fill(-2.0);
        Ok(Self {
            config,
            layers,
            reg_head,
            cls_head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }
}

impl ParamSet for DecoderParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            v.extend(nest(&format!("layer{i}.self_attn"), l.self_attn.tensors()));
            v.extend(nest(&format!("layer{i}.cross"), l.cross.tensors()));
            v.extend(nest(&format!("layer{i}.ffn1"), l.ffn1.tensors()));
            v.extend(nest(&format!("layer{i}.ffn2"), l.ffn2.tensors()));
        }
        v.extend(nest("reg_head", self.reg_head.tensors()));
        v.extend(nest("cls_head", self.cls_head.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.extend(nest_mut(&format!("layer{i}.self_attn"), l.self_attn.tensors_mut()));
            v.extend(nest_mut(&format!("layer{i}.cross"), l.cross.tensors_mut()));
            v.extend(nest_mut(&format!("layer{i}.ffn1"), l.ffn1.tensors_mut()));
            v.extend(nest_mut(&format!("layer{i}.ffn2"), l.ffn2.tensors_mut()));
        }
        v.extend(nest_mut("reg_head", self.reg_head.tensors_mut()));
        v.extend(nest_mut("cls_head", self.cls_head.tensors_mut()));
        v
    }
}

/// Per-layer predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutput {
    pub boxes: Vec<BoxState>,
    /// Raw regression outputs, `N_q × 8`.
    pub reg: Vec<Vec<f64>>,
    pub cls_logits: Vec<Vec<f64>>,
    /// Sampling points used by each query's cross-attention (cells).
    pub points: Vec<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug)]
struct LayerTrace {
    q_in: Vec<Vec<f64>>,
    q_sa: Vec<Vec<f64>>,
    q_ca: Vec<Vec<f64>>,
    q_out: Vec<Vec<f64>>,
    prev: Vec<BoxState>,
}

/// A decoder pass: predictions per layer plus what the backward pass needs.
#[derive(Clone, Debug)]
pub struct DecoderRun {
    pub layers: Vec<LayerOutput>,
    trace: Vec<LayerTrace>,
}

/// BEV cell size; the decoder works in cell units and needs square cells.
pub fn square_cell_size(grid: &BevGrid) -> Result<f64> {
    let (a, b) = (grid.cell_size_x(), grid.cell_size_y());
    if (a - b).abs() > 1e-9 * a.max(b) {
        return Err(invalid(format!("decoder needs square cells, got {a} x {b}")));
    }
    Ok(a)
}

fn ffn(layer: &DecoderLayer, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = layer.ffn1.forward(x).into_iter().map(|v| v.max(0.0)).collect();
    let mut out = layer.ffn2.forward(&h);
    for (o, xi) in out.iter_mut().zip(x) {
        *o += xi;
    }
    out
}

fn add_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

pub fn decoder_forward(params: &DecoderParams, queries: &Queries, bev: &Tensor, grid: &BevGrid) -> Result<DecoderRun> {
    params.config.validate()?;
    let cell = square_cell_size(grid)?;
    let (c, _, _) = bev.chw()?;
    if c != params.config.channels || queries.features.iter().any(|q| q.len() != c) {
        return Err(crate::error::shape_err(format!(
            "decoder expects {} channels",
            params.config.channels
        )));
    }
    let mut q = queries.features.clone();
    let mut prev: Vec<BoxState> = queries.ref_points.iter().map(|r| BoxState::point(*r)).collect();
    let mut layers = Vec::with_capacity(params.layers.len());
    let mut trace = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let q_sa = add_rows(&q, &layer.self_attn.forward(&q, &q));
        let view = layer.cross.view(bev, cell);
        let per_query: Vec<_> = q_sa
            .par_iter()
            .zip(&prev)
            .zip(&queries.ref_points)
            .map(|((qs, pb), r)| {
                let (q_ca, pts) = layer.cross.forward(qs, pb, &view);
                let q_out = ffn(layer, &q_ca);
                let reg = params.reg_head.forward(&q_out);
                let cls = params.cls_head.forward(&q_out);
                let b = decode_box(&reg, *r);
                (q_ca, pts, q_out, reg, cls, b)
            })
            .collect();
        let mut out = LayerOutput {
            boxes: Vec::with_capacity(q.len()),
            reg: Vec::with_capacity(q.len()),
            cls_logits: Vec::with_capacity(q.len()),
            points: Vec::with_capacity(q.len()),
        };
        let mut q_ca_all = Vec::with_capacity(q.len());
        let mut q_out_all = Vec::with_capacity(q.len());
        for (q_ca, pts, q_out, reg, cls, b) in per_query {
            q_ca_all.push(q_ca);
            q_out_all.push(q_out);
            out.reg.push(reg);
            out.cls_logits.push(cls);
            out.boxes.push(b);
            out.points.push(pts);
        }
        trace.push(LayerTrace {
            q_in: std::mem::take(&mut q),
            q_sa,
            q_ca: q_ca_all,
            q_out: q_out_all.clone(),
            prev: std::mem::replace(&mut prev, out.boxes.clone()),
        });
        q = q_out_all;
        layers.push(out);
    }
    Ok(DecoderRun { layers, trace })
}

/// Gradients of a decoder pass.
#[derive(Clone, Debug)]
pub struct DecoderGrads {
    pub params: DecoderParams,
    pub d_queries: Vec<Vec<f64>>,
    pub d_bev: Tensor,
}

/// Backpropagates per-layer gradients on the regression outputs and class
/// logits through every layer, including the path from each decoded box into
/// the next layer's sampling points.
pub fn decoder_backward(
    params: &DecoderParams,
    bev: &Tensor,
    grid: &BevGrid,
    run: &DecoderRun,
    d_reg: &[Vec<Vec<f64>>],
    d_cls: &[Vec<Vec<f64>>],
) -> Result<DecoderGrads> {
    let cell = square_cell_size(grid)?;
    let c = params.config.channels;
    let mut grads = params.zeros_like();
    let mut d_bev = Tensor::zeros(bev.shape());
    let n_q = run.layers.first().map_or(0, |l| l.reg.len());
    let mut d_q_next = vec![vec![0.0; c]; n_q];
    let mut box_carry: Vec<BoxGrad> = vec![BoxGrad::default(); n_q];
    for (li, layer) in params.layers.iter().enumerate().rev() {
        let t = &run.trace[li];
        let out = &run.layers[li];
        let mut d_q_out = std::mem::take(&mut d_q_next);
        for i in 0..n_q {
            let mut dr = d_reg[li][i].clone();
            if !box_carry[i].is_zero() {
                add_into(&mut dr, &boxes::decode_box_backward(&out.reg[i], &box_carry[i]));
            }
            add_into(&mut d_q_out[i], &params.reg_head.backward(&t.q_out[i], &dr, &mut grads.reg_head));
            add_into(&mut d_q_out[i], &params.cls_head.backward(&t.q_out[i], &d_cls[li][i], &mut grads.cls_head));
        }
        let g_layer = &mut grads.layers[li];
        let d_q_ca: Vec<Vec<f64>> = t
            .q_ca
            .iter()
            .zip(&d_q_out)
            .map(|(x, dy)| {
                let pre = layer.ffn1.forward(x);
                let h: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
                let d_h = layer.ffn2.backward(&h, dy, &mut g_layer.ffn2);
                let d_pre = relu_backward(&h, &d_h);
                let mut dx = dy.clone();
                add_into(&mut dx, &layer.ffn1.backward(x, &d_pre, &mut g_layer.ffn1));
                dx
            })
            .collect();
        let view = layer.cross.view(bev, cell);
        let n_kv = view.kv.as_ref().map_or(0, |kv| kv.k.len());
        let mut sinks = BevGrads {
            d_bev: &mut d_bev,
            d_k: vec![vec![0.0; c]; n_kv],
            d_v: vec![vec![0.0; c]; n_kv],
        };
        let mut d_q_sa = Vec::with_capacity(n_q);
        for i in 0..n_q {
            let (dq, bg) = layer
                .cross
                .backward(&t.q_sa[i], &t.prev[i], &view, &d_q_ca[i], &mut g_layer.cross, &mut sinks);
            d_q_sa.push(dq);
            box_carry[i] = bg;
        }
        layer.cross.finish_backward(&view, &mut g_layer.cross, &mut sinks);
        let (d_xq, d_xkv) = layer.self_attn.backward(&t.q_in, &t.q_in, &d_q_sa, &mut g_layer.self_attn);
        d_q_next = d_q_sa
            .iter()
            .zip(d_xq.iter().zip(&d_xkv))
            .map(|(a, (b, cc))| a.iter().zip(b).zip(cc).map(|((x, y), z)| x + y + z).collect())
            .collect();
    }
    Ok(DecoderGrads {
        params: grads,
        d_queries: d_q_next,
        d_bev,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{compare_params, finite_diff_grad, finite_diff_params, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(mode: AttentionMode, seed: u64) -> (DecoderParams, Queries, Tensor, BevGrid) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = DecoderConfig {
            channels: 4,
            n_points: 4,
            n_layers: 2,
            n_heads: 2,
            pe_dim: 8,
            mode,
        };
        let params = DecoderParams::new(cfg, &mut rng).unwrap();
        let grid = BevGrid::square(8.0, 10);
        let bev = Tensor::random_normal(&[4, 10, 10], 1.0, &mut rng);
        let queries = Queries {
            features: (0..3).map(|_| Tensor::random_normal(&[4], 1.0, &mut rng).into_data()).collect(),
            ref_points: vec![[4.0, 5.0], [2.0, 7.0], [6.5, 3.0]],
            groups: vec![0, 0, 1],
        };
        (params, queries, bev, grid)
    }

    fn probe(run_len: usize, n_q: usize, dim: usize, seed: u64) -> Vec<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..run_len)
            .map(|_| (0..n_q).map(|_| Tensor::random_normal(&[dim], 1.0, &mut rng).into_data()).collect())
            .collect()
    }

    fn scalar(run: &DecoderRun, pr: &[Vec<Vec<f64>>], pc: &[Vec<Vec<f64>>]) -> f64 {
        let mut s = 0.0;
        for (l, out) in run.layers.iter().enumerate() {
            for i in 0..out.reg.len() {
                s += out.reg[i].iter().zip(&pr[l][i]).map(|(a, b)| a * b).sum::<f64>();
                s += out.cls_logits[i].iter().zip(&pc[l][i]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        s
    }

    fn check_mode(mode: AttentionMode) {
        let (params, queries, bev, grid) = setup(mode, 17);
        let pr = probe(2, 3, BOX_DIM, 1);
        let pc = probe(2, 3, N_CLASSES, 2);
        let run = decoder_forward(&params, &queries, &bev, &grid).unwrap();
        let g = decoder_backward(&params, &bev, &grid, &run, &pr, &pc).unwrap();
        let loss = |p: &DecoderParams| scalar(&decoder_forward(p, &queries, &bev, &grid).unwrap(), &pr, &pc);
        let num = finite_diff_params(&params, loss, 1e-6).unwrap();
        for r in compare_params(&g.params, &num) {
            assert!(r.passes(1e-5), "{mode:?} {}: {} ({} vs {})", r.name, r.rel_err, r.analytic_norm, r.numeric_norm);
        }
        let n_bev = finite_diff_grad(
            |b| scalar(&decoder_forward(&params, &queries, b, &grid).unwrap(), &pr, &pc),
            &bev,
            1e-6,
        )
        .unwrap();
        assert!(relative_error(g.d_bev.data(), n_bev.data()) < 1e-5, "{mode:?} bev");
        let flat = Tensor::new(vec![3, 4], queries.features.concat()).unwrap();
        let n_q = finite_diff_grad(
            |t| {
                let mut q = queries.clone();
                q.features = t.data().chunks(4).map(|c| c.to_vec()).collect();
                scalar(&decoder_forward(&params, &q, &bev, &grid).unwrap(), &pr, &pc)
            },
            &flat,
            1e-6,
        )
        .unwrap();
        assert!(relative_error(&g.d_queries.concat(), n_q.data()) < 1e-5, "{mode:?} queries");
    }

    #[test]
    fn geometry_aware_gradients() {
        check_mode(AttentionMode::GeometryAware);
    }

    #[test]
    fn deformable_gradients() {
        check_mode(AttentionMode::DeformableCenter);
        check_mode(AttentionMode::DeformableScaledRotated);
    }

    #[test]
    fn standard_gradients() {
        check_mode(AttentionMode::Standard);
    }

    #[test]
    fn layer_zero_samples_raw_offsets() {
        let (params, queries, bev, grid) = setup(AttentionMode::GeometryAware, 3);
        let run = decoder_forward(&params, &queries, &bev, &grid).unwrap();
        let CrossAttention::Geometry(g) = &params.layers[0].cross else {
            unreachable!()
        };
        let t = &run.trace[0];
        for i in 0..queries.len() {
            let raw = g.offset_gen.forward(&t.q_sa[i]);
            for (k, p) in run.layers[0].points[i].iter().enumerate() {
                assert_eq!(p[0], queries.ref_points[i][0] + raw[2 * k]);
                assert_eq!(p[1], queries.ref_points[i][1] + raw[2 * k + 1]);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = DecoderConfig {
            channels: 6,
            n_points: 4,
            n_layers: 1,
            n_heads: 4,
            pe_dim: 8,
            mode: AttentionMode::GeometryAware,
        };
        assert!(DecoderParams::new(base, &mut rng).is_err());
        assert!(DecoderParams::new(DecoderConfig { n_heads: 3, ..base }, &mut rng).is_ok());
        assert!(DecoderParams::new(DecoderConfig { n_heads: 3, mode: AttentionMode::DeformableCenter, ..base }, &mut rng).is_err());
        assert!(DecoderParams::new(DecoderConfig { n_heads: 2, pe_dim: 6, ..base }, &mut rng).is_err());
    }
}
