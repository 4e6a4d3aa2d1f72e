//! Gradient-descent fitting of the detector on synthetic scenes.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{decode, fuse, select, view_transform, Model, SceneInputs, Selection, VtMode};
use crate::decoder::boxes::encode_box;
use crate::decoder::loss::{focal_loss, gaussian_focal_loss_logits, greedy_match, l1_box_loss};
use crate::decoder::{decoder_backward, DecoderRun, BOX_DIM};
use crate::error::{invalid, Error, Result};
use crate::geometry::BevGrid;
use crate::labels::{Box3d, N_CLASSES};
use crate::query_select::{gaussian_target, heatmap_backward, init_queries_backward, Queries};
use crate::scene::Scene;
use crate::tensor::{ParamSet, Tensor};
use crate::view_transform::{
    adaptive_project_backward, adaptive_sample_backward, fuse_bev_backward, SampleGrads,
};

/// Which parameter blocks receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Trainable {
    /// Height, weight and kernel generators.
    pub view_transform: bool,
    pub fusion: bool,
    pub heatmap: bool,
    pub queries: bool,
    pub decoder: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Self {
            view_transform: true,
            fusion: true,
            heatmap: true,
            queries: true,
            decoder: true,
        }
    }
}

impl Trainable {
    pub fn only_view_transform() -> Self {
        Self {
            view_transform: true,
            fusion: false,
            heatmap: false,
            queries: false,
            decoder: false,
        }
    }

    pub fn only_decoder() -> Self {
        Self {
            view_transform: false,
            fusion: false,
            heatmap: false,
            queries: true,
            decoder: true,
        }
    }
}

/// Update rule applied to the averaged gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain gradient descent.
    #[default]
    Sgd,
    /// Adam with β = (0.9, 0.999), ε = 1e-8.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub heatmap_weight: f64,
    pub box_weight: f64,
    pub cls_weight: f64,
    pub height_weight: f64,
    pub train: Trainable,
    /// Rescale the averaged gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    /// A step whose loss exceeds this (or is non-finite) aborts the fit.
    pub divergence_threshold: f64,
    /// Log progress every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 1e-2,
            optimizer: Optimizer::Sgd,
            heatmap_weight: 1.0,
            box_weight: 1.0,
            cls_weight: 1.0,
            height_weight: 1.0,
            train: Trainable::default(),
            clip_norm: None,
            divergence_threshold: 1e6,
            log_every: 0,
        }
    }
}

impl FitConfig {
    /// Height supervision only.
    pub fn heights_only(steps: usize, lr: f64) -> Self {
        Self {
            steps,
            lr,
            heatmap_weight: 0.0,
            box_weight: 0.0,
            cls_weight: 0.0,
            height_weight: 1.0,
            train: Trainable::only_view_transform(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.heatmap_weight, self.box_weight, self.cls_weight, self.height_weight];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(invalid(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(invalid("clip_norm must be positive"));
        }
        Ok(())
    }

    fn needs_decoder(&self) -> bool {
        self.box_weight > 0.0 || self.cls_weight > 0.0
    }
}

/// One training example with its targets.
#[derive(Clone, Debug)]
pub struct TrainScene {
    pub inputs: SceneInputs,
    pub boxes: Vec<Box3d>,
    /// `[N_CLASSES, H, W]`
    pub heatmap_target: Tensor,
    /// Object centre height at every cell with LiDAR occupancy, `(u, v, z)`.
    pub height_targets: Vec<(usize, usize, f64)>,
}

impl TrainScene {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        let inputs = SceneInputs::from_scene(scene)?;
        let (heatmap_target, _) = gaussian_target(&scene.boxes, &scene.grid);
        let height_targets = occupied_heights(&inputs.lidar, &scene.grid)?;
        Ok(Self {
            inputs,
            boxes: scene.boxes.clone(),
            heatmap_target,
            height_targets,
        })
    }
}

/// Reads `(u, v, z)` from the height and occupancy channels (the last two).
fn occupied_heights(lidar: &Tensor, grid: &BevGrid) -> Result<Vec<(usize, usize, f64)>> {
    let (c, h, w) = lidar.chw()?;
    if c < 2 || h != grid.height() || w != grid.width() {
        return Err(invalid("LiDAR BEV does not match the grid"));
    }
    let mut out = Vec::new();
    for v in 0..h {
        for u in 0..w {
            if lidar.at3(c - 1, v, u) > 0.0 {
                out.push((u, v, lidar.at3(c - 2, v, u)));
            }
        }
    }
    Ok(out)
}

/// Weighted loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub total: f64,
    pub heatmap: f64,
    pub boxes: f64,
    pub cls: f64,
    pub height: f64,
}

impl LossTerms {
    fn add(&mut self, o: &LossTerms) {
        self.total += o.total;
        self.heatmap += o.heatmap;
        self.boxes += o.boxes;
        self.cls += o.cls;
        self.height += o.height;
    }

    fn scale(&mut self, s: f64) {
        self.total *= s;
        self.heatmap *= s;
        self.boxes *= s;
        self.cls *= s;
        self.height *= s;
    }
}

/// Loss of one scene, and its gradient with respect to every model parameter
/// when `with_grad` is set.
pub fn scene_loss(model: &Model, scene: &TrainScene, cfg: &FitConfig, with_grad: bool) -> Result<(LossTerms, Option<Model>)> {
    let mcfg = &model.config;
    let grid = &mcfg.grid;
    let inputs = &scene.inputs;
    let camera = view_transform(model, inputs)?;
    let bev_fuse = fuse(model, &camera, inputs)?;
    let selection = select(model, &bev_fuse, cfg.heatmap_weight > 0.0)?;
    let mut terms = LossTerms::default();

    let mut d_fuse = Tensor::zeros(bev_fuse.shape());
    let mut grads = with_grad.then(|| model.zeros_like());

    if cfg.heatmap_weight > 0.0 {
        let logits = selection
            .heatmap_logits
            .as_ref()
            .ok_or_else(|| invalid("heatmap logits missing"))?;
        if logits.shape() != scene.heatmap_target.shape() {
            return Err(invalid("heatmap target does not match the grid"));
        }
        let (l, mut g) = gaussian_focal_loss_logits(logits.data(), scene.heatmap_target.data());
        terms.heatmap = cfg.heatmap_weight * l;
        if let Some(gr) = grads.as_mut() {
            g.iter_mut().for_each(|x| *x *= cfg.heatmap_weight);
            let d_logits = Tensor::new(logits.shape().to_vec(), g)?;
            let d = heatmap_backward(&model.heatmap_head, &bev_fuse, &d_logits, &mut gr.heatmap_head)?;
            d_fuse.add_assign(&d);
        }
    }

    if cfg.needs_decoder() {
        detection_loss(model, &bev_fuse, &selection, &scene.boxes, cfg, grads.as_mut(), &mut d_fuse, &mut terms)?;
    }

    let mut d_heights = None;
    if cfg.height_weight > 0.0 && !scene.height_targets.is_empty() {
        let heights = &camera.vt.per_cell_heights;
        let n_h = heights.dim(0);
        let norm = cfg.height_weight / (scene.height_targets.len() * n_h) as f64;
        let mut dh = Tensor::zeros(heights.shape());
        let mut l = 0.0;
        for &(u, v, z) in &scene.height_targets {
            for i in 0..n_h {
                let diff = heights.at3(i, v, u) - z;
                l += diff.abs();
                dh.set3(i, v, u, norm * sign(diff));
            }
        }
        terms.height = norm * l;
        d_heights = Some(dh);
    }
    terms.total = terms.heatmap + terms.boxes + terms.cls + terms.height;

    let Some(mut gr) = grads else {
        return Ok((terms, None));
    };
    let d_cam = fuse_bev_backward(&model.vt.fuse, &camera.bev, &inputs.lidar, &d_fuse, &mut gr.vt.fuse)?;
    let d_as = if mcfg.vt_mode.adaptive_projection() {
        adaptive_project_backward(&model.vt.kernel_gen, &camera.vt.bev, &inputs.lidar, &d_cam, &mut gr.vt.kernel_gen)?
    } else {
        d_cam
    };
    if mcfg.vt_mode.adaptive_sampling() {
        adaptive_sample_backward(
            &model.vt,
            &inputs.lidar,
            &inputs.views()?,
            grid,
            &d_as,
            d_heights.as_ref(),
            SampleGrads {
                params: &mut gr.vt,
                pyramids: None,
            },
        )?;
    }
    mask_frozen(&mut gr, &cfg.train, mcfg.vt_mode);
    Ok((terms, Some(gr)))
}

/// Box and class losses of the decoder over all layers; accumulates decoder
/// and query gradients into `grads` and the fused-BEV gradient into `d_fuse`.
#[allow(clippy::too_many_arguments)]
fn detection_loss(
    model: &Model,
    bev_fuse: &Tensor,
    selection: &Selection,
    boxes: &[Box3d],
    cfg: &FitConfig,
    grads: Option<&mut Model>,
    d_fuse: &mut Tensor,
    terms: &mut LossTerms,
) -> Result<()> {
    let grid = &model.config.grid;
    let run = decode(model, selection, bev_fuse)?;
    let queries = &selection.queries;
    let matches = match_boxes(boxes, queries, grid);
    let n_layers = run.layers.len() as f64;
    let n_q = queries.len();
    let mut d_reg = Vec::with_capacity(run.layers.len());
    let mut d_cls = Vec::with_capacity(run.layers.len());
    let mut cls_target = vec![vec![0.0; N_CLASSES]; n_q];
    for &(t, q) in &matches {
        cls_target[q][boxes[t].class.index()] = 1.0;
    }
    for layer in &run.layers {
        let mut dr = vec![vec![0.0; BOX_DIM]; n_q];
        if cfg.box_weight > 0.0 && !matches.is_empty() {
            let (l, g) = matched_l1(&layer.reg, boxes, queries, &matches, grid);
            terms.boxes += cfg.box_weight * l / n_layers;
            for (&(_, q), gq) in matches.iter().zip(g) {
                dr[q] = gq.iter().map(|x| x * cfg.box_weight / n_layers).collect();
            }
        }
        let mut dc = vec![vec![0.0; N_CLASSES]; n_q];
        if cfg.cls_weight > 0.0 && n_q > 0 {
            let (l, g) = focal_loss(&layer.cls_logits, &cls_target);
            terms.cls += cfg.cls_weight * l / n_layers;
            dc = g
                .into_iter()
                .map(|row| row.iter().map(|x| x * cfg.cls_weight / n_layers).collect())
                .collect();
        }
        d_reg.push(dr);
        d_cls.push(dc);
    }
    if let Some(gr) = grads {
        let dg = decoder_backward(&model.decoder, bev_fuse, grid, &run, &d_reg, &d_cls)?;
        gr.decoder.axpy(1.0, &dg.params);
        d_fuse.add_assign(&dg.d_bev);
        init_queries_backward(
            &model.queries,
            queries,
            &dg.d_queries,
            &model.config.group_spec(),
            &mut gr.queries,
            d_fuse,
        );
    }
    Ok(())
}

/// Greedy nearest-centre assignment of ground-truth boxes to queries.
pub fn match_boxes(boxes: &[Box3d], queries: &Queries, grid: &BevGrid) -> Vec<(usize, usize)> {
    let centers: Vec<[f64; 2]> = boxes
        .iter()
        .map(|b| {
            let (u, v) = grid.world_to_cell(b.center[0], b.center[1]);
            [u, v]
        })
        .collect();
    greedy_match(&centers, &queries.ref_points)
}

fn matched_l1(
    reg: &[Vec<f64>],
    boxes: &[Box3d],
    queries: &Queries,
    matches: &[(usize, usize)],
    grid: &BevGrid,
) -> (f64, Vec<Vec<f64>>) {
    let pred: Vec<Vec<f64>> = matches.iter().map(|&(_, q)| reg[q].clone()).collect();
    let target: Vec<Vec<f64>> = matches
        .iter()
        .map(|&(t, q)| encode_box(&boxes[t], queries.ref_points[q], grid).to_vec())
        .collect();
    l1_box_loss(&pred, &target)
}

/// Fused BEV features and boxes of a scene, for fitting the decoder alone.
#[derive(Clone, Debug)]
pub struct DecoderExample {
    pub bev_fuse: Tensor,
    pub boxes: Vec<Box3d>,
}

impl DecoderExample {
    /// Runs the model's view transform and fusion once.
    pub fn from_scene(model: &Model, scene: &TrainScene) -> Result<Self> {
        let camera = view_transform(model, &scene.inputs)?;
        Ok(Self {
            bev_fuse: fuse(model, &camera, &scene.inputs)?,
            boxes: scene.boxes.clone(),
        })
    }
}

/// Decoder loss on cached BEV features. Only box and class terms apply.
pub fn decoder_example_loss(
    model: &Model,
    ex: &DecoderExample,
    cfg: &FitConfig,
    with_grad: bool,
) -> Result<(LossTerms, Option<Model>)> {
    let selection = select(model, &ex.bev_fuse, false)?;
    let mut terms = LossTerms::default();
    let mut grads = with_grad.then(|| model.zeros_like());
    let mut d_fuse = Tensor::zeros(ex.bev_fuse.shape());
    detection_loss(model, &ex.bev_fuse, &selection, &ex.boxes, cfg, grads.as_mut(), &mut d_fuse, &mut terms)?;
    terms.total = terms.boxes + terms.cls;
    if let Some(g) = grads.as_mut() {
        mask_frozen(g, &cfg.train, model.config.vt_mode);
    }
    Ok((terms, grads))
}

/// Unweighted L1 between final-layer boxes and their matched targets; `None`
/// when nothing is matched.
pub fn final_box_l1(model: &Model, ex: &DecoderExample) -> Result<Option<f64>> {
    let selection = select(model, &ex.bev_fuse, false)?;
    let run = decode(model, &selection, &ex.bev_fuse)?;
    run_box_l1(&run, &selection.queries, &ex.boxes, &model.config.grid)
}

/// [`final_box_l1`] for an existing decoder run.
pub fn run_box_l1(run: &DecoderRun, queries: &Queries, boxes: &[Box3d], grid: &BevGrid) -> Result<Option<f64>> {
    let matches = match_boxes(boxes, queries, grid);
    if matches.is_empty() {
        return Ok(None);
    }
    let last = run.layers.last().ok_or(Error::Empty("decoder layers"))?;
    Ok(Some(matched_l1(&last.reg, boxes, queries, &matches, grid).0))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn mask_frozen(g: &mut Model, train: &Trainable, mode: VtMode) {
    if !train.view_transform || !mode.adaptive_sampling() {
        g.vt.height_gen.zero_();
        g.vt.weight_gen.zero_();
    }
    if !train.view_transform || !mode.adaptive_projection() {
        g.vt.kernel_gen.zero_();
    }
    if !train.fusion {
        g.vt.fuse.zero_();
    }
    if !train.heatmap {
        g.heatmap_head.zero_();
    }
    if !train.queries {
        g.queries.zero_();
    }
    if !train.decoder {
        g.decoder.zero_();
    }
}

/// Loss and averaged gradient over several scenes. Scenes are evaluated in
/// parallel and reduced in input order, so the result does not depend on the
/// thread count.
pub fn batch_loss(model: &Model, scenes: &[TrainScene], cfg: &FitConfig) -> Result<(LossTerms, Model)> {
    reduce_batch(model, scenes, |s| scene_loss(model, s, cfg, true))
}

fn reduce_batch<T: Sync>(
    model: &Model,
    items: &[T],
    loss: impl Fn(&T) -> Result<(LossTerms, Option<Model>)> + Sync,
) -> Result<(LossTerms, Model)> {
    if items.is_empty() {
        return Err(Error::Empty("training scenes"));
    }
    let parts: Vec<(LossTerms, Option<Model>)> = items.par_iter().map(&loss).collect::<Result<_>>()?;
    let mut terms = LossTerms::default();
    let mut grad = model.zeros_like();
    for (t, g) in &parts {
        terms.add(t);
        if let Some(g) = g {
            grad.axpy(1.0, g);
        }
    }
    let inv = 1.0 / items.len() as f64;
    terms.scale(inv);
    for (_, t) in grad.tensors_mut() {
        t.scale(inv);
    }
    Ok((terms, grad))
}

/// Per-step loss curve of a fit.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FitReport {
    pub curve: Vec<LossTerms>,
}

impl FitReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.curve.last().map(|t| t.total)
    }

    /// Mean total loss over consecutive windows (a shorter tail window is kept).
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        self.curve
            .chunks(window.max(1))
            .map(|c| c.iter().map(|t| t.total).sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// True when no windowed mean exceeds its predecessor by more than 1%
    /// and the last window ends below the first.
    pub fn trends_down(&self, window: usize) -> bool {
        let m = self.window_means(window);
        m.windows(2).all(|p| p[1] <= p[0] * 1.01) && m.last() < m.first()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,total,heatmap,boxes,cls,height")?;
        for (i, t) in self.curve.iter().enumerate() {
            writeln!(out, "{i},{},{},{},{},{}", t.total, t.heatmap, t.boxes, t.cls, t.height)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)
    }
}

/// Plain gradient descent on the averaged scene loss. Each entry of the curve
/// is the loss before that step's update.
pub fn fit_generators(model: &mut Model, scenes: &[TrainScene], cfg: &FitConfig) -> Result<FitReport> {
    descend(model, cfg, |m| batch_loss(m, scenes, cfg))
}

/// Gradient descent on the decoder and query embeddings over cached BEV
/// features.
pub fn fit_decoder(model: &mut Model, examples: &[DecoderExample], cfg: &FitConfig) -> Result<FitReport> {
    descend(model, cfg, |m| {
        reduce_batch(m, examples, |ex| decoder_example_loss(m, ex, cfg, true))
    })
}

fn descend(
    model: &mut Model,
    cfg: &FitConfig,
    batch: impl Fn(&Model) -> Result<(LossTerms, Model)>,
) -> Result<FitReport> {
    cfg.validate()?;
    let mut report = FitReport::default();
    let mut adam = (cfg.optimizer == Optimizer::Adam).then(|| Adam::new(model));
    for step in 0..cfg.steps {
        let (terms, mut grad) = batch(model)?;
        if !terms.total.is_finite() || terms.total > cfg.divergence_threshold {
            return Err(Error::Diverged {
                step,
                loss: terms.total,
            });
        }
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("step {step}: loss {:.6}", terms.total);
        }
        report.curve.push(terms);
        if cfg.lr == 0.0 {
            continue;
        }
        if let Some(max) = cfg.clip_norm {
            let n = grad.global_norm();
            if n > max {
                for (_, t) in grad.tensors_mut() {
                    t.scale(max / n);
                }
            }
        }
        match adam.as_mut() {
            Some(a) => a.step(model, &grad, cfg.lr),
            None => model.axpy(-cfg.lr, &grad),
        }
    }
    Ok(report)
}

struct Adam {
    m: Model,
    v: Model,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &Model) -> Self {
        Self {
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grad: &Model, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let params = model.tensors_mut().into_iter();
        let moments = self.m.tensors_mut().into_iter().zip(self.v.tensors_mut());
        for (((_, p), ((_, m), (_, v))), (_, g)) in params.zip(moments).zip(grad.tensors()) {
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (p, g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g;
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g * g;
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{compare_params, finite_diff_params, overall_error, worst};
    use crate::pipeline::{PipelineConfig, VtMode};
    use crate::scene::{make_scene, SceneConfig};

    fn small(channels: usize, n: usize) -> PipelineConfig {
        PipelineConfig {
            grid: BevGrid::square(n as f64, n),
            channels,
            n_heights: 2,
            n_scales: 2,
            queries_per_group: 2,
            n_points: 4,
            n_layers: 2,
            n_heads: 2,
            pe_dim: 8,
            ..PipelineConfig::default()
        }
    }

    fn scene_for(cfg: &PipelineConfig, seed: u64, n_boxes: usize) -> TrainScene {
        let sc = SceneConfig {
            n_boxes,
            edge_margin: 1.5,
            min_range: 2.5,
            ..SceneConfig::default()
        };
        TrainScene::from_scene(&make_scene(seed, &sc, &cfg.grid, cfg.channels).unwrap()).unwrap()
    }

    #[test]
    fn zero_learning_rate_gives_flat_curve() {
        let cfg = small(4, 8);
        let scene = scene_for(&cfg, 0, 2);
        let mut model = Model::new(cfg, 3).unwrap();
        let before = model.clone();
        let fc = FitConfig {
            steps: 4,
            lr: 0.0,
            ..FitConfig::default()
        };
        let report = fit_generators(&mut model, std::slice::from_ref(&scene), &fc).unwrap();
        assert_eq!(report.curve.len(), 4);
        assert!(report.curve.iter().all(|t| t.total == report.curve[0].total));
        assert_eq!(model, before);
    }

    #[test]
    fn step_zero_gradient_matches_finite_differences() {
        for vt_mode in [VtMode::Asap, VtMode::Vanilla] {
            let cfg = PipelineConfig {
                vt_mode,
                ..small(4, 8)
            };
            let scene = scene_for(&cfg, 1, 2);
            let model = Model::new(cfg, 5).unwrap();
            let fc = FitConfig {
                heatmap_weight: 1.0,
                box_weight: 1.0,
                cls_weight: 1.0,
                height_weight: 0.5,
                ..FitConfig::default()
            };
            let (_, g) = scene_loss(&model, &scene, &fc, true).unwrap();
            let numeric =
                finite_diff_params(&model, |m| scene_loss(m, &scene, &fc, false).unwrap().0.total, 1e-6).unwrap();
            let g = g.unwrap();
            let overall = overall_error(&g, &numeric);
            assert!(overall < 1e-4, "{vt_mode:?}: overall {overall:e}");
            // Tensors with tiny gradients are compared against the rounding
            // noise of the differences instead.
            let reports = compare_params(&g, &numeric);
            let w = worst(&reports).unwrap();
            assert!(
                reports.iter().all(|r| r.passes(1e-4) || r.abs_diff() < 1e-8),
                "{vt_mode:?}: worst {w:?}"
            );
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let report = FitReport {
            curve: vec![LossTerms::default(); 3],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("step,total"));
        assert!(!report.trends_down(2), "a flat curve does not trend down");
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = small(4, 8);
        let scene = scene_for(&cfg, 2, 2);
        let mut model = Model::new(cfg, 1).unwrap();
        let fc = FitConfig {
            steps: 2,
            divergence_threshold: 0.0,
            ..FitConfig::default()
        };
        let err = fit_generators(&mut model, &[scene], &fc).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }));
    }

    #[test]
    fn invalid_fit_config_is_rejected() {
        let fc = FitConfig {
            lr: -1.0,
            ..FitConfig::default()
        };
        assert!(fc.validate().is_err());
    }
}
