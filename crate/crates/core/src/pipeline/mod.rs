//! End-to-end detector: view transform, fusion, query selection, decoder.

pub mod fit;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{decoder_forward, AttentionMode, DecoderConfig, DecoderParams, DecoderRun};
use crate::error::{invalid, Result};
use crate::geometry::{BevGrid, CameraModel, FeaturePyramid};
use crate::labels::{Box3d, ObjectClass, N_CLASSES};
use crate::ops::sigmoid;
use crate::query_select::{
    heatmap_logits, init_queries, topk_keypoints, GroupKeypoints, GroupSpec, QueryEmbedding, QueryInit, Queries,
};
use crate::scene::{render_camera_features, rasterize_lidar_bev, Scene};
use crate::tensor::{nest, nest_mut, LinearMap, ParamSet, Tensor};
use crate::view_transform::{
    adaptive_project, adaptive_sample, evenly_spread_heights, fuse_bev, vanilla_vt, AsapParams, CameraViews, VtOutput,
};

pub use fit::{
    fit_decoder, fit_generators, run_box_l1, DecoderExample, FitConfig, FitReport, LossTerms, Optimizer, TrainScene,
    Trainable,
};

/// Which view-transform stages are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VtMode {
    /// Adaptive sampling followed by adaptive projection.
    #[default]
    Asap,
    /// Adaptive sampling only.
    AsOnly,
    /// Fixed-height sampling followed by adaptive projection.
    ApOnly,
    /// Fixed-height sampling only.
    Vanilla,
}

impl VtMode {
    pub const ALL: [VtMode; 4] = [VtMode::Asap, VtMode::AsOnly, VtMode::ApOnly, VtMode::Vanilla];

    pub fn adaptive_sampling(self) -> bool {
        matches!(self, VtMode::Asap | VtMode::AsOnly)
    }

    pub fn adaptive_projection(self) -> bool {
        matches!(self, VtMode::Asap | VtMode::ApOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            VtMode::Asap => "asap",
            VtMode::AsOnly => "as_only",
            VtMode::ApOnly => "ap_only",
            VtMode::Vanilla => "vanilla",
        }
    }
}

impl std::str::FromStr for VtMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        VtMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown view-transform mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub grid: BevGrid,
    pub channels: usize,
    pub n_heights: usize,
    pub n_scales: usize,
    pub groups: Vec<Vec<usize>>,
    pub queries_per_group: usize,
    pub n_points: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Length of the sinusoidal position encodings.
    pub pe_dim: usize,
    pub vt_mode: VtMode,
    pub query_init: QueryInit,
    pub attention_mode: AttentionMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let groups = GroupSpec::default();
        Self {
            grid: BevGrid::default(),
            channels: 32,
            n_heights: 4,
            n_scales: 2,
            groups: groups.groups,
            queries_per_group: groups.queries_per_group,
            n_points: 16,
            n_layers: 6,
            n_heads: 8,
            pe_dim: 32,
            vt_mode: VtMode::Asap,
            query_init: QueryInit::MixedGroupwise,
            attention_mode: AttentionMode::GeometryAware,
        }
    }
}

impl PipelineConfig {
    pub fn group_spec(&self) -> GroupSpec {
        GroupSpec {
            groups: self.groups.clone(),
            queries_per_group: self.queries_per_group,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            channels: self.channels,
            n_points: self.n_points,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            pe_dim: self.pe_dim,
            mode: self.attention_mode,
        }
    }

    pub fn n_queries(&self) -> usize {
        self.groups.len() * self.queries_per_group
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.channels < 3 {
            return Err(invalid(format!("need at least 3 channels, got {}", self.channels)));
        }
        if self.n_heights == 0 || self.n_scales == 0 {
            return Err(invalid("need at least one sampling height and one scale"));
        }
        self.group_spec().validate()?;
        if self.queries_per_group > self.grid.n_cells() {
            return Err(invalid(format!(
                "{} queries per group exceed {} BEV cells",
                self.queries_per_group,
                self.grid.n_cells()
            )));
        }
        self.decoder_config().validate()?;
        crate::decoder::square_cell_size(&self.grid)?;
        Ok(())
    }

    /// Heights used when sampling is not adaptive.
    pub fn fixed_heights(&self) -> Vec<f64> {
        evenly_spread_heights(&self.grid, self.n_heights)
    }
}

/// All trainable parameters of the detector.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: PipelineConfig,
    pub vt: AsapParams,
    /// `[C -> N_CLASSES]`
    pub heatmap_head: LinearMap,
    pub queries: QueryEmbedding,
    pub decoder: DecoderParams,
}

impl Model {
    pub fn new(config: PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let vt = AsapParams::init(c, config.n_heights, config.n_scales, &mut rng);
        let mut heatmap_head = LinearMap::random(N_CLASSES, c, 0.1, &mut rng);
        heatmap_head.bias.fill(-2.0);
        let queries = QueryEmbedding::new(config.query_init, &config.group_spec(), c, &config.grid, &mut rng);
        let decoder = DecoderParams::new(config.decoder_config(), &mut rng)?;
        Ok(Self {
            config,
            vt,
            heatmap_head,
            queries,
            decoder,
        })
    }

    /// Every parameter zero.
    pub fn zeros(config: PipelineConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.zero_();
        Ok(m)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_();
        z
    }
}

impl ParamSet for Model {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = nest("vt", self.vt.tensors());
        v.extend(nest("heatmap_head", self.heatmap_head.tensors()));
        v.extend(nest("queries", self.queries.tensors()));
        v.extend(nest("decoder", self.decoder.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = nest_mut("vt", self.vt.tensors_mut());
        v.extend(nest_mut("heatmap_head", self.heatmap_head.tensors_mut()));
        v.extend(nest_mut("queries", self.queries.tensors_mut()));
        v.extend(nest_mut("decoder", self.decoder.tensors_mut()));
        v
    }
}

/// Sensor inputs of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInputs {
    pub lidar: Tensor,
    pub cameras: Vec<CameraModel>,
    pub pyramids: Vec<FeaturePyramid>,
}

impl SceneInputs {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        Ok(Self {
            lidar: rasterize_lidar_bev(scene),
            cameras: scene.cameras.clone(),
            pyramids: render_camera_features(scene)?,
        })
    }

    pub fn views(&self) -> Result<CameraViews<'_>> {
        CameraViews::new(&self.cameras, &self.pyramids)
    }
}

/// Camera-branch BEV features of the configured view-transform mode.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraBev {
    pub vt: VtOutput,
    /// Final camera BEV (after adaptive projection when enabled).
    pub bev: Tensor,
}

pub fn view_transform(model: &Model, inputs: &SceneInputs) -> Result<CameraBev> {
    let cfg = &model.config;
    let views = inputs.views()?;
    let vt = if cfg.vt_mode.adaptive_sampling() {
        adaptive_sample(&model.vt, &inputs.lidar, &views, &cfg.grid)?
    } else {
        vanilla_vt(&views, &cfg.grid, &cfg.fixed_heights())?
    };
    let bev = if cfg.vt_mode.adaptive_projection() {
        adaptive_project(&model.vt.kernel_gen, &vt.bev, &inputs.lidar)?
    } else {
        vt.bev.clone()
    };
    Ok(CameraBev { vt, bev })
}

pub fn fuse(model: &Model, camera: &CameraBev, inputs: &SceneInputs) -> Result<Tensor> {
    fuse_bev(&model.vt.fuse, &camera.bev, &inputs.lidar)
}

/// Heatmap logits, keypoints and initial queries.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Absent when queries do not depend on heatmaps.
    pub heatmap_logits: Option<Tensor>,
    pub keypoints: Vec<GroupKeypoints>,
    pub queries: Queries,
}

impl Selection {
    pub fn heatmaps(&self) -> Option<Tensor> {
        self.heatmap_logits.as_ref().map(|t| {
            let mut p = t.clone();
            for x in p.data_mut() {
                *x = sigmoid(*x);
            }
            p
        })
    }
}

pub fn select(model: &Model, bev_fuse: &Tensor, with_heatmaps: bool) -> Result<Selection> {
    let spec = model.config.group_spec();
    let uses = model.config.query_init.uses_heatmap();
    let logits = if uses || with_heatmaps {
        Some(heatmap_logits(&model.heatmap_head, bev_fuse)?)
    } else {
        None
    };
    let keypoints = match (&logits, uses) {
        (Some(l), true) => {
            let mut p = l.clone();
            for x in p.data_mut() {
                *x = sigmoid(*x);
            }
            topk_keypoints(&p, &spec)?
        }
        _ => Vec::new(),
    };
    let queries = init_queries(&model.queries, bev_fuse, &keypoints, &spec)?;
    Ok(Selection {
        heatmap_logits: logits,
        keypoints,
        queries,
    })
}

pub fn decode(model: &Model, selection: &Selection, bev_fuse: &Tensor) -> Result<DecoderRun> {
    decoder_forward(&model.decoder, &selection.queries, bev_fuse, &model.config.grid)
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub camera: CameraBev,
    pub bev_fuse: Tensor,
    pub selection: Selection,
    pub decoder: DecoderRun,
    pub detections: DetectionOutput,
}

pub fn forward(model: &Model, inputs: &SceneInputs) -> Result<ForwardOutput> {
    let camera = view_transform(model, inputs)?;
    let bev_fuse = fuse(model, &camera, inputs)?;
    let selection = select(model, &bev_fuse, false)?;
    let decoder = decode(model, &selection, &bev_fuse)?;
    let detections = DetectionOutput::from_run(&decoder, &selection.queries, &model.config.grid);
    Ok(ForwardOutput {
        camera,
        bev_fuse,
        selection,
        decoder,
        detections,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Detection {
    pub query: usize,
    pub group: usize,
    pub label: ObjectClass,
    pub score: f64,
    pub scores: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: Box3d,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerDetections {
    pub layer: usize,
    pub is_final: bool,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectionOutput {
    pub layers: Vec<LayerDetections>,
}

impl DetectionOutput {
    pub fn from_run(run: &DecoderRun, queries: &Queries, grid: &BevGrid) -> Self {
        let n = run.layers.len();
        let layers = run
            .layers
            .iter()
            .enumerate()
            .map(|(li, out)| LayerDetections {
                layer: li,
                is_final: li + 1 == n,
                detections: out
                    .boxes
                    .iter()
                    .zip(&out.cls_logits)
                    .enumerate()
                    .map(|(q, (b, logits))| {
                        let scores: Vec<f64> = logits.iter().map(|x| sigmoid(*x)).collect();
                        let (best, score) = scores
                            .iter()
                            .enumerate()
                            .fold((0, f64::NEG_INFINITY), |acc, (i, s)| if *s > acc.1 { (i, *s) } else { acc });
                        let label = ObjectClass::from_index(best).unwrap_or(ObjectClass::Car);
                        Detection {
                            query: q,
                            group: queries.groups[q],
                            label,
                            score,
                            scores,
                            bbox: b.to_world(grid, label),
                        }
                    })
                    .collect(),
            })
            .collect();
        Self { layers }
    }

    pub fn final_layer(&self) -> Option<&LayerDetections> {
        self.layers.last()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_scene, SceneConfig};

    pub(crate) fn tiny_config() -> PipelineConfig {
        PipelineConfig {
            grid: BevGrid::square(16.0, 16),
            channels: 8,
            n_heights: 2,
            n_scales: 2,
            queries_per_group: 4,
            n_points: 4,
            n_layers: 2,
            n_heads: 2,
            pe_dim: 8,
            ..PipelineConfig::default()
        }
    }

    fn tiny_scene(cfg: &PipelineConfig, n_boxes: usize) -> Scene {
        let sc = SceneConfig {
            n_boxes,
            edge_margin: 2.0,
            min_range: 3.0,
            ..SceneConfig::default()
        };
        make_scene(0, &sc, &cfg.grid, cfg.channels).unwrap()
    }

    #[test]
    fn every_mode_combination_runs() {
        let base = tiny_config();
        let scene = tiny_scene(&base, 3);
        let inputs = SceneInputs::from_scene(&scene).unwrap();
        for vt_mode in VtMode::ALL {
            for query_init in [
                QueryInit::MixedGroupwise,
                QueryInit::MixedInstancewise,
                QueryInit::Learnable,
                QueryInit::Heatmap,
            ] {
                for attention_mode in [
                    AttentionMode::GeometryAware,
                    AttentionMode::DeformableCenter,
                    AttentionMode::DeformableScaledRotated,
                    AttentionMode::Standard,
                ] {
                    let cfg = PipelineConfig {
                        vt_mode,
                        query_init,
                        attention_mode,
                        ..base.clone()
                    };
                    let model = Model::new(cfg, 1).unwrap();
                    let out = forward(&model, &inputs).unwrap();
                    assert_eq!(out.detections.layers.len(), 2);
                    assert!(out.detections.layers[1].is_final && !out.detections.layers[0].is_final);
                    assert_eq!(out.detections.layers[1].detections.len(), 24);
                    assert!(out.bev_fuse.all_finite());
                }
            }
        }
    }

    #[test]
    fn asap_and_as_only_differ_by_projection_only() {
        let base = tiny_config();
        let scene = tiny_scene(&base, 3);
        let inputs = SceneInputs::from_scene(&scene).unwrap();
        let asap = Model::new(base.clone(), 4).unwrap();
        let mut as_only = asap.clone();
        as_only.config.vt_mode = VtMode::AsOnly;
        let a = view_transform(&asap, &inputs).unwrap();
        let b = view_transform(&as_only, &inputs).unwrap();
        assert_eq!(a.vt, b.vt);
        assert_eq!(b.bev, b.vt.bev);
        assert_eq!(a.bev, adaptive_project(&asap.vt.kernel_gen, &b.bev, &inputs.lidar).unwrap());
        assert_ne!(a.bev, b.bev);
    }

    #[test]
    fn learnable_queries_skip_heatmaps() {
        let cfg = PipelineConfig {
            query_init: QueryInit::Learnable,
            ..tiny_config()
        };
        let scene = tiny_scene(&cfg, 2);
        let inputs = SceneInputs::from_scene(&scene).unwrap();
        let model = Model::new(cfg, 2).unwrap();
        let out = forward(&model, &inputs).unwrap();
        assert!(out.selection.heatmap_logits.is_none());
        assert!(out.selection.keypoints.is_empty());
    }

    #[test]
    fn zero_model_on_empty_scene_scores_one_half() {
        let cfg = tiny_config();
        let scene = tiny_scene(&cfg, 0);
        let inputs = SceneInputs::from_scene(&scene).unwrap();
        let model = Model::zeros(cfg).unwrap();
        let out = forward(&model, &inputs).unwrap();
        for layer in &out.detections.layers {
            for d in &layer.detections {
                assert!(d.scores.iter().all(|s| *s == 0.5));
                assert!(d.bbox.center.iter().all(|x| x.is_finite()));
            }
        }
    }

    #[test]
    fn config_rejects_inconsistent_dims() {
        let bad = PipelineConfig {
            channels: 6,
            n_heads: 4,
            ..tiny_config()
        };
        assert!(Model::new(bad, 0).is_err());
        let bad = PipelineConfig {
            queries_per_group: 1000,
            ..tiny_config()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"channels": 8, "bogus": 1}"#;
        assert!(serde_json::from_str::<PipelineConfig>(json).is_err());
        let json = r#"{"vt_mode": "as_only", "attention_mode": "deformable_center"}"#;
        let cfg: PipelineConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.vt_mode, VtMode::AsOnly);
        assert_eq!(cfg.n_queries(), 900);
    }
}
