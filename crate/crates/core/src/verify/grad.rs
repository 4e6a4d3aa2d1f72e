//! Finite-difference checks of every analytic backward pass, at four channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{judge, Outcome, GRAD_TOL};
use crate::decoder::boxes::BoxState;
use crate::decoder::cross::corner_offsets_backward;
use crate::decoder::loss::{focal_loss, gaussian_focal_loss_logits, l1_box_loss};
use crate::decoder::{corner_offsets, decoder_backward, decoder_forward, AttentionMode, DecoderConfig, DecoderParams, BOX_DIM};
use crate::geometry::{BevGrid, CameraModel, FeaturePyramid, PyramidLevel};
use crate::gradcheck::{
    compare_params, finite_diff_grad, finite_diff_params, overall_error, relative_error, GradReport,
};
use crate::labels::N_CLASSES;
use crate::pipeline::fit::{scene_loss, FitConfig, TrainScene};
use crate::pipeline::{Model, PipelineConfig, VtMode};
use crate::query_select::{heatmap_backward, heatmap_logits, Queries};
use crate::scene::{make_scene, SceneConfig};
use crate::tensor::{LinearMap, ParamSet, Tensor};
use crate::view_transform::{
    adaptive_project, adaptive_project_backward, adaptive_sample, adaptive_sample_backward, fuse_bev,
    fuse_bev_backward, AsapParams, CameraViews, SampleGrads,
};

pub(super) const CHECKS: &[(&str, fn() -> Outcome)] = &[
    ("grad/sampling_weights_and_heights", sampling_params),
    ("grad/sampling_features", sampling_features),
    ("grad/projection_kernel", projection),
    ("grad/fusion", fusion),
    ("grad/heatmap_head", heatmap_head),
    ("grad/corner_offsets", corner_path),
    ("grad/position_aware_mixing", mixing),
    ("grad/losses", losses),
    ("grad/decoder_geometry_aware", || decoder(AttentionMode::GeometryAware)),
    ("grad/decoder_deformable_center", || decoder(AttentionMode::DeformableCenter)),
    ("grad/decoder_deformable_scaled", || decoder(AttentionMode::DeformableScaledRotated)),
    ("grad/decoder_standard", || decoder(AttentionMode::Standard)),
    ("grad/pipeline_step_zero", pipeline_step_zero),
];

const C: usize = 4;
const EPS: f64 = 1e-6;

fn flat(v: Vec<f64>) -> Tensor {
    Tensor::from_fn(&[v.len()], |i| v[i])
}

fn tensor_report(name: &str, analytic: &Tensor, numeric: &Tensor) -> GradReport {
    GradReport {
        name: name.to_string(),
        rel_err: relative_error(analytic.data(), numeric.data()),
        analytic_norm: analytic.norm(),
        numeric_norm: numeric.norm(),
    }
}

struct VtFixture {
    grid: BevGrid,
    cameras: Vec<CameraModel>,
    pyramids: Vec<FeaturePyramid>,
    params: AsapParams,
    lidar: Tensor,
    probe: Tensor,
    height_probe: Tensor,
}

fn vt_fixture(seed: u64) -> VtFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = BevGrid::square(6.0, 4);
    let cameras: Vec<CameraModel> = (0..2)
        .map(|k| {
            CameraModel::looking_along(k as f64 * std::f64::consts::PI, [0.0, 0.0, 1.0], 12.0, (24, 16))
                .expect("valid camera")
        })
        .collect();
    let pyramids = cameras
        .iter()
        .map(|_| {
            FeaturePyramid::new(vec![
                PyramidLevel {
                    stride: 1,
                    map: Tensor::random_normal(&[C, 16, 24], 1.0, &mut rng),
                },
                PyramidLevel {
                    stride: 2,
                    map: Tensor::random_normal(&[C, 8, 12], 1.0, &mut rng),
                },
            ])
            .expect("valid pyramid")
        })
        .collect();
    let mut params = AsapParams::init(C, 2, 2, &mut rng);
    params.height_gen = LinearMap::random(2, C, 0.5, &mut rng);
    params.weight_gen = LinearMap::random(4, C, 1.0, &mut rng);
    VtFixture {
        lidar: Tensor::random_normal(&[C, 4, 4], 1.0, &mut rng),
        probe: Tensor::random_normal(&[C, 4, 4], 1.0, &mut rng),
        height_probe: Tensor::random_normal(&[2, 4, 4], 1.0, &mut rng),
        grid,
        cameras,
        pyramids,
        params,
    }
}

impl VtFixture {
    fn loss(&self, params: &AsapParams, pyramids: &[FeaturePyramid]) -> f64 {
        let views = CameraViews::new(&self.cameras, pyramids).expect("views");
        let out = adaptive_sample(params, &self.lidar, &views, &self.grid).expect("sample");
        out.bev.sum() + out.bev.dot(&self.probe) + out.per_cell_heights.dot(&self.height_probe)
    }

    fn analytic(&self) -> (AsapParams, Vec<FeaturePyramid>) {
        let views = CameraViews::new(&self.cameras, &self.pyramids).expect("views");
        let mut d_bev = self.probe.clone();
        for x in d_bev.data_mut() {
            *x += 1.0;
        }
        let mut grads = self.params.clone();
        grads.zero_();
        let mut d_pyr: Vec<FeaturePyramid> = self.pyramids.iter().map(FeaturePyramid::zeros_like).collect();
        adaptive_sample_backward(
            &self.params,
            &self.lidar,
            &views,
            &self.grid,
            &d_bev,
            Some(&self.height_probe),
            SampleGrads {
                params: &mut grads,
                pyramids: Some(&mut d_pyr),
            },
        )
        .expect("backward");
        (grads, d_pyr)
    }
}

fn sampling_params() -> Outcome {
    let f = vt_fixture(9);
    let (grads, _) = f.analytic();
    let numeric = finite_diff_params(&f.params, |p| f.loss(p, &f.pyramids), EPS).map_err(|e| e.to_string())?;
    let reports: Vec<GradReport> = compare_params(&grads, &numeric)
        .into_iter()
        .filter(|r| r.name.starts_with("height_gen") || r.name.starts_with("weight_gen"))
        .collect();
    judge(&reports)
}

fn sampling_features() -> Outcome {
    let f = vt_fixture(10);
    let (_, d_pyr) = f.analytic();
    let mut reports = Vec::new();
    for (ci, pyr) in f.pyramids.iter().enumerate() {
        for (li, level) in pyr.levels.iter().enumerate() {
            let numeric = finite_diff_grad(
                |m| {
                    let mut p = f.pyramids.clone();
                    p[ci].levels[li].map = m.clone();
                    f.loss(&f.params, &p)
                },
                &level.map,
                EPS,
            )
            .map_err(|e| e.to_string())?;
            reports.push(tensor_report(
                &format!("camera{ci}.level{li}"),
                &d_pyr[ci].levels[li].map,
                &numeric,
            ));
        }
    }
    judge(&reports)
}

fn projection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let kernel = LinearMap::random(C * C, C, 1.0, &mut rng);
    let bev_as = Tensor::random_normal(&[C, 3, 3], 1.0, &mut rng);
    let lidar = Tensor::random_normal(&[C, 3, 3], 1.0, &mut rng);
    let probe = Tensor::random_normal(&[C, 3, 3], 1.0, &mut rng);
    let loss = |k: &LinearMap, a: &Tensor| adaptive_project(k, a, &lidar).expect("project").dot(&probe);
    let mut grad = kernel.zeros_like();
    let d_as = adaptive_project_backward(&kernel, &bev_as, &lidar, &probe, &mut grad).map_err(|e| e.to_string())?;
    let mut reports = compare_params(
        &grad,
        &finite_diff_params(&kernel, |k| loss(k, &bev_as), EPS).map_err(|e| e.to_string())?,
    );
    let n_as = finite_diff_grad(|a| loss(&kernel, a), &bev_as, EPS).map_err(|e| e.to_string())?;
    reports.push(tensor_report("bev_as", &d_as, &n_as));
    judge(&reports)
}

fn fusion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let fuse = LinearMap::random(C, 2 * C, 1.0, &mut rng);
    let cam = Tensor::random_normal(&[C, 3, 3], 1.0, &mut rng);
    let lidar = Tensor::random_normal(&[C, 3, 3], 1.0, &mut rng);
    let probe = Tensor::random_normal(&[C, 3, 3], 1.0, &mut rng);
    let loss = |f: &LinearMap, c: &Tensor| fuse_bev(f, c, &lidar).expect("fuse").dot(&probe);
    let mut grad = fuse.zeros_like();
    let d_cam = fuse_bev_backward(&fuse, &cam, &lidar, &probe, &mut grad).map_err(|e| e.to_string())?;
    let mut reports = compare_params(
        &grad,
        &finite_diff_params(&fuse, |f| loss(f, &cam), EPS).map_err(|e| e.to_string())?,
    );
    let n_cam = finite_diff_grad(|c| loss(&fuse, c), &cam, EPS).map_err(|e| e.to_string())?;
    reports.push(tensor_report("bev_camera", &d_cam, &n_cam));
    judge(&reports)
}

fn heatmap_head() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let head = LinearMap::random(N_CLASSES, C, 1.0, &mut rng);
    let bev = Tensor::random_normal(&[C, 3, 4], 1.0, &mut rng);
    let target = Tensor::from_fn(&[N_CLASSES, 3, 4], |i| if i % 7 == 0 { 1.0 } else { rng.random_range(0.0..0.9) });
    let loss = |h: &LinearMap, b: &Tensor| {
        let logits = heatmap_logits(h, b).expect("logits");
        gaussian_focal_loss_logits(logits.data(), target.data()).0
    };
    let logits = heatmap_logits(&head, &bev).map_err(|e| e.to_string())?;
    let (_, g) = gaussian_focal_loss_logits(logits.data(), target.data());
    let d_logits = Tensor::new(logits.shape().to_vec(), g).map_err(|e| e.to_string())?;
    let mut grad = head.zeros_like();
    let d_bev = heatmap_backward(&head, &bev, &d_logits, &mut grad).map_err(|e| e.to_string())?;
    let mut reports = compare_params(
        &grad,
        &finite_diff_params(&head, |h| loss(h, &bev), EPS).map_err(|e| e.to_string())?,
    );
    let n_bev = finite_diff_grad(|b| loss(&head, b), &bev, EPS).map_err(|e| e.to_string())?;
    reports.push(tensor_report("bev", &d_bev, &n_bev));
    judge(&reports)
}

fn corner_path() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cell = 0.6;
    let mut reports = Vec::new();
    for trial in 0..5 {
        let raw = Tensor::random_normal(&[16], 1.0, &mut rng);
        let b = BoxState {
            center: [rng.random_range(2.0..8.0), rng.random_range(2.0..8.0)],
            z: -1.0,
            l: rng.random_range(1.0..6.0),
            w: rng.random_range(0.5..3.0),
            h: 1.5,
            theta: rng.random_range(-3.0..3.0),
        };
        let probe: Vec<[f64; 2]> = (0..8).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let score = |raw: &[f64], b: &BoxState| -> f64 {
            corner_offsets(raw, b, cell)
                .iter()
                .zip(&probe)
                .map(|(p, d)| p[0] * d[0] + p[1] * d[1])
                .sum()
        };
        let (d_raw, g) = corner_offsets_backward(raw.data(), &b, cell, &probe);
        let n_raw = finite_diff_grad(|r| score(r.data(), &b), &raw, EPS).map_err(|e| e.to_string())?;
        reports.push(tensor_report(
            &format!("trial{trial}.raw"),
            &flat(d_raw),
            &n_raw,
        ));
        let fields = flat(vec![b.center[0], b.center[1], b.l, b.w, b.theta]);
        let n_box = finite_diff_grad(
            |t| {
                let d = t.data();
                let bb = BoxState {
                    center: [d[0], d[1]],
                    l: d[2],
                    w: d[3],
                    theta: d[4],
                    ..b
                };
                score(raw.data(), &bb)
            },
            &fields,
            EPS,
        )
        .map_err(|e| e.to_string())?;
        reports.push(tensor_report(
            &format!("trial{trial}.box"),
            &flat(vec![g.center[0], g.center[1], g.l, g.w, g.theta]),
            &n_box,
        ));
    }
    judge(&reports)
}

struct DecoderFixture {
    params: DecoderParams,
    queries: Queries,
    bev: Tensor,
    grid: BevGrid,
    reg_probe: Vec<Vec<Vec<f64>>>,
    cls_probe: Vec<Vec<Vec<f64>>>,
}

fn decoder_fixture(mode: AttentionMode, seed: u64) -> DecoderFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DecoderConfig {
        channels: C,
        n_points: 4,
        n_layers: 2,
        n_heads: 2,
        pe_dim: 8,
        mode,
    };
    let params = DecoderParams::new(cfg, &mut rng).expect("valid decoder");
    let grid = BevGrid::square(8.0, 10);
    let bev = Tensor::random_normal(&[C, 10, 10], 1.0, &mut rng);
    let queries = Queries {
        features: (0..3).map(|_| Tensor::random_normal(&[C], 1.0, &mut rng).into_data()).collect(),
        ref_points: vec![[4.0, 5.0], [2.0, 7.0], [6.5, 3.0]],
        groups: vec![0, 0, 1],
    };
    let mut probe = |dim: usize| -> Vec<Vec<Vec<f64>>> {
        (0..2)
            .map(|_| (0..3).map(|_| Tensor::random_normal(&[dim], 1.0, &mut rng).into_data()).collect())
            .collect()
    };
    let reg_probe = probe(BOX_DIM);
    let cls_probe = probe(N_CLASSES);
    DecoderFixture {
        params,
        queries,
        bev,
        grid,
        reg_probe,
        cls_probe,
    }
}

impl DecoderFixture {
    fn loss(&self, p: &DecoderParams, q: &Queries, bev: &Tensor) -> f64 {
        let run = decoder_forward(p, q, bev, &self.grid).expect("decoder");
        let mut s = 0.0;
        for (l, out) in run.layers.iter().enumerate() {
            for i in 0..out.reg.len() {
                s += out.reg[i].iter().zip(&self.reg_probe[l][i]).map(|(a, b)| a * b).sum::<f64>();
                s += out.cls_logits[i].iter().zip(&self.cls_probe[l][i]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        s
    }

    fn reports(&self) -> Result<Vec<GradReport>, String> {
        let run = decoder_forward(&self.params, &self.queries, &self.bev, &self.grid).map_err(|e| e.to_string())?;
        let g = decoder_backward(&self.params, &self.bev, &self.grid, &run, &self.reg_probe, &self.cls_probe)
            .map_err(|e| e.to_string())?;
        let numeric = finite_diff_params(&self.params, |p| self.loss(p, &self.queries, &self.bev), EPS)
            .map_err(|e| e.to_string())?;
        let mut reports = compare_params(&g.params, &numeric);
        let n_bev = finite_diff_grad(|b| self.loss(&self.params, &self.queries, b), &self.bev, EPS)
            .map_err(|e| e.to_string())?;
        reports.push(tensor_report("bev", &g.d_bev, &n_bev));
        let flat = Tensor::new(vec![self.queries.len(), C], self.queries.features.concat()).map_err(|e| e.to_string())?;
        let n_q = finite_diff_grad(
            |t| {
                let mut q = self.queries.clone();
                q.features = t.data().chunks(C).map(|c| c.to_vec()).collect();
                self.loss(&self.params, &q, &self.bev)
            },
            &flat,
            EPS,
        )
        .map_err(|e| e.to_string())?;
        let d_q = Tensor::new(vec![self.queries.len(), C], g.d_queries.concat()).map_err(|e| e.to_string())?;
        reports.push(tensor_report("queries", &d_q, &n_q));
        Ok(reports)
    }
}

fn decoder(mode: AttentionMode) -> Outcome {
    judge(&decoder_fixture(mode, 17).reports()?)
}

fn mixing() -> Outcome {
    let reports: Vec<GradReport> = decoder_fixture(AttentionMode::GeometryAware, 18)
        .reports()?
        .into_iter()
        .filter(|r| r.name.contains(".mix."))
        .collect();
    judge(&reports)
}

fn losses() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut reports = Vec::new();

    let logits = Tensor::random_normal(&[4, N_CLASSES], 2.0, &mut rng);
    let targets: Vec<Vec<f64>> = (0..4)
        .map(|q| (0..N_CLASSES).map(|k| if (q + k) % 5 == 0 { 1.0 } else { 0.0 }).collect())
        .collect();
    let rows = |t: &Tensor| -> Vec<Vec<f64>> { t.data().chunks(N_CLASSES).map(|c| c.to_vec()).collect() };
    let (_, g) = focal_loss(&rows(&logits), &targets);
    let n = finite_diff_grad(|t| focal_loss(&rows(t), &targets).0, &logits, EPS).map_err(|e| e.to_string())?;
    reports.push(tensor_report("focal", &Tensor::new(vec![4, N_CLASSES], g.concat()).map_err(|e| e.to_string())?, &n));

    let hl = Tensor::random_normal(&[30], 2.0, &mut rng);
    let ht: Vec<f64> = (0..30).map(|i| if i % 6 == 0 { 1.0 } else { rng.random_range(0.0..0.95) }).collect();
    let (_, g) = gaussian_focal_loss_logits(hl.data(), &ht);
    let n = finite_diff_grad(|t| gaussian_focal_loss_logits(t.data(), &ht).0, &hl, EPS).map_err(|e| e.to_string())?;
    reports.push(tensor_report("gaussian_focal", &flat(g), &n));

    let pred = Tensor::random_normal(&[3, BOX_DIM], 1.0, &mut rng);
    let target: Vec<Vec<f64>> = (0..3).map(|_| Tensor::random_normal(&[BOX_DIM], 1.0, &mut rng).into_data()).collect();
    let prow = |t: &Tensor| -> Vec<Vec<f64>> { t.data().chunks(BOX_DIM).map(|c| c.to_vec()).collect() };
    let (_, g) = l1_box_loss(&prow(&pred), &target);
    let n = finite_diff_grad(|t| l1_box_loss(&prow(t), &target).0, &pred, EPS).map_err(|e| e.to_string())?;
    reports.push(tensor_report("l1", &Tensor::new(vec![3, BOX_DIM], g.concat()).map_err(|e| e.to_string())?, &n));
    judge(&reports)
}

/// The full training loss of a tiny detector (C = 4, 8×8 grid) against its
/// analytic gradient. Tensors whose gradient is below the rounding noise of
/// the differences are judged by absolute difference.
fn pipeline_step_zero() -> Outcome {
    let mut details = Vec::new();
    for vt_mode in [VtMode::Asap, VtMode::Vanilla] {
        let cfg = PipelineConfig {
            grid: BevGrid::square(8.0, 8),
            channels: C,
            n_heights: 2,
            n_scales: 2,
            queries_per_group: 2,
            n_points: 4,
            n_layers: 2,
            n_heads: 2,
            pe_dim: 8,
            vt_mode,
            ..PipelineConfig::default()
        };
        let sc = SceneConfig {
            n_boxes: 2,
            edge_margin: 1.5,
            min_range: 2.5,
            ..SceneConfig::default()
        };
        let scene = make_scene(1, &sc, &cfg.grid, C).map_err(|e| e.to_string())?;
        let scene = TrainScene::from_scene(&scene).map_err(|e| e.to_string())?;
        let model = Model::new(cfg, 5).map_err(|e| e.to_string())?;
        let fc = FitConfig {
            height_weight: 0.5,
            ..FitConfig::default()
        };
        let (_, g) = scene_loss(&model, &scene, &fc, true).map_err(|e| e.to_string())?;
        let g = g.ok_or("no gradient")?;
        let numeric = finite_diff_params(
            &model,
            |m| scene_loss(m, &scene, &fc, false).expect("loss").0.total,
            EPS,
        )
        .map_err(|e| e.to_string())?;
        let overall = overall_error(&g, &numeric);
        if overall >= GRAD_TOL {
            return Err(format!("{}: overall rel err {overall:.2e}", vt_mode.name()));
        }
        let bad: Vec<String> = compare_params(&g, &numeric)
            .into_iter()
            .filter(|r| !(r.passes(GRAD_TOL) || r.abs_diff() < 1e-8))
            .map(|r| format!("{}: {:.2e}", r.name, r.rel_err))
            .collect();
        if !bad.is_empty() {
            return Err(format!("{}: {}", vt_mode.name(), bad.join("; ")));
        }
        details.push(format!("{} overall {overall:.2e}", vt_mode.name()));
    }
    Ok(details.join(", "))
}
