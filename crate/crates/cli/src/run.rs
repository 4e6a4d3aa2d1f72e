use std::fs;
use std::path::Path;

use anyhow::Context;
use bevkit::bfk;
use bevkit::decoder::loss::gaussian_focal_loss_logits;
use bevkit::labels::Box3d;
use bevkit::pipeline::{
    decode, fit_generators, fuse, run_box_l1, select, view_transform, DetectionOutput, FitReport, Model, SceneInputs,
    TrainScene,
};
use bevkit::query_select::gaussian_target;
use bevkit::scene::{make_scene, ray_smear_metric, Scene};
use bevkit::Tensor;
use serde::Serialize;

use crate::config::CliConfig;

#[derive(Serialize)]
struct SceneSummary {
    seed: u64,
    n_boxes: usize,
    /// Only defined when the scene has boxes.
    ray_smear: Option<f64>,
    heatmap_focal: Option<f64>,
    box_l1: Option<f64>,
    mean_validity: f64,
    max_score: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    n_queries: usize,
    n_groups: usize,
    n_layers: usize,
    vt_mode: &'a str,
    fit_final_loss: Option<f64>,
    scenes: Vec<SceneSummary>,
}

#[derive(Serialize)]
struct SceneRecord<'a> {
    seed: u64,
    boxes: &'a [Box3d],
}

#[derive(Serialize)]
struct Detections<'a> {
    seed: u64,
    #[serde(flatten)]
    output: &'a DetectionOutput,
}

#[derive(Serialize)]
struct SamplingPoints {
    layer: usize,
    /// `[x, y]` in BEV cell coordinates, all queries concatenated.
    points: Vec<[f64; 2]>,
}

fn scene(cfg: &CliConfig, seed: u64) -> anyhow::Result<Scene> {
    let p = &cfg.pipeline;
    make_scene(seed, &cfg.scene, &p.grid, p.channels).with_context(|| format!("generating scene {seed}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn dump(dir: &Path, name: &str, t: &Tensor) -> anyhow::Result<()> {
    let path = dir.join(format!("{name}.bfk"));
    bfk::save(t, &path).with_context(|| format!("writing {}", path.display()))
}

fn fit(cfg: &CliConfig, model: &mut Model) -> anyhow::Result<Option<FitReport>> {
    let Some(section) = &cfg.fit else {
        return Ok(None);
    };
    let scenes = section
        .train_seeds
        .iter()
        .map(|s| Ok(TrainScene::from_scene(&scene(cfg, *s)?)?))
        .collect::<anyhow::Result<Vec<_>>>()?;
    log::info!("fitting on {} scenes for {} steps", scenes.len(), section.config.steps);
    Ok(Some(fit_generators(model, &scenes, &section.config)?))
}

fn run_scene(model: &Model, scene: &Scene, dir: &Path) -> anyhow::Result<SceneSummary> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let inputs = SceneInputs::from_scene(scene)?;
    let camera = view_transform(model, &inputs)?;
    let bev_fuse = fuse(model, &camera, &inputs)?;
    let selection = select(model, &bev_fuse, true)?;
    let run = decode(model, &selection, &bev_fuse)?;
    let grid = &model.config.grid;
    let output = DetectionOutput::from_run(&run, &selection.queries, grid);

    write_json(&dir.join("scene.json"), &SceneRecord { seed: scene.seed, boxes: &scene.boxes })?;
    write_json(&dir.join("detections.json"), &Detections { seed: scene.seed, output: &output })?;
    let last = run.layers.len() - 1;
    let points = run.layers[last].points.iter().flatten().copied().collect();
    write_json(&dir.join("sampling_points.json"), &SamplingPoints { layer: last, points })?;

    dump(dir, "bev_lidar", &inputs.lidar)?;
    dump(dir, "bev_camera", &camera.bev)?;
    dump(dir, "bev_fuse", &bev_fuse)?;
    dump(dir, "heights", &camera.vt.per_cell_heights)?;
    dump(dir, "weights", &camera.vt.per_cell_weights)?;
    let validity = camera.vt.validity_fraction.clone().reshape(vec![1, grid.height(), grid.width()])?;
    dump(dir, "validity", &validity)?;
    if let Some(h) = selection.heatmaps() {
        dump(dir, "heatmaps", &h)?;
    }

    let heatmap_focal = match &selection.heatmap_logits {
        Some(logits) if !scene.boxes.is_empty() => {
            let (target, _) = gaussian_target(&scene.boxes, grid);
            Some(gaussian_focal_loss_logits(logits.data(), target.data()).0)
        }
        _ => None,
    };
    let ray_smear = if scene.boxes.is_empty() {
        None
    } else {
        Some(ray_smear_metric(&camera.bev, scene)?)
    };
    let valid = camera.vt.validity_fraction.data();
    let max_score = output
        .final_layer()
        .into_iter()
        .flat_map(|l| &l.detections)
        .map(|d| d.score)
        .fold(0.0, f64::max);
    Ok(SceneSummary {
        seed: scene.seed,
        n_boxes: scene.boxes.len(),
        ray_smear,
        heatmap_focal,
        box_l1: run_box_l1(&run, &selection.queries, &scene.boxes, grid)?,
        mean_validity: valid.iter().sum::<f64>() / valid.len() as f64,
        max_score,
    })
}

pub fn run(cfg: &CliConfig, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut model = Model::new(cfg.pipeline.clone(), cfg.model_seed)?;
    let report = fit(cfg, &mut model)?;
    if let Some(r) = &report {
        r.save_csv(out.join("loss_curve.csv"))?;
    }
    let mut scenes = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        log::info!("running scene {seed}");
        let s = scene(cfg, seed)?;
        scenes.push(run_scene(&model, &s, &out.join(format!("seed_{seed}")))?);
    }
    let summary = Summary {
        n_queries: cfg.pipeline.n_queries(),
        n_groups: cfg.pipeline.groups.len(),
        n_layers: cfg.pipeline.n_layers,
        vt_mode: cfg.pipeline.vt_mode.name(),
        fit_final_loss: report.as_ref().and_then(FitReport::final_loss),
        scenes,
    };
    write_json(&out.join("summary.json"), &summary)
}
