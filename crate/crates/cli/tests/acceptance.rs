//! Release acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context};
use bevkit::decoder::loss::{focal_loss, gaussian_focal_loss, gaussian_focal_loss_logits, l1_box_loss};
use bevkit::decoder::AttentionMode;
use bevkit::pipeline::fit::final_box_l1;
use bevkit::pipeline::{
    fit_decoder, fit_generators, fuse, select, view_transform, DecoderExample, FitConfig, Model,
    Optimizer, PipelineConfig, SceneInputs, TrainScene, Trainable, VtMode,
};
use bevkit::query_select::gaussian_target;
use bevkit::scene::{make_scene, ray_smear_metric, SceneConfig};
use bevkit::verify::{self, Check, Suite};
use bevkit::BevGrid;

type Verdict = anyhow::Result<(bool, String)>;

const HELD_OUT: u64 = 20;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_bevkit")
}

fn checks(names: &[&str]) -> anyhow::Result<Vec<Check>> {
    names
        .iter()
        .map(|n| verify::run_check(n).with_context(|| format!("no check named {n}")))
        .collect()
}

fn summarize(checks: &[Check]) -> (bool, String) {
    let passed = checks.iter().all(|c| c.passed);
    let detail = checks
        .iter()
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect::<Vec<_>>()
        .join("; ");
    (passed, detail)
}

fn oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let (ok, detail) = summarize(&checks(&["oracle/adaptive_sample"])?);
    let t = start.elapsed();
    Ok((ok && t < Duration::from_secs(30), format!("{detail} in {:.1} s (limit 30 s)", t.as_secs_f64())))
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let results = verify::run(Suite::Grad);
    let t = start.elapsed();
    let failed: Vec<&str> = results.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    let detail = if failed.is_empty() {
        format!("{} checks pass", results.len())
    } else {
        format!("failing: {}", failed.join(", "))
    };
    Ok((
        failed.is_empty() && t < Duration::from_secs(60),
        format!("{detail} in {:.1} s (limit 60 s)", t.as_secs_f64()),
    ))
}

fn rotation_equivariance() -> Verdict {
    Ok(summarize(&checks(&["props/corner_offsets_rotate_with_heading", "props/layer_zero_uses_raw_offsets"])?))
}

fn pooling_invariants() -> Verdict {
    Ok(summarize(&checks(&["props/pooling_weights_sum_to_one", "props/one_hot_pooling_selects_one_sample"])?))
}

fn query_contracts() -> Verdict {
    Ok(summarize(&checks(&["props/default_queries", "oracle/topk"])?))
}

fn loss_fixtures() -> Verdict {
    let mut worst = 0.0f64;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());

    // focal, single positive with p = 0.3: -α (1-p)^γ ln p
    let logit = (0.3f64 / 0.7).ln();
    check(focal_loss(&[vec![logit]], &[vec![1.0]]).0, -0.25 * 0.49 * 0.3f64.ln());
    // focal, single negative with p = 0.8: -(1-α) p^γ ln(1-p)
    let logit = (0.8f64 / 0.2).ln();
    check(focal_loss(&[vec![logit]], &[vec![0.0]]).0, -0.75 * 0.64 * 0.2f64.ln());
    // focal averages over queries
    let l = focal_loss(&[vec![(0.3f64 / 0.7).ln()], vec![(0.8f64 / 0.2).ln()]], &[vec![1.0], vec![0.0]]).0;
    check(l, 0.5 * (-0.25 * 0.49 * 0.3f64.ln() - 0.75 * 0.64 * 0.2f64.ln()));

    // gaussian focal, single positive with p = 0.5: -(1-p)^2 ln p
    check(gaussian_focal_loss(&[0.5], &[1.0]), -0.25 * 0.5f64.ln());
    // one positive (p = 0.9) and one negative (p = 0.2, t = 0.5): -(1-t)^4 p^2 ln(1-p)
    let l = gaussian_focal_loss(&[0.9, 0.2], &[1.0, 0.5]);
    check(l, -0.01 * 0.9f64.ln() - 0.0625 * 0.04 * 0.8f64.ln());
    // two positives normalise by two
    let l = gaussian_focal_loss(&[0.5, 0.9, 0.0], &[1.0, 1.0, 0.0]);
    check(l, 0.5 * (-0.25 * 0.5f64.ln() - 0.01 * 0.9f64.ln()));
    // logits variant agrees at p = 0.5
    check(gaussian_focal_loss_logits(&[0.0], &[1.0]).0, -0.25 * 0.5f64.ln());

    // L1, single-coordinate difference d -> d / 8
    let mut pred = vec![0.0; 8];
    pred[5] = 0.6;
    check(l1_box_loss(&[pred], &[vec![0.0; 8]]).0, 0.6 / 8.0);
    let pred = vec![1.0, -2.0, 0.5, 0.0, 0.0, 0.0, 0.25, -0.25];
    check(l1_box_loss(&[pred], &[vec![0.0; 8]]).0, 4.0 / 8.0);

    Ok((worst <= 1e-9, format!("max deviation {worst:.2e} over 10 fixtures (tol 1e-9)")))
}

/// Held-out camera-BEV smear and heatmap loss per view-transform mode, after
/// fitting the generators and heatmap head on separate training scenes.
struct VtComparison {
    smear: BTreeMap<&'static str, Vec<f64>>,
    heatmap: BTreeMap<&'static str, Vec<f64>>,
    elapsed: Duration,
}

fn vt_comparison() -> anyhow::Result<VtComparison> {
    let start = Instant::now();
    let grid = BevGrid::square(32.0, 64);
    let channels = 32;
    let sc = SceneConfig::default();
    let scenes = |seeds: std::ops::Range<u64>| -> anyhow::Result<Vec<_>> {
        seeds.map(|s| Ok(make_scene(s, &sc, &grid, channels)?)).collect()
    };
    let train: Vec<TrainScene> = scenes(1000..1020)?
        .iter()
        .map(TrainScene::from_scene)
        .collect::<Result<_, _>>()?;
    let test = scenes(0..HELD_OUT)?;
    let fc = FitConfig {
        steps: 20,
        lr: 0.05,
        box_weight: 0.0,
        cls_weight: 0.0,
        train: Trainable {
            decoder: false,
            queries: false,
            ..Trainable::default()
        },
        ..FitConfig::default()
    };
    let mut smear = BTreeMap::new();
    let mut heatmap = BTreeMap::new();
    for mode in [VtMode::Asap, VtMode::AsOnly, VtMode::Vanilla] {
        let cfg = PipelineConfig {
            grid: grid.clone(),
            channels,
            vt_mode: mode,
            ..PipelineConfig::default()
        };
        let mut model = Model::new(cfg, 7)?;
        fit_generators(&mut model, &train, &fc)?;
        let (mut s, mut h) = (Vec::new(), Vec::new());
        for scene in &test {
            let inputs = SceneInputs::from_scene(scene)?;
            let camera = view_transform(&model, &inputs)?;
            s.push(ray_smear_metric(&camera.bev, scene)?);
            let bev = fuse(&model, &camera, &inputs)?;
            let logits = select(&model, &bev, true)?.heatmap_logits.context("heatmaps requested")?;
            let (target, _) = gaussian_target(&scene.boxes, &grid);
            h.push(gaussian_focal_loss_logits(logits.data(), target.data()).0);
        }
        smear.insert(mode.name(), s);
        heatmap.insert(mode.name(), h);
    }
    Ok(VtComparison {
        smear,
        heatmap,
        elapsed: start.elapsed(),
    })
}

fn misalignment(t: &VtComparison) -> Verdict {
    let (a, v) = (&t.smear["asap"], &t.smear["vanilla"]);
    let wins = a.iter().zip(v).filter(|(a, v)| a > v).count();
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let limit = Duration::from_secs(300);
    Ok((
        wins >= 18 && t.elapsed < limit,
        format!(
            "asap > vanilla in {wins}/{HELD_OUT} scenes (need 18), mean smear {:.3} vs {:.3}, {:.0} s (limit 300 s)",
            mean(a),
            mean(v),
            t.elapsed.as_secs_f64()
        ),
    ))
}

/// Mean held-out box L1 of the final decoder layer for both attention modes
/// on elongated-box scenes, with everything but the decoder shared.
fn attention_comparison() -> anyhow::Result<(Vec<f64>, Vec<f64>)> {
    let grid = BevGrid::square(32.0, 64);
    let channels = 16;
    let sc = SceneConfig {
        n_boxes: 6,
        ..SceneConfig::elongated()
    };
    let scene = |s: u64| -> anyhow::Result<TrainScene> { Ok(TrainScene::from_scene(&make_scene(s, &sc, &grid, channels)?)?) };
    let train = (1000..1040).map(scene).collect::<anyhow::Result<Vec<_>>>()?;
    let test = (0..HELD_OUT).map(scene).collect::<anyhow::Result<Vec<_>>>()?;
    let cfg = PipelineConfig {
        grid: grid.clone(),
        channels,
        queries_per_group: 8,
        n_layers: 2,
        n_points: 8,
        n_heads: 4,
        vt_mode: VtMode::AsOnly,
        ..PipelineConfig::default()
    };
    let mut base = Model::new(cfg.clone(), 7)?;
    let vt_fit = FitConfig {
        steps: 60,
        lr: 0.05,
        box_weight: 0.0,
        cls_weight: 0.0,
        train: Trainable {
            decoder: false,
            queries: false,
            ..Trainable::default()
        },
        ..FitConfig::default()
    };
    fit_generators(&mut base, &train[..4], &vt_fit)?;
    let dec_fit = FitConfig {
        steps: 300,
        lr: 1e-3,
        optimizer: Optimizer::Adam,
        heatmap_weight: 0.0,
        cls_weight: 0.0,
        height_weight: 0.0,
        train: Trainable::only_decoder(),
        clip_norm: Some(1.0),
        ..FitConfig::default()
    };
    let mut l1 = Vec::new();
    for mode in [AttentionMode::GeometryAware, AttentionMode::DeformableCenter] {
        let mut m = Model::new(
            PipelineConfig {
                attention_mode: mode,
                ..cfg.clone()
            },
            11,
        )?;
        m.vt = base.vt.clone();
        m.heatmap_head = base.heatmap_head.clone();
        let examples = |s: &[TrainScene]| -> anyhow::Result<Vec<_>> {
            s.iter().map(|t| Ok(DecoderExample::from_scene(&m, t)?)).collect()
        };
        let (tr, te) = (examples(&train)?, examples(&test)?);
        fit_decoder(&mut m, &tr, &dec_fit)?;
        l1.push(
            te.iter()
                .map(|e| final_box_l1(&m, e)?.context("no matched boxes"))
                .collect::<anyhow::Result<Vec<_>>>()?,
        );
    }
    let deformable = l1.pop().expect("two modes");
    Ok((l1.pop().expect("two modes"), deformable))
}

fn ablation_direction(t: &VtComparison) -> Verdict {
    let mean = |k: &str| t.heatmap[k].iter().sum::<f64>() / t.heatmap[k].len() as f64;
    let (van, aso, asap) = (mean("vanilla"), mean("as_only"), mean("asap"));
    // a ≥ b with a 1% tie allowance
    let at_least = |a: f64, b: f64| a >= b * (1.0 - 0.01);
    let vt_ordered = at_least(van, aso) && at_least(aso, asap);
    let (geo, def) = attention_comparison()?;
    let wins = geo.iter().zip(&def).filter(|(g, d)| g < d).count();
    let attention_wins = wins >= 15;
    Ok((
        vt_ordered && attention_wins,
        format!(
            "heatmap loss vanilla {van:.4} / as_only {aso:.4} / asap {asap:.4} ({}); \
             geometry_aware beats deformable_center in {wins}/{HELD_OUT} (need 15), mean L1 {:.3} vs {:.3}",
            if vt_ordered { "ordered" } else { "out of order" },
            geo.iter().sum::<f64>() / geo.len() as f64,
            def.iter().sum::<f64>() / def.len() as f64,
        ),
    ))
}

fn files(dir: &Path) -> anyhow::Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir)?.to_path_buf(), std::fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

fn cli(args: &[&str], threads: Option<&str>) -> anyhow::Result<std::process::Output> {
    let mut cmd = Command::new(bin());
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("BFK_THREADS", t),
        None => cmd.env_remove("BFK_THREADS"),
    };
    let out = cmd.output()?;
    if !out.status.success() {
        bail!("bevkit {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    }
    Ok(out)
}

fn determinism(tmp: &Path) -> Verdict {
    let config = tmp.join("determinism.json");
    std::fs::write(
        &config,
        r#"{
  "pipeline": {
    "grid": {"x_range": [-24, 24], "y_range": [-24, 24], "z_range": [-5, 3], "cells": [48, 48]},
    "channels": 8, "n_layers": 3, "n_points": 8, "n_heads": 2, "pe_dim": 8
  },
  "scene": {"n_boxes": 5},
  "seeds": [3, 4],
  "fit": {"train_seeds": [10, 11, 12], "config": {"steps": 3, "lr": 0.01}}
}"#,
    )?;
    let mut runs = Vec::new();
    for (i, threads) in ["1", "3", "1"].iter().enumerate() {
        let out = tmp.join(format!("det_{i}"));
        cli(&["run", config.to_str().context("utf-8 path")?, "--out", out.to_str().context("utf-8 path")?], Some(threads))?;
        runs.push(files(&out)?);
    }
    let first = &runs[0];
    ensure!(first.keys().any(|p| p.ends_with("detections.json")), "no detections.json written");
    let n_bfk = first.keys().filter(|p| p.extension().is_some_and(|e| e == "bfk")).count();
    ensure!(n_bfk > 0, "no BFK1 dumps written");
    let identical = runs.iter().all(|r| r == first);
    Ok((
        identical,
        format!(
            "{} files ({n_bfk} BFK1) {} across 3 runs with 1, 3 and 1 threads",
            first.len(),
            if identical { "byte-identical" } else { "differ" }
        ),
    ))
}

fn bench_sanity(tmp: &Path) -> Verdict {
    let config = tmp.join("bench.json");
    std::fs::write(&config, r#"{"bench": {"reps": 3, "modes": ["asap", "as_only", "vanilla"]}}"#)?;
    let out = tmp.join("bench_out");
    cli(&["bench", config.to_str().context("utf-8 path")?, "--out", out.to_str().context("utf-8 path")?], None)?;
    let text = std::fs::read_to_string(out.join("bench.csv"))?;
    let mut lines = text.lines();
    ensure!(lines.next() == Some("mode,stage,median_ms,p90_ms"), "unexpected CSV header");
    let mut vt = BTreeMap::new();
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f.len() == 4, "malformed row {line:?}");
        let (median, p90): (f64, f64) = (f[2].parse()?, f[3].parse()?);
        ensure!(median >= 0.0 && p90 >= median, "inconsistent timings in {line:?}");
        if f[1] == "vt" {
            vt.insert(f[0].to_string(), median);
        }
        rows += 1;
    }
    ensure!(rows == 12, "expected 12 rows, got {rows}");
    let ordered = vt["asap"] >= vt["as_only"] && vt["as_only"] >= vt["vanilla"];
    Ok((
        ordered,
        format!(
            "vt median asap {:.1} ms, as_only {:.1} ms, vanilla {:.1} ms",
            vt["asap"], vt["as_only"], vt["vanilla"]
        ),
    ))
}

fn report(id: usize, name: &str, verdict: Verdict, elapsed: Duration) -> bool {
    let (passed, detail) = verdict.unwrap_or_else(|e| (false, format!("error: {e:#}")));
    println!(
        "{} [{id}] {name}: {detail} [{:.1} s]",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    passed
}

fn timed(f: impl FnOnce() -> Verdict) -> (Verdict, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut results = Vec::new();
    let mut record = |id, name, (verdict, elapsed)| results.push(report(id, name, verdict, elapsed));

    record(1, "view-transform oracle equivalence", timed(oracle_equivalence));
    record(2, "gradient suite", timed(gradient_suite));
    record(3, "corner offset rotation equivariance", timed(rotation_equivariance));
    record(4, "softmax pooling invariants", timed(pooling_invariants));
    let vt = vt_comparison();
    match &vt {
        Ok(t) => {
            record(5, "misalignment ordering", (misalignment(t), t.elapsed));
            record(6, "ablation direction", timed(|| ablation_direction(t)));
        }
        Err(e) => {
            record(5, "misalignment ordering", (Err(anyhow::anyhow!("{e:#}")), Duration::ZERO));
            record(6, "ablation direction", (Err(anyhow::anyhow!("{e:#}")), Duration::ZERO));
        }
    }
    record(7, "query selection contracts", timed(query_contracts));
    record(8, "determinism", timed(|| determinism(tmp.path())));
    record(9, "loss formulas", timed(loss_fixtures));
    record(10, "bench harness sanity", timed(|| bench_sanity(tmp.path())));

    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
