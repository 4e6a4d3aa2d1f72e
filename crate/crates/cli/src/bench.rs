use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::Context;
use bevkit::pipeline::{decode, fuse, select, view_transform, Model, PipelineConfig, SceneInputs, VtMode};
use bevkit::scene::make_scene;

use crate::config::CliConfig;

pub const STAGES: [&str; 4] = ["vt", "fuse", "select", "decoder"];
pub const CSV_HEADER: &str = "mode,stage,median_ms,p90_ms";

#[derive(Clone, Debug, PartialEq)]
pub struct StageTiming {
    pub mode: VtMode,
    pub stage: &'static str,
    pub median_ms: f64,
    pub p90_ms: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Nearest-rank percentile.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn time_once(model: &Model, inputs: &SceneInputs) -> anyhow::Result<[Duration; 4]> {
    let t0 = Instant::now();
    let camera = view_transform(model, inputs)?;
    let t1 = Instant::now();
    let bev_fuse = fuse(model, &camera, inputs)?;
    let t2 = Instant::now();
    let selection = select(model, &bev_fuse, false)?;
    let t3 = Instant::now();
    std::hint::black_box(decode(model, &selection, &bev_fuse)?);
    let t4 = Instant::now();
    Ok([t1 - t0, t2 - t1, t3 - t2, t4 - t3])
}

/// Times each stage per mode. Scene generation and rendering happen before
/// the clock starts.
pub fn measure(cfg: &CliConfig) -> anyhow::Result<Vec<StageTiming>> {
    let p = &cfg.pipeline;
    let scene = make_scene(cfg.seeds[0], &cfg.scene, &p.grid, p.channels)?;
    let inputs = SceneInputs::from_scene(&scene)?;
    let mut rows = Vec::new();
    for &mode in &cfg.bench.modes {
        let model = Model::new(PipelineConfig { vt_mode: mode, ..p.clone() }, cfg.model_seed)?;
        for _ in 0..cfg.bench.warmup {
            time_once(&model, &inputs)?;
        }
        let mut samples = vec![Vec::with_capacity(cfg.bench.reps); STAGES.len()];
        for _ in 0..cfg.bench.reps {
            for (s, d) in samples.iter_mut().zip(time_once(&model, &inputs)?) {
                s.push(d.as_secs_f64() * 1e3);
            }
        }
        for (stage, mut s) in STAGES.into_iter().zip(samples) {
            s.sort_by(f64::total_cmp);
            rows.push(StageTiming {
                mode,
                stage,
                median_ms: median(&s),
                p90_ms: percentile(&s, 90.0),
            });
        }
        log::info!("benchmarked {}", mode.name());
    }
    Ok(rows)
}

pub fn to_csv(rows: &[StageTiming]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{:.4},{:.4}", r.mode.name(), r.stage, r.median_ms, r.p90_ms).expect("writing to a String");
    }
    out
}

pub fn bench(cfg: &CliConfig, out: &Path) -> anyhow::Result<()> {
    let csv = to_csv(&measure(cfg)?);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("bench.csv");
    fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    print!("{csv}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_percentile() {
        assert_eq!(median(&[1.0, 2.0, 9.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 4.0, 9.0]), 3.0);
        let s: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&s, 90.0), 9.0);
        assert_eq!(percentile(&[5.0, 7.0, 8.0], 90.0), 8.0);
    }

    #[test]
    fn csv_layout() {
        let rows = [StageTiming {
            mode: VtMode::AsOnly,
            stage: "vt",
            median_ms: 1.5,
            p90_ms: 2.0,
        }];
        assert_eq!(to_csv(&rows), "mode,stage,median_ms,p90_ms\nas_only,vt,1.5000,2.0000\n");
    }
}
