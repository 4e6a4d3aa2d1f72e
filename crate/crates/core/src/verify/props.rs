//! Reference comparisons and invariants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{self, SamplingInstance};
use super::{ensure, Outcome};
use crate::bfk;
use crate::decoder::boxes::BoxState;
use crate::decoder::corner_offsets;
use crate::geometry::BevGrid;
use crate::labels::{ObjectClass, N_CLASSES};
use crate::ops::bilinear_sample;
use crate::pipeline::{forward, Model, PipelineConfig, SceneInputs};
use crate::query_select::{gaussian_target, init_queries, topk_keypoints, GroupSpec, QueryEmbedding, QueryInit};
use crate::scene::{footprint_cells, make_scene, ray_smear_metric, SceneConfig};
use crate::tensor::Tensor;
use crate::view_transform::{adaptive_sample, evenly_spread_heights, vanilla_vt, CameraViews};

pub(super) const ORACLE: &[(&str, fn() -> Outcome)] = &[
    ("oracle/adaptive_sample", adaptive_sample_matches),
    ("oracle/vanilla_sample", vanilla_matches),
    ("oracle/bilinear", bilinear_matches),
    ("oracle/topk", topk_matches),
];

pub(super) const PROPS: &[(&str, fn() -> Outcome)] = &[
    ("props/pooling_weights_sum_to_one", weights_sum_to_one),
    ("props/one_hot_pooling_selects_one_sample", one_hot_selects),
    ("props/heights_within_range", heights_in_range),
    ("props/corner_offsets_rotate_with_heading", rotation_equivariance),
    ("props/layer_zero_uses_raw_offsets", degenerate_box),
    ("props/default_queries", default_queries),
    ("props/gaussian_target_peaks", gaussian_peaks),
    ("props/ray_smear_bounds", smear_bounds),
    ("props/tensor_file_roundtrip", bfk_roundtrip),
    ("props/thread_count_invariance", thread_invariance),
];

/// Number of random instances compared against the sampling oracle.
pub const SAMPLING_INSTANCES: u64 = 50;
pub const SAMPLING_TOL: f64 = 1e-12;

fn adaptive_sample_matches() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..SAMPLING_INSTANCES {
        let inst = SamplingInstance::random(seed);
        let views = CameraViews::new(&inst.cameras, &inst.pyramids).map_err(|e| e.to_string())?;
        let got = adaptive_sample(&inst.params, &inst.lidar, &views, &inst.grid).map_err(|e| e.to_string())?;
        let want = oracle::adaptive_sample(&inst.params, &inst.lidar, &inst.cameras, &inst.pyramids, &inst.grid);
        let d = got.bev.max_abs_diff(&want);
        ensure(d <= SAMPLING_TOL, || format!("instance {seed}: max abs diff {d:e}"))?;
        worst = worst.max(d);
    }
    Ok(format!("{SAMPLING_INSTANCES} instances, max abs diff {worst:.1e}"))
}

fn vanilla_matches() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 100..120 {
        let inst = SamplingInstance::random(seed);
        let views = CameraViews::new(&inst.cameras, &inst.pyramids).map_err(|e| e.to_string())?;
        let fixed = evenly_spread_heights(&inst.grid, inst.params.n_heights);
        let got = vanilla_vt(&views, &inst.grid, &fixed).map_err(|e| e.to_string())?;
        let want = oracle::vanilla(
            &fixed,
            inst.params.n_scales,
            &inst.cameras,
            &inst.pyramids,
            &inst.grid,
            inst.lidar.dim(0),
        );
        let d = got.bev.max_abs_diff(&want);
        ensure(d <= SAMPLING_TOL, || format!("instance {seed}: max abs diff {d:e}"))?;
        worst = worst.max(d);
    }
    Ok(format!("20 instances, max abs diff {worst:.1e}"))
}

fn bilinear_matches() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let (c, h, w) = (rng.random_range(1..4), rng.random_range(1..9), rng.random_range(1..9));
        let map = Tensor::random_normal(&[c, h, w], 1.0, &mut rng);
        let x = rng.random_range(-1.0..w as f64 + 0.5);
        let y = rng.random_range(-1.0..h as f64 + 0.5);
        let got = bilinear_sample(&map, x, y);
        for ch in 0..c {
            let want = oracle::bilinear(&map, ch, x, y);
            ensure(want.is_some() == got.valid, || format!("trial {trial}: validity differs at ({x}, {y})"))?;
            let d = (want.unwrap_or(0.0) - got.value[ch]).abs();
            ensure(d <= 1e-12, || format!("trial {trial}: diff {d:e} at ({x}, {y})"))?;
            worst = worst.max(d);
        }
    }
    Ok(format!("200 lookups, max abs diff {worst:.1e}"))
}

pub const TOPK_HEATMAPS: u64 = 100;

fn topk_matches() -> Outcome {
    for seed in 0..TOPK_HEATMAPS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70_9C);
        let (h, w) = (rng.random_range(2..14), rng.random_range(2..14));
        let k = rng.random_range(1..=(h * w).min(20));
        let spec = if seed % 2 == 0 {
            GroupSpec::with_queries_per_group(k)
        } else {
            GroupSpec::new(vec![vec![0, 3], vec![5]], k).map_err(|e| e.to_string())?
        };
        let maps = oracle::random_heatmaps(seed, N_CLASSES, h, w);
        let got = topk_keypoints(&maps, &spec).map_err(|e| e.to_string())?;
        let want = oracle::topk(&maps, &spec);
        ensure(got == want, || format!("heatmap {seed} ({h}×{w}, k={k}) differs"))?;
    }
    Ok(format!("{TOPK_HEATMAPS} heatmaps identical"))
}

fn weights_sum_to_one() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..SAMPLING_INSTANCES {
        let inst = SamplingInstance::random(seed);
        let views = CameraViews::new(&inst.cameras, &inst.pyramids).map_err(|e| e.to_string())?;
        let out = adaptive_sample(&inst.params, &inst.lidar, &views, &inst.grid).map_err(|e| e.to_string())?;
        let (_, h, w) = out.per_cell_weights.chw().map_err(|e| e.to_string())?;
        for v in 0..h {
            for u in 0..w {
                let d = (out.per_cell_weights.cell(v, u).iter().sum::<f64>() - 1.0).abs();
                worst = worst.max(d);
            }
        }
    }
    ensure(worst <= 1e-9, || format!("weight sum off by {worst:e}"))?;
    Ok(format!("max |sum - 1| = {worst:.1e}"))
}

fn one_hot_selects() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut inst = SamplingInstance::random(seed);
        let n_w = inst.params.n_scales * inst.params.n_heights;
        let hot = seed as usize % n_w;
        inst.params.weight_gen.weight.fill(0.0);
        inst.params.weight_gen.bias.fill(0.0);
        inst.params.weight_gen.bias.data_mut()[hot] = 1e3;
        let views = CameraViews::new(&inst.cameras, &inst.pyramids).map_err(|e| e.to_string())?;
        let out = adaptive_sample(&inst.params, &inst.lidar, &views, &inst.grid).map_err(|e| e.to_string())?;
        let (_, h, w) = out.per_cell_weights.chw().map_err(|e| e.to_string())?;
        let one_hot = Tensor::from_fn(&[n_w, h, w], |i| if i / (h * w) == hot { 1.0 } else { 0.0 });
        let single = oracle::pool(
            &out.per_cell_heights,
            &one_hot,
            &inst.cameras,
            &inst.pyramids,
            &inst.grid,
            inst.lidar.dim(0),
        );
        let d = out.bev.max_abs_diff(&single);
        ensure(d <= 1e-9, || format!("instance {seed}: diff {d:e}"))?;
        worst = worst.max(d);
    }
    Ok(format!("20 instances, max abs diff {worst:.1e}"))
}

fn heights_in_range() -> Outcome {
    for seed in 0..20 {
        let mut inst = SamplingInstance::random(seed);
        for x in inst.params.height_gen.bias.data_mut() {
            *x *= 50.0;
        }
        let views = CameraViews::new(&inst.cameras, &inst.pyramids).map_err(|e| e.to_string())?;
        let out = adaptive_sample(&inst.params, &inst.lidar, &views, &inst.grid).map_err(|e| e.to_string())?;
        let [lo, hi] = inst.grid.z_range;
        ensure(out.per_cell_heights.data().iter().all(|z| (lo..=hi).contains(z)), || {
            format!("instance {seed}: height outside [{lo}, {hi}]")
        })?;
    }
    Ok("20 instances".into())
}

fn rot(phi: f64, p: [f64; 2]) -> [f64; 2] {
    let (s, c) = phi.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

pub const ROTATION_TRIALS: usize = 100;

fn rotation_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cell = 0.6;
    let mut worst = 0.0f64;
    for _ in 0..ROTATION_TRIALS {
        let raw: Vec<f64> = (0..2 * rng.random_range(1..9)).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b = BoxState {
            center: [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)],
            z: 0.0,
            l: rng.random_range(0.3..15.0),
            w: rng.random_range(0.3..4.0),
            h: 1.0,
            theta: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        };
        let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let turned = BoxState {
            theta: b.theta + phi,
            ..b
        };
        let base = corner_offsets(&raw, &b, cell);
        let moved = corner_offsets(&raw, &turned, cell);
        for (p, q) in base.iter().zip(&moved) {
            let r = rot(phi, [p[0] - b.center[0], p[1] - b.center[1]]);
            let d = (r[0] - (q[0] - b.center[0])).abs().max((r[1] - (q[1] - b.center[1])).abs());
            worst = worst.max(d);
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("{ROTATION_TRIALS} boxes, max deviation {worst:.1e}"))
}

fn degenerate_box() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..100 {
        let reference = [rng.random_range(0.0..50.0), rng.random_range(0.0..50.0)];
        let raw: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let pts = corner_offsets(&raw, &BoxState::point(reference), 0.6);
        for (k, p) in pts.iter().enumerate() {
            ensure(
                p[0] == reference[0] + raw[2 * k] && p[1] == reference[1] + raw[2 * k + 1],
                || format!("point {k} is {p:?}"),
            )?;
        }
    }
    Ok("100 point boxes, offsets exact".into())
}

fn default_queries() -> Outcome {
    let spec = GroupSpec::default();
    ensure(spec.n_groups() == 6 && spec.queries_per_group == 150, || {
        format!("{} groups of {}", spec.n_groups(), spec.queries_per_group)
    })?;
    let grid = BevGrid::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let emb = QueryEmbedding::new(QueryInit::MixedGroupwise, &spec, 32, &grid, &mut rng);
    let bev = Tensor::random_normal(&[32, grid.height(), grid.width()], 1.0, &mut rng);
    let maps = oracle::random_heatmaps(5, N_CLASSES, grid.height(), grid.width());
    let kps = topk_keypoints(&maps, &spec).map_err(|e| e.to_string())?;
    let q = init_queries(&emb, &bev, &kps, &spec).map_err(|e| e.to_string())?;
    ensure(q.len() == 900, || format!("{} queries", q.len()))?;
    for g in 0..6 {
        let rows: Vec<&Vec<f64>> = (0..q.len()).filter(|i| q.groups[*i] == g).map(|i| &q.features[i]).collect();
        ensure(rows.len() == 150, || format!("group {g} has {} queries", rows.len()))?;
        let first: Vec<u64> = rows[0].iter().map(|x| x.to_bits()).collect();
        ensure(
            rows.iter().all(|r| r.iter().map(|x| x.to_bits()).eq(first.iter().copied())),
            || format!("group {g} features differ"),
        )?;
    }
    Ok("900 queries, 6 groups of 150, identical per group".into())
}

fn gaussian_peaks() -> Outcome {
    let grid = BevGrid::square(20.0, 40);
    for seed in 0..10 {
        let scene = make_scene(seed, &SceneConfig::default(), &grid, 4).map_err(|e| e.to_string())?;
        let (t, skipped) = gaussian_target(&scene.boxes, &grid);
        ensure(skipped == 0, || format!("scene {seed}: {skipped} boxes skipped"))?;
        ensure(t.data().iter().all(|x| (0.0..=1.0).contains(x)), || "target outside [0, 1]".into())?;
        for b in &scene.boxes {
            let (u, v) = grid.nearest_cell(b.center[0], b.center[1]).ok_or("box outside grid")?;
            let x = t.at3(b.class.index(), v, u);
            ensure(x == 1.0, || format!("scene {seed}: peak {x} at box centre"))?;
        }
    }
    Ok("10 scenes".into())
}

fn smear_bounds() -> Outcome {
    let grid = BevGrid::square(16.0, 32);
    for seed in 0..10 {
        let scene = make_scene(seed, &SceneConfig::default(), &grid, 4).map_err(|e| e.to_string())?;
        let mut bev = Tensor::zeros(&[4, 32, 32]);
        for b in &scene.boxes {
            for (u, v) in footprint_cells(b, &grid) {
                bev.set_cell(v, u, &[1.0, 0.5, -0.5, 2.0]);
            }
        }
        let on = ray_smear_metric(&bev, &scene).map_err(|e| e.to_string())?;
        ensure((on - 1.0).abs() < 1e-12, || format!("footprint-only map scored {on}"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noisy = Tensor::random_normal(&[4, 32, 32], 1.0, &mut rng);
        let m = ray_smear_metric(&noisy, &scene).map_err(|e| e.to_string())?;
        ensure((0.0..=1.0).contains(&m), || format!("metric {m} outside [0, 1]"))?;
    }
    Ok("10 scenes".into())
}

fn bfk_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for rank in 1..=4 {
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..6)).collect();
        let t = Tensor::from_fn(&shape, |_| rng.random_range(-10.0f32..10.0) as f64);
        let back = bfk::decode(&bfk::encode(&t)).map_err(|e| e.to_string())?;
        ensure(back == t, || format!("rank {rank} tensor changed"))?;
    }
    ensure(bfk::decode(b"BFK2\0\0\0\0").is_err(), || "bad magic accepted".into())?;
    Ok("ranks 1-4".into())
}

fn thread_invariance() -> Outcome {
    let cfg = PipelineConfig {
        grid: BevGrid::square(12.0, 12),
        channels: 8,
        n_heights: 2,
        queries_per_group: 3,
        n_points: 4,
        n_layers: 2,
        n_heads: 2,
        pe_dim: 8,
        ..PipelineConfig::default()
    };
    let sc = SceneConfig {
        n_boxes: 3,
        classes: vec![ObjectClass::Car, ObjectClass::Pedestrian],
        edge_margin: 2.0,
        min_range: 3.0,
        ..SceneConfig::default()
    };
    let scene = make_scene(0, &sc, &cfg.grid, cfg.channels).map_err(|e| e.to_string())?;
    let inputs = SceneInputs::from_scene(&scene).map_err(|e| e.to_string())?;
    let model = Model::new(cfg, 3).map_err(|e| e.to_string())?;
    let run = |threads: usize| -> Result<(Tensor, Vec<Vec<Vec<f64>>>), String> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        pool.install(|| {
            let out = forward(&model, &inputs).map_err(|e| e.to_string())?;
            Ok((out.bev_fuse, out.decoder.layers.iter().map(|l| l.reg.clone()).collect()))
        })
    };
    let one = run(1)?;
    let many = run(3)?;
    ensure(one == many, || "outputs differ between 1 and 3 threads".into())?;
    Ok("1 vs 3 threads bit-identical".into())
}
