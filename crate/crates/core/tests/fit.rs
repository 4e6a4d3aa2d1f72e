use bevkit::pipeline::{fit_generators, FitConfig, Model, PipelineConfig, TrainScene, VtMode};
use bevkit::scene::{make_scene, SceneConfig};
use bevkit::view_transform::generate_heights;
use bevkit::BevGrid;

fn height_errors(model: &Model, scene: &TrainScene) -> Vec<f64> {
    scene
        .height_targets
        .iter()
        .flat_map(|&(u, v, z)| {
            generate_heights(&model.vt, &scene.inputs.lidar, &model.config.grid, u, v)
                .unwrap()
                .into_iter()
                .map(move |h| (h - z).abs())
        })
        .collect()
}

#[test]
fn height_supervision_alone_learns_object_heights() {
    let grid = BevGrid::square(16.0, 32);
    let cfg = PipelineConfig {
        grid: grid.clone(),
        channels: 8,
        vt_mode: VtMode::AsOnly,
        n_layers: 1,
        ..PipelineConfig::default()
    };
    let sc = SceneConfig {
        n_boxes: 4,
        min_range: 3.0,
        edge_margin: 2.0,
        ..SceneConfig::default()
    };
    let scene = TrainScene::from_scene(&make_scene(3, &sc, &grid, 8).unwrap()).unwrap();
    assert!(!scene.height_targets.is_empty());
    let mut model = Model::new(cfg, 1).unwrap();
    let before = height_errors(&model, &scene);
    let report = fit_generators(&mut model, std::slice::from_ref(&scene), &FitConfig::heights_only(500, 0.005)).unwrap();
    let after = height_errors(&model, &scene);
    let worst = after.iter().cloned().fold(0.0, f64::max);
    assert!(report.trends_down(50));
    assert!(worst < 0.25, "worst height error {worst:.3} m (was {:.3} m)", before.iter().cloned().fold(0.0, f64::max));
}
