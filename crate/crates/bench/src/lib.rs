//! Shared fixtures for the criterion benches.

use bevkit::decoder::AttentionMode;
use bevkit::pipeline::{fuse, view_transform, Model, PipelineConfig, SceneInputs, VtMode};
use bevkit::scene::{make_scene, SceneConfig};
use bevkit::{BevGrid, Tensor};

/// A model and one rendered scene on an `n × n` grid of 0.6 m cells.
pub fn fixture(n: usize, channels: usize, vt_mode: VtMode, attention_mode: AttentionMode) -> (Model, SceneInputs) {
    let grid = BevGrid::square(0.3 * n as f64, n);
    let cfg = PipelineConfig {
        grid: grid.clone(),
        channels,
        vt_mode,
        attention_mode,
        ..PipelineConfig::default()
    };
    let scene = make_scene(0, &SceneConfig::default(), &grid, channels).expect("fixture scene");
    let inputs = SceneInputs::from_scene(&scene).expect("fixture inputs");
    (Model::new(cfg, 0).expect("fixture model"), inputs)
}

/// Fused BEV features the decoder benches start from.
pub fn fused(model: &Model, inputs: &SceneInputs) -> Tensor {
    let camera = view_transform(model, inputs).expect("view transform");
    fuse(model, &camera, inputs).expect("fusion")
}
