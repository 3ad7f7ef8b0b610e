//! Synthetic shapes world, shards, metrics and the editing benchmark.

pub mod bench;
pub mod metrics;
pub mod scene;
pub mod shard;

pub use bench::{run_benchmark, Aggregate, BenchMode, BenchReport, SampleScore};
pub use metrics::{
    EIG_CLAMP, HIST_BINS, KEYWORD_DIM, PROXY_DIM,
    caption_keywords, cosine, directional_metrics, feature_similarity, frechet_distance, grid_features, image_features,
    image_keywords, pixel_metrics, text_features, Directional, FrechetStats, PixelMetrics, ProxyFeatures,
};
pub use scene::{
    apply_edit, random_edit, random_scene, read_grid, scene_match, Color, EditOp, EditTriple, Quadrant, QuadrantReading,
    SceneObject, SceneReading, SceneSpec, Shape, GRID,
};
pub use shard::{
    edit_sample, edit_triples, finetune_pool, inpaint_sample, make_dataset, parse_edit_shard, parse_t2i_shard, sample_rng,
    t2i_sample, t2i_scenes, write_dataset, EditExample, EditRecord, ShardKind, T2IExample, T2IRecord,
};
