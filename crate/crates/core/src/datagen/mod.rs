//! Training-pair synthesis: foreground masks, sketches, patch placements,
//! the 5-channel input stack, texture ingestion and dataset shards.

mod example;
mod mask;
mod patch;
pub mod shard;
mod sketch;
mod textures;

pub use example::{
    color_value, derive_seed, lab_to_network, make_training_example, network_to_lab,
    texture_intensity, ExampleConfig, ExampleGenerator, InputStack, MaskMode, TrainingExample,
    CHANNELS, COLOR_A, COLOR_B, COLOR_SENTINEL, SKETCH, TEX_INTENSITY, TEX_MASK,
};
pub use mask::{
    compute_foreground_mask, fill_holes, BinaryMap, MaskSource, RegionLabels, SegmentationMask,
    DEFAULT_WHITE_THRESHOLD,
};
pub use patch::{
    sample_patch_placement, sample_with_rng, PatchPlacement, PatchSamplerConfig, MIN_OVERLAP,
    SHRINK_FACTOR,
};
pub use sketch::{
    gaussian_blur, generate_sketch, luminance, mask_edges, region_edges, xdog, EdgeDetector,
    SketchKind, SketchMethod, XdogParams,
};
pub use textures::{crops_from_image, ingest_texture_dir, list_images, TextureExample, TextureIngestConfig};
