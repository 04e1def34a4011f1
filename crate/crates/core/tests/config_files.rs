use std::path::PathBuf;

use texturegan::train::{ExtractorConfig, Mixing, Stage, TrainConfig};

const FINETUNE: &str = r#"
stage = "finetune"
resolution = 128
batch_size = 4
iterations = 2000
seed = 0
checkpoint_every = 500
mixing = "alternate"
out_dir = "runs/finetune"
data = "data/shards"
textures = "data/textures"

[weights]
adv = 1.0
style = 0.1
pixel = 10.0
color = 100.0
local_pixel = 10.0
local_adv = 1.0

[switches]
style = true
adversarial = true
local_texture = true

[extractor]
kind = "tiny"
"#;

#[test]
fn documented_finetune_config_parses() {
    let cfg = TrainConfig::from_toml(FINETUNE).unwrap();
    assert_eq!(cfg.stage, Stage::Finetune);
    assert_eq!(cfg.mixing, Mixing::Alternate);
    assert_eq!(cfg.textures, Some(PathBuf::from("data/textures")));
    assert!(matches!(cfg.extractor, ExtractorConfig::Tiny(_)));
    assert_eq!(cfg.local.s, 60);
}

#[test]
fn vgg_extractor_and_resolution_defaults() {
    let cfg = TrainConfig::from_toml(
        "resolution = 256\nmixing = \"bernoulli\"\n[extractor]\nkind = \"vgg19\"\npath = \"vgg19.safetensors\"\n",
    )
    .unwrap();
    assert_eq!(cfg.local.s, 100);
    assert_eq!(cfg.texture_patch.min_size, 48);
    assert_eq!(cfg.texture_patch.max_size, 128);
    assert_eq!(cfg.mixing, Mixing::Bernoulli);
    assert!(matches!(cfg.extractor, ExtractorConfig::Vgg19 { .. }));
}
