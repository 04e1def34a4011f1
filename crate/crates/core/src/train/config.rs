use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::PatchSamplerConfig;
use crate::error::{Error, Result};
use crate::losses::{LocalConfig, LossSwitches, LossWeights, StyleReference};
use crate::nets::{DiscriminatorConfig, GeneratorConfig, LocalDiscriminatorConfig, TinyExtractorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// How fine-tuning interleaves ground-truth iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// Even iterations are ground truth, odd ones use external textures.
    #[default]
    Alternate,
    /// Fair coin per iteration.
    Bernoulli,
}

/// Where the color channels of a texture iteration come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureColor {
    /// The pasted texture's own ab under the texture placement.
    #[default]
    Texture,
    /// Keep the training example's color channels.
    Example,
    /// No color hints.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub g: f64,
    pub d_global: f64,
    pub d_local: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            g: 2e-4,
            d_global: 2e-4,
            d_local: 2e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorConfig {
    Tiny(TinyExtractorConfig),
    Vgg19 { path: PathBuf },
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig::Tiny(TinyExtractorConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub resolution: usize,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub mixing: Mixing,
    /// Output directory for checkpoints and metrics.
    pub out_dir: PathBuf,
    /// Directory written by datagen.
    pub data: PathBuf,
    /// Texture image directory (fine-tuning only).
    pub textures: Option<PathBuf>,
    pub texture_crops_per_image: usize,
    pub lr: LearningRates,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub switches: LossSwitches,
    pub local: LocalConfig,
    pub style_reference: StyleReference,
    /// Train the global discriminator on texture iterations too.
    pub global_d_on_texture: bool,
    pub texture_color: TextureColor,
    /// Texture placement sizes on texture iterations.
    pub texture_patch: PatchSamplerConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub local_discriminator: LocalDiscriminatorConfig,
    pub extractor: ExtractorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_resolution(128)
    }
}

impl TrainConfig {
    pub fn for_resolution(resolution: usize) -> Self {
        Self {
            stage: Stage::Pretrain,
            resolution,
            batch_size: 4,
            iterations: 1000,
            seed: 0,
            checkpoint_every: 500,
            mixing: Mixing::Alternate,
            out_dir: PathBuf::from("runs/default"),
            data: PathBuf::from("data/shards"),
            textures: None,
            texture_crops_per_image: 50,
            lr: LearningRates::default(),
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            switches: LossSwitches::default(),
            local: LocalConfig::for_resolution(resolution),
            style_reference: StyleReference::GroundTruth,
            global_d_on_texture: true,
            texture_color: TextureColor::Texture,
            texture_patch: PatchSamplerConfig::for_resolution(resolution),
            generator: GeneratorConfig {
                resolution,
                ..GeneratorConfig::default()
            },
            discriminator: DiscriminatorConfig::default(),
            local_discriminator: LocalDiscriminatorConfig::default(),
            extractor: ExtractorConfig::default(),
        }
    }

    /// Parses a TOML config. Omitted keys take the defaults for the given
    /// `resolution` (128 when absent); unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg_err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let user: toml::Table = toml::from_str(text).map_err(|e| cfg_err(&e))?;
        let resolution = match user.get("resolution") {
            None => 128,
            Some(v) => v
                .as_integer()
                .and_then(|r| usize::try_from(r).ok())
                .ok_or_else(|| Error::Config("resolution must be a positive integer".into()))?,
        };
        let defaults = toml::Table::try_from(Self::for_resolution(resolution)).map_err(|e| cfg_err(&e))?;
        let merged = merge(defaults, user);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| cfg_err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.resolution == 0 || self.batch_size == 0 {
            return bad("resolution and batch_size must be positive");
        }
        if self.generator.resolution != self.resolution {
            return bad("generator.resolution must equal resolution");
        }
        let rates = [self.lr.g, self.lr.d_global, self.lr.d_local];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return bad("learning rates must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.local.n == 0 || self.local.s == 0 || self.local.s > self.resolution {
            return bad("local crop count and size must be positive and fit the image");
        }
        if self.stage == Stage::Finetune && self.textures.is_none() {
            return bad("fine-tuning needs a texture directory");
        }
        self.weights.validate()?;
        self.generator.validate()
    }
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        let merged = match (base.remove(&k), v) {
            // a different `kind` is a different variant; its fields don't mix
            (Some(toml::Value::Table(b)), toml::Value::Table(o))
                if o.get("kind").is_none_or(|kind| b.get("kind") == Some(kind)) =>
            {
                toml::Value::Table(merge(b, o))
            }
            (_, v) => v,
        };
        base.insert(k, merged);
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let cfg = TrainConfig::for_resolution(64);
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(TrainConfig::from_toml("stage = \"pretrain\"\nbogus = 1\n"), Err(Error::Config(_))));
        let nested = "resolution = 128\n[weights]\nadv = 1.0\nnope = 2.0\n";
        assert!(matches!(TrainConfig::from_toml(nested), Err(Error::Config(_))));
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = TrainConfig::from_toml("iterations = 7\n[lr]\ng = 0.001\n").unwrap();
        assert_eq!(cfg.iterations, 7);
        assert_eq!(cfg.lr.g, 0.001);
        assert_eq!(cfg.lr.d_global, 2e-4);
    }

    #[test]
    fn resolution_drives_defaults() {
        let cfg = TrainConfig::from_toml("resolution = 64\n").unwrap();
        assert_eq!(cfg.generator.resolution, 64);
        assert_eq!(cfg.local, LocalConfig::for_resolution(64));
    }

    #[test]
    fn finetune_requires_textures() {
        assert!(TrainConfig::from_toml("stage = \"finetune\"\n").is_err());
    }
}
