use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Conv2d;
use super::params::{fingerprint, ParamBuilder, ParamStore};
use crate::colorkit::GrayTriple;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// relu3_2 on VGG-19.
    Mid,
    /// relu4_2 on VGG-19.
    Deep,
}

impl Tap {
    pub const ALL: [Tap; 2] = [Tap::Mid, Tap::Deep];
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mid" | "relu3_2" => Ok(Tap::Mid),
            "deep" | "relu4_2" => Ok(Tap::Deep),
            other => Err(Error::Config(format!("unknown feature tap `{other}`"))),
        }
    }
}

/// Activation maps keyed by tap, each `(B, N_l, h, w)`.
#[derive(Debug, Clone, Default)]
pub struct FeatureTaps(BTreeMap<Tap, Tensor>);

impl FeatureTaps {
    pub fn get(&self, tap: Tap) -> Option<&Tensor> {
        self.0.get(&tap)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tap, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A frozen feature network. Inputs are gray triples in Lab lightness units.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    fn dtype(&self) -> DType;

    fn channels(&self, tap: Tap) -> usize;

    /// Hash of the weights, recorded in checkpoints.
    fn fingerprint(&self) -> &str;

    fn extract(&self, gray: &GrayTriple, taps: &[Tap]) -> Result<FeatureTaps>;
}

fn check_input(gray: &GrayTriple, dtype: DType) -> Result<()> {
    let t = gray.tensor();
    let (_, c, _, _) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("feature input needs 3 channels, got {c}")));
    }
    if t.dtype() != dtype {
        return Err(Error::Shape(format!(
            "feature input is {:?}, extractor is {:?}",
            t.dtype(),
            dtype
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinyExtractorConfig {
    pub seed: u64,
    pub first_channels: usize,
    pub mid_channels: usize,
    pub deep_channels: usize,
}

impl Default for TinyExtractorConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            first_channels: 8,
            mid_channels: 8,
            deep_channels: 16,
        }
    }
}

/// Small fixed-seed random convolution stack with valid padding.
/// conv3 + relu, avgpool 2, conv3 + relu (mid), conv3 + relu (deep).
#[derive(Debug, Clone)]
pub struct TinyExtractor {
    cfg: TinyExtractorConfig,
    dtype: DType,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    fingerprint: String,
}

impl TinyExtractor {
    pub fn new(cfg: TinyExtractorConfig, dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new(dtype, device);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        // Biases stay small and positive so few units die at init.
        let conv = |pb: &mut ParamBuilder, name: &str, ci: usize, co: usize| -> Result<Conv2d> {
            let bound = (3.0 / (ci * 9) as f64).sqrt();
            let w = pb.uniform(&format!("{name}.weight"), &[co, ci, 3, 3], bound)?;
            let b = pb.constant(&format!("{name}.bias"), &[co], 0.05)?;
            Ok(Conv2d::from_tensors(w.detach(), Some(b.detach()), 1, 0))
        };
        let conv1 = conv(&mut pb, "conv1", 3, cfg.first_channels)?;
        let conv2 = conv(&mut pb, "conv2", cfg.first_channels, cfg.mid_channels)?;
        let conv3 = conv(&mut pb, "conv3", cfg.mid_channels, cfg.deep_channels)?;
        let fingerprint = store.fingerprint()?;
        Ok(Self {
            cfg,
            dtype,
            conv1,
            conv2,
            conv3,
            fingerprint,
        })
    }

    pub fn config(&self) -> &TinyExtractorConfig {
        &self.cfg
    }
}

impl FeatureExtractor for TinyExtractor {
    fn name(&self) -> &str {
        "tiny"
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn channels(&self, tap: Tap) -> usize {
        match tap {
            Tap::Mid => self.cfg.mid_channels,
            Tap::Deep => self.cfg.deep_channels,
        }
    }

    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn extract(&self, gray: &GrayTriple, taps: &[Tap]) -> Result<FeatureTaps> {
        check_input(gray, self.dtype)?;
        let x = gray.tensor().affine(1.0 / 50.0, -1.0)?;
        let h = self.conv1.forward(&x)?.relu()?.avg_pool2d(2)?;
        let mid = self.conv2.forward(&h)?.relu()?;
        let mut out = BTreeMap::new();
        if taps.contains(&Tap::Deep) {
            out.insert(Tap::Deep, self.conv3.forward(&mid)?.relu()?);
        }
        if taps.contains(&Tap::Mid) {
            out.insert(Tap::Mid, mid);
        }
        Ok(FeatureTaps(out))
    }
}

/// Indices into torchvision's `vgg19().features` for the convolutions up to
/// relu4_2. Pools follow indices 2, 7 and 16.
const VGG_CONVS: [usize; 10] = [0, 2, 5, 7, 10, 12, 14, 16, 19, 21];
const VGG_POOL_AFTER: [usize; 3] = [2, 7, 16];
const VGG_MID: usize = 12;
const VGG_DEEP: usize = 21;
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Pretrained VGG-19 trunk up to relu4_2, loaded from a safetensors file
/// using torchvision parameter names (`features.{i}.weight`, `features.{i}.bias`).
#[derive(Debug, Clone)]
pub struct Vgg19 {
    dtype: DType,
    convs: Vec<(usize, Conv2d)>,
    mean: Tensor,
    std: Tensor,
    fingerprint: String,
}

impl Vgg19 {
    pub fn load(path: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
        let mut convs = Vec::new();
        let mut named = Vec::new();
        for idx in VGG_CONVS {
            let get = |kind: &str| -> Result<Tensor> {
                let key = format!("features.{idx}.{kind}");
                tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("VGG weights lack `{key}`")))?
                    .to_dtype(dtype)
                    .map_err(Error::from)
            };
            let (w, b) = (get("weight")?, get("bias")?);
            named.push((format!("features.{idx}.weight"), w.clone()));
            named.push((format!("features.{idx}.bias"), b.clone()));
            convs.push((idx, Conv2d::from_tensors(w, Some(b), 1, 1)));
        }
        let fingerprint = fingerprint(named.iter().map(|(k, t)| (k.as_str(), t)))?;
        let mean = Tensor::new(&IMAGENET_MEAN, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        Ok(Self {
            dtype,
            convs,
            mean,
            std,
            fingerprint,
        })
    }
}

impl FeatureExtractor for Vgg19 {
    fn name(&self) -> &str {
        "vgg19"
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn channels(&self, tap: Tap) -> usize {
        match tap {
            Tap::Mid => 256,
            Tap::Deep => 512,
        }
    }

    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn extract(&self, gray: &GrayTriple, taps: &[Tap]) -> Result<FeatureTaps> {
        check_input(gray, self.dtype)?;
        let mut x = gray
            .tensor()
            .affine(1.0 / 100.0, 0.0)?
            .broadcast_sub(&self.mean)?
            .broadcast_div(&self.std)?;
        let mut out = BTreeMap::new();
        let last = if taps.contains(&Tap::Deep) { VGG_DEEP } else { VGG_MID };
        for (idx, conv) in &self.convs {
            x = conv.forward(&x)?.relu()?;
            if *idx == VGG_MID && taps.contains(&Tap::Mid) {
                out.insert(Tap::Mid, x.clone());
            }
            if *idx == VGG_DEEP && taps.contains(&Tap::Deep) {
                out.insert(Tap::Deep, x.clone());
            }
            if *idx == last {
                break;
            }
            if VGG_POOL_AFTER.contains(idx) {
                x = x.max_pool2d(2)?;
            }
        }
        Ok(FeatureTaps(out))
    }
}
