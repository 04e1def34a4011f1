use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv_out, leaky_relu, Conv2d, InstanceNorm, Linear};
use super::params::{ParamBuilder, ParamStore};
use crate::error::{Error, Result};

const SLOPE: f64 = 0.2;

/// The lightness channel of a `(B, 3, H, W)` Lab batch in network units.
/// The only way to feed the global discriminator, so it can never see a or b.
#[derive(Debug, Clone)]
pub struct LChannel(Tensor);

impl LChannel {
    pub fn from_lab(lab: &Tensor) -> Result<Self> {
        let (_, c, _, _) = lab.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 Lab channels, got {c}")));
        }
        Ok(Self(lab.narrow(1, 0, 1)?))
    }

    /// Wraps a `(B, 1, H, W)` tensor that already holds only L.
    pub fn from_l(l: Tensor) -> Result<Self> {
        let (_, c, _, _) = l.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("expected 1 channel, got {c}")));
        }
        Ok(Self(l))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
    /// Also feed the sketch channel alongside L.
    pub conditional: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            conditional: false,
        }
    }
}

/// Strided patch discriminator on the L channel with least-squares outputs.
#[derive(Debug, Clone)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    params: ParamStore,
    first: Conv2d,
    blocks: Vec<(Conv2d, InstanceNorm)>,
    last: Conv2d,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.base_width == 0 {
            return Err(Error::Config("discriminator width must be positive".into()));
        }
        let mut params = ParamStore::new(dtype, device);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let w = cfg.base_width;
        let c_in = if cfg.conditional { 2 } else { 1 };
        let first = Conv2d::new(&mut pb, "conv0", c_in, w, 4, 2, 1, true)?;
        let specs = [(w, 2 * w, 2), (2 * w, 4 * w, 2), (4 * w, 8 * w, 1)];
        let mut blocks = Vec::new();
        for (i, (ci, co, stride)) in specs.into_iter().enumerate() {
            let name = format!("conv{}", i + 1);
            let conv = Conv2d::new(&mut pb, &name, ci, co, 4, stride, 1, false)?;
            let norm = InstanceNorm::new(&mut pb, &format!("norm{}", i + 1), co)?;
            blocks.push((conv, norm));
        }
        let last = Conv2d::new(&mut pb, "conv4", 8 * w, 1, 4, 1, 1, true)?;
        Ok(Self {
            cfg,
            params,
            first,
            blocks,
            last,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Side of the score grid for a square input of side `size`.
    pub fn grid_size(size: usize) -> usize {
        let s = conv_out(size, 4, 2, 1);
        let s = conv_out(s, 4, 2, 1);
        let s = conv_out(s, 4, 2, 1);
        let s = conv_out(s, 4, 1, 1);
        conv_out(s, 4, 1, 1)
    }

    /// `(B, 1, g, g)` realness scores. `sketch` is required exactly when the
    /// discriminator is conditional.
    pub fn forward(&self, l: &LChannel, sketch: Option<&Tensor>) -> Result<Tensor> {
        let x = match (self.cfg.conditional, sketch) {
            (true, Some(s)) => Tensor::cat(&[l.tensor(), s], 1)?,
            (false, None) => l.tensor().clone(),
            (true, None) => return Err(Error::Shape("conditional discriminator needs a sketch".into())),
            (false, Some(_)) => return Err(Error::Shape("unconditional discriminator takes no sketch".into())),
        };
        let mut h = leaky_relu(&self.first.forward(&x)?, SLOPE)?;
        for (conv, norm) in &self.blocks {
            h = leaky_relu(&norm.forward(&conv.forward(&h)?)?, SLOPE)?;
        }
        self.last.forward(&h)
    }
}

/// An ordered pair of equally sized L crops: generated (or candidate) first,
/// reference texture second. Each is `(B, 1, s, s)`.
#[derive(Debug, Clone)]
pub struct PatchPair {
    patch_g: Tensor,
    patch_t: Tensor,
}

impl PatchPair {
    pub fn new(patch_g: Tensor, patch_t: Tensor) -> Result<Self> {
        let (bg, cg, hg, wg) = patch_g.dims4()?;
        let dims_t = patch_t.dims4()?;
        if cg != 1 || (bg, cg, hg, wg) != dims_t {
            return Err(Error::Shape(format!(
                "patch pair shapes differ or are not single-channel: {:?} vs {:?}",
                patch_g.dims(),
                patch_t.dims()
            )));
        }
        Ok(Self { patch_g, patch_t })
    }

    pub fn generated(&self) -> &Tensor {
        &self.patch_g
    }

    pub fn reference(&self) -> &Tensor {
        &self.patch_t
    }

    /// Concatenates two batches of pairs.
    pub fn cat(pairs: &[&PatchPair]) -> Result<Self> {
        let g: Vec<&Tensor> = pairs.iter().map(|p| &p.patch_g).collect();
        let t: Vec<&Tensor> = pairs.iter().map(|p| &p.patch_t).collect();
        Self::new(Tensor::cat(&g, 0)?, Tensor::cat(&t, 0)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalDiscriminatorConfig {
    pub base_width: usize,
    pub hidden: usize,
}

impl Default for LocalDiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            hidden: 64,
        }
    }
}

/// Scores whether the two crops of a pair come from the same texture.
#[derive(Debug, Clone)]
pub struct LocalDiscriminator {
    cfg: LocalDiscriminatorConfig,
    params: ParamStore,
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
}

impl LocalDiscriminator {
    pub fn new(cfg: LocalDiscriminatorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.base_width == 0 || cfg.hidden == 0 {
            return Err(Error::Config("local discriminator widths must be positive".into()));
        }
        let mut params = ParamStore::new(dtype, device);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let w = cfg.base_width;
        let mut convs = Vec::new();
        for (i, (ci, co)) in [(2, w), (w, 2 * w), (2 * w, 4 * w)].into_iter().enumerate() {
            convs.push(Conv2d::new(&mut pb, &format!("conv{i}"), ci, co, 4, 2, 1, true)?);
        }
        let fc1 = Linear::new(&mut pb, "fc1", 4 * w, cfg.hidden)?;
        let fc2 = Linear::new(&mut pb, "fc2", cfg.hidden, 1)?;
        Ok(Self {
            cfg,
            params,
            convs,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &LocalDiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// One score per pair, shape `(B,)`.
    pub fn forward(&self, pair: &PatchPair) -> Result<Tensor> {
        let (_, _, h, _) = pair.patch_g.dims4()?;
        if h < 8 {
            return Err(Error::Shape(format!("patches of side {h} are too small")));
        }
        let mut x = Tensor::cat(&[&pair.patch_g, &pair.patch_t], 1)?;
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, SLOPE)?;
        }
        let pooled = x.mean(D::Minus1)?.mean(D::Minus1)?;
        let h = leaky_relu(&self.fc1.forward(&pooled)?, SLOPE)?;
        Ok(self.fc2.forward(&h)?.squeeze(1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_arithmetic_matches_forward() {
        let d = Discriminator::new(
            DiscriminatorConfig {
                base_width: 4,
                conditional: false,
            },
            0,
            DType::F32,
            &Device::Cpu,
        )
        .unwrap();
        for size in [64, 128] {
            let lab = Tensor::zeros((1, 3, size, size), DType::F32, &Device::Cpu).unwrap();
            let out = d.forward(&LChannel::from_lab(&lab).unwrap(), None).unwrap();
            let g = Discriminator::grid_size(size);
            assert_eq!(out.dims(), &[1, 1, g, g]);
        }
        assert_eq!(Discriminator::grid_size(128), 14);
        assert_eq!(Discriminator::grid_size(64), 6);
    }

    #[test]
    fn conditional_requires_sketch() {
        let d = Discriminator::new(
            DiscriminatorConfig {
                base_width: 4,
                conditional: true,
            },
            0,
            DType::F32,
            &Device::Cpu,
        )
        .unwrap();
        let l = LChannel::from_l(Tensor::zeros((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert!(d.forward(&l, None).is_err());
        let s = Tensor::ones((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(d.forward(&l, Some(&s)).is_ok());
    }

    #[test]
    fn local_scores_are_finite_and_deterministic() {
        let d = LocalDiscriminator::new(LocalDiscriminatorConfig::default(), 3, DType::F32, &Device::Cpu).unwrap();
        let a = Tensor::arange(0f32, 2.0 * 24.0 * 24.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 1, 24, 24))
            .unwrap()
            .affine(1.0 / 1152.0, 0.0)
            .unwrap();
        let pair = PatchPair::new(a.clone(), a.affine(-1.0, 1.0).unwrap()).unwrap();
        let s1 = d.forward(&pair).unwrap().to_vec1::<f32>().unwrap();
        let s2 = d.forward(&pair).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(s1.len(), 2);
        assert!(s1.iter().all(|v| v.is_finite()));
        assert_eq!(s1, s2);
    }

    #[test]
    fn pair_size_mismatch_is_shape_error() {
        let a = Tensor::zeros((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 1, 12, 12), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(PatchPair::new(a, b), Err(Error::Shape(_))));
    }
}
