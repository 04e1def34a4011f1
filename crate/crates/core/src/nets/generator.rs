use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{upsample2x, Conv2d, InstanceNorm};
use super::params::{ParamBuilder, ParamStore};
use crate::colorkit::LabImage;
use crate::datagen::{network_to_lab, InputStack, CHANNELS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub base_width: usize,
    /// Stride-2 downsampling blocks; the decoder mirrors them.
    pub n_down: usize,
    pub n_res: usize,
    /// Channel width stops growing at `base_width * max_width_mult`.
    pub max_width_mult: usize,
    pub skip_connections: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            base_width: 32,
            n_down: 3,
            n_res: 5,
            max_width_mult: 4,
            skip_connections: true,
        }
    }
}

impl GeneratorConfig {
    pub const INPUT_CHANNELS: usize = CHANNELS;
    pub const OUTPUT_CHANNELS: usize = 3;

    fn width(&self, level: usize) -> usize {
        self.base_width * (1usize << level).min(self.max_width_mult)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.max_width_mult == 0 {
            return Err(Error::Config("generator widths must be positive".into()));
        }
        let factor = 1usize << self.n_down;
        if self.resolution == 0 || !self.resolution.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by 2^{}",
                self.resolution, self.n_down
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    norm1: InstanceNorm,
    conv2: Conv2d,
    norm2: InstanceNorm,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv2d,
    norm: InstanceNorm,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

/// Encoder-decoder generator: a stem, stride-2 downsampling blocks, residual
/// blocks, nearest-upsampling blocks with skip connections from the mirrored
/// encoder resolution, and a tanh head producing normalized Lab.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    params: ParamStore,
    stem: Conv2d,
    down: Vec<Block>,
    res: Vec<ResBlock>,
    up: Vec<Block>,
    head: Conv2d,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(dtype, device);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let w0 = cfg.width(0);
        let stem = Conv2d::new(&mut pb, "stem", CHANNELS, w0, 3, 1, 1, true)?;
        let mut down = Vec::with_capacity(cfg.n_down);
        for i in 0..cfg.n_down {
            let (cin, cout) = (cfg.width(i), cfg.width(i + 1));
            down.push(pb.scoped(format!("down{i}"), |pb| {
                Ok(Block {
                    conv: Conv2d::new(pb, "conv", cin, cout, 3, 2, 1, false)?,
                    norm: InstanceNorm::new(pb, "norm", cout)?,
                })
            })?);
        }
        let bottom = cfg.width(cfg.n_down);
        let mut res = Vec::with_capacity(cfg.n_res);
        for i in 0..cfg.n_res {
            res.push(pb.scoped(format!("res{i}"), |pb| {
                Ok(ResBlock {
                    conv1: Conv2d::new(pb, "conv1", bottom, bottom, 3, 1, 1, false)?,
                    norm1: InstanceNorm::new(pb, "norm1", bottom)?,
                    conv2: Conv2d::new(pb, "conv2", bottom, bottom, 3, 1, 1, false)?,
                    norm2: InstanceNorm::new(pb, "norm2", bottom)?,
                })
            })?);
        }
        let mut up = Vec::with_capacity(cfg.n_down);
        for i in 0..cfg.n_down {
            // Level goes from n_down back to 0.
            let level = cfg.n_down - i;
            let skip = if cfg.skip_connections { cfg.width(level - 1) } else { 0 };
            let (cin, cout) = (cfg.width(level) + skip, cfg.width(level - 1));
            up.push(pb.scoped(format!("up{i}"), |pb| {
                Ok(Block {
                    conv: Conv2d::new(pb, "conv", cin, cout, 3, 1, 1, false)?,
                    norm: InstanceNorm::new(pb, "norm", cout)?,
                })
            })?);
        }
        let head = Conv2d::new(&mut pb, "head", w0, GeneratorConfig::OUTPUT_CHANNELS, 3, 1, 1, true)?;
        Ok(Self {
            cfg,
            params,
            stem,
            down,
            res,
            up,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `(B, 5, H, W)` input stack to `(B, 3, H, W)` Lab in network units
    /// (`L/50 - 1`, `a/128`, `b/128`), all within `[-1, 1]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = input.dims4()?;
        if c != CHANNELS || h != self.cfg.resolution || w != self.cfg.resolution {
            return Err(Error::Shape(format!(
                "generator expects (B, {CHANNELS}, {r}, {r}), got {:?}",
                input.dims(),
                r = self.cfg.resolution
            )));
        }
        let mut x = self.stem.forward(input)?.relu()?;
        let mut skips = Vec::with_capacity(self.down.len());
        for block in &self.down {
            skips.push(x.clone());
            x = block.forward(&x)?;
        }
        for block in &self.res {
            x = block.forward(&x)?;
        }
        for block in &self.up {
            x = upsample2x(&x)?;
            let skip = skips.pop().expect("one skip per level");
            if self.cfg.skip_connections {
                x = Tensor::cat(&[&x, &skip], 1)?;
            }
            x = block.forward(&x)?;
        }
        Ok(self.head.forward(&x)?.tanh()?)
    }
}

/// Packs input stacks into a `(B, 5, H, W)` tensor.
pub fn stack_inputs(inputs: &[&InputStack], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Shape("empty input batch".into()))?;
    let (w, h) = (first.width(), first.height());
    if inputs.iter().any(|s| s.width() != w || s.height() != h) {
        return Err(Error::Shape("input stacks differ in size".into()));
    }
    let data: Vec<f32> = inputs.iter().flat_map(|s| s.data().iter().copied()).collect();
    Ok(Tensor::from_vec(data, (inputs.len(), CHANNELS, h, w), device)?.to_dtype(dtype)?)
}

/// Runs the generator on one input stack and returns the Lab image.
pub fn generator_forward(g: &Generator, input: &InputStack) -> Result<LabImage> {
    let params = g.params();
    let x = stack_inputs(&[input], params.dtype(), params.device())?;
    let y = g.forward(&x)?;
    let planar = y.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    network_to_lab(input.width(), input.height(), &planar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            resolution: 16,
            base_width: 4,
            n_down: 2,
            n_res: 1,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn zero_input_gives_finite_output() {
        let g = Generator::new(small(), 0, DType::F32, &Device::Cpu).unwrap();
        let stack = InputStack::blank(16, 16);
        let lab = generator_forward(&g, &stack).unwrap();
        assert_eq!((lab.width(), lab.height()), (16, 16));
        assert!(lab.l().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn inference_is_deterministic() {
        let g = Generator::new(small(), 1, DType::F32, &Device::Cpu).unwrap();
        let stack = InputStack::blank(16, 16);
        assert_eq!(generator_forward(&g, &stack).unwrap(), generator_forward(&g, &stack).unwrap());
    }

    #[test]
    fn resolution_mismatch_is_shape_error() {
        let g = Generator::new(small(), 1, DType::F32, &Device::Cpu).unwrap();
        let stack = InputStack::blank(32, 32);
        assert!(matches!(generator_forward(&g, &stack), Err(Error::Shape(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Generator::new(small(), 5, DType::F32, &Device::Cpu).unwrap();
        let b = Generator::new(small(), 5, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(a.params().fingerprint().unwrap(), b.params().fingerprint().unwrap());
    }

    #[test]
    fn without_skips() {
        let cfg = GeneratorConfig {
            skip_connections: false,
            ..small()
        };
        let g = Generator::new(cfg, 0, DType::F32, &Device::Cpu).unwrap();
        let out = g.forward(&Tensor::zeros((2, 5, 16, 16), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(out.dims(), &[2, 3, 16, 16]);
    }
}
