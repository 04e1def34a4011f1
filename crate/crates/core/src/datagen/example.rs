use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mask::{
    compute_foreground_mask, fill_holes, MaskSource, RegionLabels, SegmentationMask,
    DEFAULT_WHITE_THRESHOLD,
};
use super::patch::{sample_with_rng, PatchPlacement, PatchSamplerConfig};
use super::sketch::{generate_sketch, region_edges, EdgeDetector, SketchKind, SketchMethod, XdogParams};
use super::BinaryMap;
use crate::colorkit::{rgb_to_lab, LabImage, RgbImage, AB_LIMIT, L_MAX};
use crate::error::{Error, Result};

pub const CHANNELS: usize = 5;
pub const SKETCH: usize = 0;
pub const TEX_INTENSITY: usize = 1;
pub const TEX_MASK: usize = 2;
pub const COLOR_A: usize = 3;
pub const COLOR_B: usize = 4;

/// Value of the color channels outside every color placement. It lies
/// outside the valid chroma range and is never rescaled.
pub const COLOR_SENTINEL: f32 = -200.0;

/// Lightness as fed to the texture channel.
pub fn texture_intensity(l: f32) -> f32 {
    l / L_MAX
}

/// Chroma as fed to the color channels.
pub fn color_value(ab: f32) -> f32 {
    ab / AB_LIMIT
}

/// Lab image to the generator's output space: planar `(3, H, W)` with
/// L mapped to `[-1, 1]` and a, b divided by 128.
pub fn lab_to_network(lab: &LabImage) -> Vec<f32> {
    let mut out = Vec::with_capacity(lab.l().len() * 3);
    out.extend(lab.l().iter().map(|l| l / 50.0 - 1.0));
    out.extend(lab.a().iter().map(|a| a / AB_LIMIT));
    out.extend(lab.b().iter().map(|b| b / AB_LIMIT));
    out
}

/// Inverse of [`lab_to_network`].
pub fn network_to_lab(width: usize, height: usize, planar: &[f32]) -> Result<LabImage> {
    let n = width * height;
    if planar.len() != 3 * n {
        return Err(Error::Shape(format!(
            "expected {} network values, got {}",
            3 * n,
            planar.len()
        )));
    }
    let lab: Vec<f32> = planar
        .iter()
        .enumerate()
        .map(|(i, v)| if i < n { (v + 1.0) * 50.0 } else { v * AB_LIMIT })
        .collect();
    LabImage::from_planar(width, height, &lab)
}

/// The 5-channel conditioning image, planar and network-normalized:
/// sketch, texture intensity, texture mask, color a, color b.
#[derive(Debug, Clone, PartialEq)]
pub struct InputStack {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl InputStack {
    /// Empty stack: blank sketch, no texture, no color hints.
    pub fn blank(width: usize, height: usize) -> Self {
        let n = width * height;
        let mut data = vec![0f32; CHANNELS * n];
        data[COLOR_A * n..].iter_mut().for_each(|v| *v = COLOR_SENTINEL);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * width * height {
            return Err(Error::Shape(format!(
                "input stack of {width}x{height} needs {} values, got {}",
                CHANNELS * width * height,
                data.len()
            )));
        }
        let stack = Self {
            width,
            height,
            data,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub(crate) fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn set_sketch(&mut self, sketch: &BinaryMap) -> Result<()> {
        if sketch.width() != self.width || sketch.height() != self.height {
            return Err(Error::Shape("sketch does not match the input size".into()));
        }
        for (dst, src) in self.channel_mut(SKETCH).iter_mut().zip(sketch.data()) {
            *dst = *src as f32;
        }
        Ok(())
    }

    /// Removes every texture patch.
    pub fn clear_texture(&mut self) {
        self.channel_mut(TEX_INTENSITY).fill(0.0);
        self.channel_mut(TEX_MASK).fill(0.0);
    }

    /// Removes every color patch.
    pub fn clear_color(&mut self) {
        self.channel_mut(COLOR_A).fill(COLOR_SENTINEL);
        self.channel_mut(COLOR_B).fill(COLOR_SENTINEL);
    }

    /// Writes texture intensities (already normalized) into the placement.
    /// `value(dx, dy)` is sampled relative to the rectangle's corner.
    pub fn paste_texture(
        &mut self,
        p: &PatchPlacement,
        value: impl Fn(usize, usize) -> f32,
    ) -> Result<()> {
        self.check_rect(p)?;
        let w = self.width;
        for y in p.y..p.y + p.h {
            for x in p.x..p.x + p.w {
                let v = value(x - p.x, y - p.y);
                self.channel_mut(TEX_INTENSITY)[y * w + x] = v;
                self.channel_mut(TEX_MASK)[y * w + x] = 1.0;
            }
        }
        Ok(())
    }

    /// Writes raw chroma (Lab units) into the color channels.
    pub fn paste_color(
        &mut self,
        p: &PatchPlacement,
        ab: impl Fn(usize, usize) -> [f32; 2],
    ) -> Result<()> {
        self.check_rect(p)?;
        let w = self.width;
        for y in p.y..p.y + p.h {
            for x in p.x..p.x + p.w {
                let [a, b] = ab(x - p.x, y - p.y);
                self.channel_mut(COLOR_A)[y * w + x] = color_value(a);
                self.channel_mut(COLOR_B)[y * w + x] = color_value(b);
            }
        }
        Ok(())
    }

    fn check_rect(&self, p: &PatchPlacement) -> Result<()> {
        if !p.fits(self.width, self.height) {
            return Err(Error::Validation(format!(
                "placement (x={}, y={}, w={}, h={}) lies outside the {}x{} canvas",
                p.x, p.y, p.w, p.h, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Checks the structural invariants of the stack.
    pub fn validate(&self) -> Result<()> {
        let sketch = self.channel(SKETCH);
        let intensity = self.channel(TEX_INTENSITY);
        let tmask = self.channel(TEX_MASK);
        let (ca, cb) = (self.channel(COLOR_A), self.channel(COLOR_B));
        if sketch.iter().chain(tmask).any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Validation("sketch and texture mask must be binary".into()));
        }
        for i in 0..intensity.len() {
            let t = intensity[i];
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Validation(format!("texture intensity {t} outside [0, 1]")));
            }
            if tmask[i] == 0.0 && t != 0.0 {
                return Err(Error::Validation(
                    "texture intensity is non-zero outside the texture mask".into(),
                ));
            }
            let (a_off, b_off) = (ca[i] == COLOR_SENTINEL, cb[i] == COLOR_SENTINEL);
            if a_off != b_off {
                return Err(Error::Validation(
                    "color channels disagree on the sentinel".into(),
                ));
            }
            if !a_off && (ca[i].abs() > 1.0 || cb[i].abs() > 1.0) {
                return Err(Error::Validation("color value outside [-1, 1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    WhiteBackground,
    Provided,
    SketchFill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExampleConfig {
    pub resolution: usize,
    pub sketch: SketchKind,
    pub xdog: XdogParams,
    pub mask: MaskMode,
    pub white_threshold: f32,
    /// 1 or 2 texture patches per example.
    pub max_patches: usize,
    /// With `max_patches = 2`, the chance that an example gets two.
    pub two_patch_probability: f64,
    pub patch: PatchSamplerConfig,
    pub color_patch: bool,
}

impl ExampleConfig {
    pub fn for_resolution(resolution: usize) -> Self {
        Self {
            resolution,
            patch: PatchSamplerConfig::for_resolution(resolution),
            ..Self::default()
        }
    }
}

impl Default for ExampleConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            sketch: SketchKind::MaskCanny,
            xdog: XdogParams::default(),
            mask: MaskMode::WhiteBackground,
            white_threshold: DEFAULT_WHITE_THRESHOLD,
            max_patches: 1,
            two_patch_probability: 0.5,
            patch: PatchSamplerConfig::for_resolution(128),
            color_patch: true,
        }
    }
}

/// A synthesized (input, target) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub input: InputStack,
    /// Lab photo with the background whited out.
    pub target: LabImage,
    pub mask: SegmentationMask,
    pub source_id: String,
    pub texture_placements: Vec<PatchPlacement>,
    pub color_placement: Option<PatchPlacement>,
}

/// Per-example seed derived from the run seed and the example's identity.
pub fn derive_seed(global_seed: u64, source_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(source_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub struct ExampleGenerator {
    cfg: ExampleConfig,
    sketch: SketchMethod,
}

impl ExampleGenerator {
    pub fn new(cfg: ExampleConfig, learned: Option<Arc<dyn EdgeDetector>>) -> Result<Self> {
        if !(1..=2).contains(&cfg.max_patches) {
            return Err(Error::Config(format!(
                "max_patches must be 1 or 2, got {}",
                cfg.max_patches
            )));
        }
        if cfg.resolution == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if cfg.mask == MaskMode::SketchFill && cfg.sketch == SketchKind::MaskCanny {
            return Err(Error::Config(
                "sketch_fill masks need a sketch that does not depend on the mask".into(),
            ));
        }
        let sketch = cfg.sketch.resolve(cfg.xdog, learned)?;
        Ok(Self { cfg, sketch })
    }

    pub fn config(&self) -> &ExampleConfig {
        &self.cfg
    }

    pub fn generate(
        &self,
        photo: &RgbImage,
        labels: Option<&RegionLabels>,
        rng_seed: u64,
        source_id: &str,
    ) -> Result<TrainingExample> {
        let res = self.cfg.resolution;
        let photo = photo.resize(res, res);
        let labels = labels.map(|l| l.resize(res, res));

        let (mask, sketch) = match self.cfg.mask {
            MaskMode::WhiteBackground => {
                let source = MaskSource::WhiteBackground {
                    threshold: self.cfg.white_threshold,
                };
                let mask = compute_foreground_mask(&photo, &source, source_id)?;
                (mask.clone(), self.sketch_for(&photo, &mask, labels.as_ref())?)
            }
            MaskMode::Provided => {
                let labels = labels.as_ref().ok_or_else(|| {
                    Error::Config(format!("mask mode `provided` but `{source_id}` has no mask file"))
                })?;
                let mask =
                    compute_foreground_mask(&photo, &MaskSource::Provided(labels.clone()), source_id)?;
                (mask.clone(), self.sketch_for(&photo, &mask, Some(labels))?)
            }
            MaskMode::SketchFill => {
                let blank = SegmentationMask::new(BinaryMap::zeros(res, res));
                let sketch = generate_sketch(&photo, &blank, &self.sketch)?;
                let mask = compute_foreground_mask(
                    &photo,
                    &MaskSource::SketchFill(sketch.clone()),
                    source_id,
                )?;
                debug_assert_eq!(fill_holes(&sketch), *mask.map());
                (mask, sketch)
            }
        };

        let mut target = rgb_to_lab(&photo)?;
        for y in 0..res {
            for x in 0..res {
                if !mask.get(x, y) {
                    target.set(x, y, [L_MAX, 0.0, 0.0]);
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let texture_placements = self.texture_placements(&mask, labels.as_ref(), &mut rng, source_id)?;
        let color_placement = if self.cfg.color_patch {
            Some(sample_with_rng(&mask, &mut rng, &self.cfg.patch)?)
        } else {
            None
        };

        let mut input = InputStack::blank(res, res);
        input.set_sketch(&sketch)?;
        for p in &texture_placements {
            input.paste_texture(p, |dx, dy| texture_intensity(target.get(p.x + dx, p.y + dy)[0]))?;
        }
        if let Some(p) = &color_placement {
            input.paste_color(p, |dx, dy| {
                let lab = target.get(p.x + dx, p.y + dy);
                [lab[1], lab[2]]
            })?;
        }
        debug_assert!(input.validate().is_ok());

        Ok(TrainingExample {
            input,
            target,
            mask,
            source_id: source_id.to_string(),
            texture_placements,
            color_placement,
        })
    }

    fn sketch_for(
        &self,
        photo: &RgbImage,
        mask: &SegmentationMask,
        labels: Option<&RegionLabels>,
    ) -> Result<BinaryMap> {
        match (&self.sketch, labels) {
            (SketchMethod::MaskCanny, Some(labels)) => Ok(region_edges(labels)),
            _ => generate_sketch(photo, mask, &self.sketch),
        }
    }

    fn texture_placements(
        &self,
        mask: &SegmentationMask,
        labels: Option<&RegionLabels>,
        rng: &mut ChaCha8Rng,
        source_id: &str,
    ) -> Result<Vec<PatchPlacement>> {
        let two = self.cfg.max_patches == 2 && rng.random_bool(self.cfg.two_patch_probability);
        let regions = labels.map(|l| l.regions()).unwrap_or_default();
        let with_full_overlap = |p: PatchPlacement| PatchPlacement {
            overlap: mask.overlap(p.x, p.y, p.w, p.h),
            ..p
        };

        if regions.len() >= 2 {
            let labels = labels.expect("regions come from labels");
            let first_region = regions[rng.random_range(0..regions.len())];
            let first = sample_with_rng(&labels.region_mask(first_region), rng, &self.cfg.patch)
                .or_else(|_| sample_with_rng(mask, rng, &self.cfg.patch))?;
            let mut out = vec![with_full_overlap(first)];
            if two {
                let others: Vec<u8> = regions.iter().copied().filter(|r| *r != first_region).collect();
                let second_region = others[rng.random_range(0..others.len())];
                match sample_with_rng(&labels.region_mask(second_region), rng, &self.cfg.patch) {
                    Ok(p) => out.push(with_full_overlap(p)),
                    Err(e) => log::debug!("{source_id}: second texture patch skipped: {e}"),
                }
            }
            return Ok(out);
        }

        let first = sample_with_rng(mask, rng, &self.cfg.patch)?;
        let mut out = vec![first];
        if two {
            let rest = mask.without_rect(first.x, first.y, first.w, first.h);
            match sample_with_rng(&rest, rng, &self.cfg.patch) {
                Ok(p) => out.push(with_full_overlap(p)),
                Err(e) => log::debug!("{source_id}: second texture patch skipped: {e}"),
            }
        }
        Ok(out)
    }
}

/// White-background example with the configured sketcher.
pub fn make_training_example(
    photo: &RgbImage,
    rng_seed: u64,
    cfg: &ExampleConfig,
) -> Result<TrainingExample> {
    ExampleGenerator::new(cfg.clone(), None)?.generate(photo, None, rng_seed, "photo")
}
