//! Feed-forward synthesis from a sketch plus user-placed texture and color
//! patches.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::colorkit::{lab_to_rgb, rgb_to_lab, srgb_to_lab, LabImage, RgbImage};
use crate::datagen::{texture_intensity, BinaryMap, InputStack, PatchPlacement};
use crate::error::{Error, Result};
use crate::nets::{generator_forward, Generator};
use crate::train::Checkpoint;

/// Smallest and largest accepted request resolution.
pub const MIN_RESOLUTION: usize = 16;
pub const MAX_RESOLUTION: usize = 1024;

/// Pixel rectangle on the request canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn placement(&self) -> PatchPlacement {
        PatchPlacement {
            x: self.x,
            y: self.y,
            w: self.w,
            h: self.h,
            overlap: 1.0,
        }
    }

    fn scaled(&self, from: usize, to: usize) -> Self {
        let s = |v: usize| (v * to + from / 2) / from;
        let (x, y) = (s(self.x), s(self.y));
        let x1 = s(self.x + self.w).clamp(x + 1, to.max(x + 1));
        let y1 = s(self.y + self.h).clamp(y + 1, to.max(y + 1));
        Self::new(x, y, x1 - x, y1 - y)
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

impl FromStr for Rect {
    type Err = Error;

    /// Parses `x,y,w,h`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<_> = s.split(',').map(|p| p.trim().parse::<usize>()).collect();
        match parts.as_slice() {
            [Ok(x), Ok(y), Ok(w), Ok(h)] => Ok(Self::new(*x, *y, *w, *h)),
            _ => Err(Error::Validation(format!("rectangle `{s}` is not of the form x,y,w,h"))),
        }
    }
}

/// Parses `#rrggbb` (the `#` is optional).
pub fn parse_hex_color(s: &str) -> Result<[u8; 3]> {
    let hex = s.strip_prefix('#').unwrap_or(s);
    if hex.len() != 6 || !hex.is_ascii() {
        return Err(Error::Validation(format!("color `{s}` is not of the form #rrggbb")));
    }
    let byte = |i: usize| {
        u8::from_str_radix(&hex[i..i + 2], 16)
            .map_err(|_| Error::Validation(format!("color `{s}` is not of the form #rrggbb")))
    };
    Ok([byte(0)?, byte(2)?, byte(4)?])
}

/// Splits a `value:x,y,w,h` command-line argument at its last colon.
pub fn parse_patch_arg(arg: &str) -> Result<(&str, Rect)> {
    let (value, rect) = arg
        .rsplit_once(':')
        .ok_or_else(|| Error::Validation(format!("`{arg}` is missing its :x,y,w,h rectangle")))?;
    Ok((value, rect.parse()?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TexturePatch {
    pub image: RgbImage,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColorSource {
    /// A flat sRGB color.
    Rgb([u8; 3]),
    /// Chroma taken from an image, tiled over the rectangle.
    Image(RgbImage),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorPatch {
    pub source: ColorSource,
    pub rect: Rect,
}

/// Everything a user supplies at test time. Rectangles are in the
/// coordinates of the `resolution`-sided output canvas; the sketch is
/// resized to that canvas if needed.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisRequest {
    pub sketch: BinaryMap,
    pub texture_patches: Vec<TexturePatch>,
    pub color_patches: Vec<ColorPatch>,
    pub resolution: usize,
}

impl SynthesisRequest {
    pub fn new(sketch: BinaryMap, resolution: usize) -> Self {
        Self {
            sketch,
            texture_patches: Vec::new(),
            color_patches: Vec::new(),
            resolution,
        }
    }

    /// Checks the resolution and every rectangle.
    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&r) {
            return Err(Error::Unsupported(format!(
                "resolution {r} is outside {MIN_RESOLUTION}..={MAX_RESOLUTION}"
            )));
        }
        let rects = self.texture_patches.iter().map(|p| ("texture", p.rect));
        for (i, (kind, rect)) in rects.chain(self.color_patches.iter().map(|p| ("color", p.rect))).enumerate() {
            if !rect.placement().fits(r, r) {
                return Err(Error::Validation(format!(
                    "{kind} patch {i} rectangle (x={}, y={}, w={}, h={}) lies outside the {r}x{r} canvas",
                    rect.x, rect.y, rect.w, rect.h
                )));
            }
        }
        Ok(())
    }

    /// The same request on a `to`-sided canvas.
    pub fn rescaled(&self, to: usize) -> Self {
        let from = self.resolution;
        if from == to {
            return self.clone();
        }
        let resize = |img: &RgbImage| {
            let w = (img.width() * to).div_ceil(from).max(1);
            let h = (img.height() * to).div_ceil(from).max(1);
            img.resize(w, h)
        };
        Self {
            sketch: self.sketch.resize(to, to),
            texture_patches: self
                .texture_patches
                .iter()
                .map(|p| TexturePatch {
                    image: resize(&p.image),
                    rect: p.rect.scaled(from, to),
                })
                .collect(),
            color_patches: self
                .color_patches
                .iter()
                .map(|p| ColorPatch {
                    source: match &p.source {
                        ColorSource::Rgb(c) => ColorSource::Rgb(*c),
                        ColorSource::Image(img) => ColorSource::Image(resize(img)),
                    },
                    rect: p.rect.scaled(from, to),
                })
                .collect(),
            resolution: to,
        }
    }
}

/// Builds the generator input. Swatches are tiled at their native scale
/// and later patches overwrite earlier ones where they overlap.
pub fn build_input(req: &SynthesisRequest) -> Result<InputStack> {
    req.validate()?;
    let r = req.resolution;
    let mut stack = InputStack::blank(r, r);
    stack.set_sketch(&req.sketch.resize(r, r))?;
    for patch in &req.texture_patches {
        let lab = rgb_to_lab(&patch.image)?;
        let (w, h) = (lab.width(), lab.height());
        stack.paste_texture(&patch.rect.placement(), |dx, dy| {
            texture_intensity(lab.l()[(dy % h) * w + dx % w])
        })?;
    }
    for patch in &req.color_patches {
        match &patch.source {
            ColorSource::Rgb(c) => {
                let lab = srgb_to_lab(c.map(|v| v as f64 / 255.0));
                let ab = [lab[1] as f32, lab[2] as f32];
                stack.paste_color(&patch.rect.placement(), |_, _| ab)?;
            }
            ColorSource::Image(img) => {
                let lab = rgb_to_lab(img)?;
                let (w, h) = (lab.width(), lab.height());
                stack.paste_color(&patch.rect.placement(), |dx, dy| {
                    let i = (dy % h) * w + dx % w;
                    [lab.a()[i], lab.b()[i]]
                })?;
            }
        }
    }
    Ok(stack)
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub image: RgbImage,
    pub lab: LabImage,
    pub latency: Duration,
    /// Resolution the generator actually ran at.
    pub internal_resolution: usize,
    /// Pixels whose Lab value fell outside the sRGB gamut.
    pub clamped: usize,
}

/// A loaded generator. Immutable after construction, so it can be shared
/// across threads.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    generator: Generator,
    checkpoint_id: String,
}

impl Synthesizer {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (ckpt, id) = Checkpoint::load(path)?;
        let generator = Generator::new(ckpt.meta.config.generator.clone(), 0, DType::F32, &Device::Cpu)?;
        generator.params().restore(&ckpt.group("g"))?;
        Ok(Self::from_generator(generator, id))
    }

    pub fn from_generator(generator: Generator, checkpoint_id: impl Into<String>) -> Self {
        Self {
            generator,
            checkpoint_id: checkpoint_id.into(),
        }
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    /// The resolution the generator was trained at.
    pub fn resolution(&self) -> usize {
        self.generator.config().resolution
    }

    /// One generator pass. Requests at other resolutions run on a rescaled
    /// copy and the result is resized back.
    pub fn synthesize(&self, req: &SynthesisRequest) -> Result<Synthesis> {
        let start = Instant::now();
        req.validate()?;
        let native = self.resolution();
        let input = build_input(&req.rescaled(native))?;
        let mut out = self.synthesize_stack(&input)?;
        out.image = out.image.resize(req.resolution, req.resolution);
        out.latency = start.elapsed();
        Ok(out)
    }

    /// One generator pass on an already assembled input at the native
    /// resolution.
    pub fn synthesize_stack(&self, input: &InputStack) -> Result<Synthesis> {
        let start = Instant::now();
        let native = self.resolution();
        if input.width() != native || input.height() != native {
            return Err(Error::Shape(format!(
                "input is {}x{}, the generator expects {native}x{native}",
                input.width(),
                input.height()
            )));
        }
        let lab = generator_forward(&self.generator, input)?;
        let (image, clamped) = lab_to_rgb(&lab);
        Ok(Synthesis {
            image,
            lab,
            latency: start.elapsed(),
            internal_resolution: native,
            clamped,
        })
    }
}
