use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::mask::{BinaryMap, RegionLabels, SegmentationMask};
use crate::colorkit::{srgb_to_lab, RgbImage};
use crate::error::{Error, Result};

/// A learned edge detector (e.g. an HED-style network) used as a sketcher.
pub trait EdgeDetector: Send + Sync {
    fn detect(&self, photo: &RgbImage) -> Result<BinaryMap>;
}

/// Extended difference-of-Gaussians parameters, for intensities in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XdogParams {
    pub sigma: f32,
    pub k: f32,
    pub tau: f32,
    pub epsilon: f32,
    pub phi: f32,
    /// Soft XDoG responses below this value become strokes.
    pub threshold: f32,
}

impl Default for XdogParams {
    fn default() -> Self {
        Self {
            sigma: 0.8,
            k: 1.6,
            tau: 0.98,
            epsilon: -0.1,
            phi: 200.0,
            threshold: 0.5,
        }
    }
}

#[derive(Clone)]
pub enum SketchMethod {
    MaskCanny,
    Xdog(XdogParams),
    LearnedEdges(Arc<dyn EdgeDetector>),
}

impl fmt::Debug for SketchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SketchMethod::MaskCanny => f.write_str("MaskCanny"),
            SketchMethod::Xdog(p) => f.debug_tuple("Xdog").field(p).finish(),
            SketchMethod::LearnedEdges(_) => f.write_str("LearnedEdges(..)"),
        }
    }
}

/// Name-only form of [`SketchMethod`], used in configs and on the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchKind {
    MaskCanny,
    Xdog,
    LearnedEdges,
}

impl FromStr for SketchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask_canny" => Ok(SketchKind::MaskCanny),
            "xdog" => Ok(SketchKind::Xdog),
            "learned_edges" => Ok(SketchKind::LearnedEdges),
            other => Err(Error::Config(format!(
                "unknown sketch method `{other}` (expected mask_canny, xdog or learned_edges)"
            ))),
        }
    }
}

impl SketchKind {
    pub fn resolve(
        self,
        xdog: XdogParams,
        learned: Option<Arc<dyn EdgeDetector>>,
    ) -> Result<SketchMethod> {
        match self {
            SketchKind::MaskCanny => Ok(SketchMethod::MaskCanny),
            SketchKind::Xdog => Ok(SketchMethod::Xdog(xdog)),
            SketchKind::LearnedEdges => learned.map(SketchMethod::LearnedEdges).ok_or_else(|| {
                Error::Config("learned_edges requires an edge detector to be registered".into())
            }),
        }
    }
}

pub fn generate_sketch(
    photo: &RgbImage,
    mask: &SegmentationMask,
    method: &SketchMethod,
) -> Result<BinaryMap> {
    if photo.width() != mask.width() || photo.height() != mask.height() {
        return Err(Error::Shape(format!(
            "photo {}x{} and mask {}x{} are not aligned",
            photo.width(),
            photo.height(),
            mask.width(),
            mask.height()
        )));
    }
    match method {
        SketchMethod::MaskCanny => Ok(mask_edges(mask.map())),
        SketchMethod::Xdog(params) => Ok(xdog(&luminance(photo), photo.width(), photo.height(), params)),
        SketchMethod::LearnedEdges(detector) => {
            let edges = detector.detect(photo)?;
            if edges.width() != photo.width() || edges.height() != photo.height() {
                return Err(Error::Shape("edge detector changed the image size".into()));
            }
            Ok(edges)
        }
    }
}

/// Edge detection on a binary mask. With no blur on a two-level input the
/// gradient is non-zero only across the step, and thinning keeps the
/// foreground side, so the result is the 1-px inner boundary. The image
/// border is not an edge.
pub fn mask_edges(mask: &BinaryMap) -> BinaryMap {
    let (w, h) = (mask.width(), mask.height());
    BinaryMap::from_fn(w, h, |x, y| {
        if !mask.get(x, y) {
            return false;
        }
        (x > 0 && !mask.get(x - 1, y))
            || (x + 1 < w && !mask.get(x + 1, y))
            || (y > 0 && !mask.get(x, y - 1))
            || (y + 1 < h && !mask.get(x, y + 1))
    })
}

/// Boundaries between differently-labelled regions, drawn on the
/// foreground side.
pub fn region_edges(labels: &RegionLabels) -> BinaryMap {
    let (w, h) = (labels.width(), labels.height());
    BinaryMap::from_fn(w, h, |x, y| {
        let v = labels.get(x, y);
        if v == 0 {
            return false;
        }
        (x > 0 && labels.get(x - 1, y) != v)
            || (x + 1 < w && labels.get(x + 1, y) != v)
            || (y > 0 && labels.get(x, y - 1) != v)
            || (y + 1 < h && labels.get(x, y + 1) != v)
    })
}

/// Lab lightness scaled to `[0, 1]`.
pub fn luminance(photo: &RgbImage) -> Vec<f32> {
    photo
        .data()
        .chunks_exact(3)
        .map(|p| (srgb_to_lab([p[0] as f64, p[1] as f64, p[2] as f64])[0] / 100.0) as f32)
        .collect()
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(img: &[f32], w: usize, h: usize, sigma: f32) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * img[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

pub fn xdog(intensity: &[f32], w: usize, h: usize, p: &XdogParams) -> BinaryMap {
    let narrow = gaussian_blur(intensity, w, h, p.sigma);
    let wide = gaussian_blur(intensity, w, h, p.sigma * p.k);
    let data = narrow
        .iter()
        .zip(&wide)
        .map(|(g1, g2)| {
            let d = g1 - p.tau * g2;
            let e = if d >= p.epsilon {
                1.0
            } else {
                1.0 + (p.phi * (d - p.epsilon)).tanh()
            };
            u8::from(e < p.threshold)
        })
        .collect();
    BinaryMap::new(w, h, data).expect("sizes match")
}
