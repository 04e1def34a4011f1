use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::SegmentationMask;
use crate::error::{Error, Result};

/// Minimum fraction of a patch that must lie on the foreground.
pub const MIN_OVERLAP: f64 = 0.70;

/// Factor applied to the patch side after each rejected attempt.
pub const SHRINK_FACTOR: f64 = 0.8;

/// A rectangle binding a texture or color crop to an image region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchPlacement {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    /// Fraction of the rectangle inside the foreground mask.
    pub overlap: f64,
}

impl PatchPlacement {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn intersects(&self, other: &PatchPlacement) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSamplerConfig {
    pub min_size: usize,
    pub max_size: usize,
    pub max_retries: usize,
}

impl PatchSamplerConfig {
    /// Side-length range scaled to the working resolution: [24, 64] at 128
    /// and [48, 128] at 256.
    pub fn for_resolution(resolution: usize) -> Self {
        Self {
            min_size: (resolution * 3 / 16).max(1),
            max_size: (resolution / 2).max(1),
            max_retries: 64,
        }
    }

    /// Fixed-size square crops, no shrinking.
    pub fn fixed(size: usize) -> Self {
        Self {
            min_size: size,
            max_size: size,
            max_retries: 64,
        }
    }
}

/// Draws a square placement whose overlap with the mask is at least 70%.
///
/// Each rejected attempt moves to a new random location and shrinks the side
/// by [`SHRINK_FACTOR`] (never below `min_size`). Once the random attempts
/// are exhausted, every position at the final size is scanned and one of the
/// valid ones is drawn; failing that, the mask cannot host a patch.
pub fn sample_patch_placement(
    mask: &SegmentationMask,
    rng_seed: u64,
    cfg: &PatchSamplerConfig,
) -> Result<PatchPlacement> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_with_rng(mask, &mut rng, cfg)
}

pub fn sample_with_rng(
    mask: &SegmentationMask,
    rng: &mut impl Rng,
    cfg: &PatchSamplerConfig,
) -> Result<PatchPlacement> {
    let (w, h) = (mask.width(), mask.height());
    if cfg.min_size == 0 || cfg.min_size > cfg.max_size {
        return Err(Error::Config(format!(
            "invalid patch size range [{}, {}]",
            cfg.min_size, cfg.max_size
        )));
    }
    let limit = w.min(h);
    if cfg.min_size > limit {
        return Err(Error::Sampling(format!(
            "minimum patch size {} exceeds the {w}x{h} image",
            cfg.min_size
        )));
    }
    if mask.map().count() == 0 {
        return Err(Error::Sampling("mask has no foreground".into()));
    }
    let max_size = cfg.max_size.min(limit);
    let mut size = rng.random_range(cfg.min_size..=max_size);
    for _ in 0..cfg.max_retries {
        let x = rng.random_range(0..=w - size);
        let y = rng.random_range(0..=h - size);
        let overlap = mask.overlap(x, y, size, size);
        if overlap >= MIN_OVERLAP {
            return Ok(PatchPlacement {
                x,
                y,
                w: size,
                h: size,
                overlap,
            });
        }
        size = ((size as f64 * SHRINK_FACTOR) as usize).max(cfg.min_size);
    }

    let size = cfg.min_size;
    let valid: Vec<(usize, usize)> = (0..=h - size)
        .flat_map(|y| (0..=w - size).map(move |x| (x, y)))
        .filter(|&(x, y)| mask.overlap(x, y, size, size) >= MIN_OVERLAP)
        .collect();
    if valid.is_empty() {
        return Err(Error::Sampling(format!(
            "no {size}x{size} placement overlaps the foreground by {MIN_OVERLAP}"
        )));
    }
    let (x, y) = valid[rng.random_range(0..valid.len())];
    Ok(PatchPlacement {
        x,
        y,
        w: size,
        h: size,
        overlap: mask.overlap(x, y, size, size),
    })
}
