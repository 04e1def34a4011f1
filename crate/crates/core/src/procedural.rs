//! Procedural textures and product-like photos for desk-scale training and
//! tests: stripes, dots and checkers at random phase, scale and orientation,
//! and textured objects on a white background.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::colorkit::{rgb_to_lab, RgbImage};
use crate::datagen::TextureExample;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Stripes,
    Dots,
    Checkers,
}

impl PatternKind {
    pub const ALL: [PatternKind; 3] = [PatternKind::Stripes, PatternKind::Dots, PatternKind::Checkers];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pattern {
    pub kind: PatternKind,
    /// Repeat length in pixels.
    pub period: f32,
    pub phase: (f32, f32),
    /// Orientation in radians.
    pub angle: f32,
    pub fg: [f32; 3],
    pub bg: [f32; 3],
}

fn random_color(rng: &mut impl Rng, lo: f32, hi: f32) -> [f32; 3] {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

impl Pattern {
    pub fn random(kind: PatternKind, rng: &mut impl Rng, min_period: f32, max_period: f32) -> Self {
        Self {
            kind,
            period: rng.random_range(min_period..max_period),
            phase: (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
            angle: rng.random_range(0.0..std::f32::consts::PI),
            fg: random_color(rng, 0.05, 0.35),
            bg: random_color(rng, 0.45, 0.85),
        }
    }

    /// Foreground weight in `[0, 1]` at pixel `(x, y)`, 2x2 supersampled.
    pub fn weight(&self, x: usize, y: usize) -> f32 {
        let (s, c) = self.angle.sin_cos();
        let mut acc = 0.0;
        for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
            let (px, py) = (x as f32 + ox, y as f32 + oy);
            let u = (px * c + py * s) / self.period + self.phase.0;
            let v = (-px * s + py * c) / self.period + self.phase.1;
            let on = match self.kind {
                PatternKind::Stripes => u.rem_euclid(1.0) < 0.5,
                PatternKind::Checkers => (u.floor() as i64 + v.floor() as i64).rem_euclid(2) == 0,
                PatternKind::Dots => {
                    let du = u.rem_euclid(1.0) - 0.5;
                    let dv = v.rem_euclid(1.0) - 0.5;
                    du * du + dv * dv < 0.09
                }
            };
            acc += if on { 0.25 } else { 0.0 };
        }
        acc
    }

    pub fn color_at(&self, x: usize, y: usize) -> [f32; 3] {
        let t = self.weight(x, y);
        std::array::from_fn(|i| self.fg[i] * t + self.bg[i] * (1.0 - t))
    }

    pub fn render(&self, width: usize, height: usize) -> RgbImage {
        let mut img = RgbImage::filled(width, height, self.bg);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, self.color_at(x, y));
            }
        }
        img
    }
}

/// `count` square textures of side `size`, cycling through `kinds`, with
/// periods in `[4, 16)` px. Source ids are `<kind>-<index>`.
pub fn pattern_textures(
    kinds: &[PatternKind],
    count: usize,
    size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TextureExample>> {
    (0..count)
        .map(|i| {
            let kind = kinds[i % kinds.len()];
            let img = Pattern::random(kind, rng, 4.0, 16.0).render(size, size);
            Ok(TextureExample {
                texture: rgb_to_lab(&img)?,
                source_id: format!("{kind:?}-{i:04}").to_lowercase(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Silhouette {
    Ellipse,
    RoundedBox,
    Bag,
}

fn inside(shape: Silhouette, nx: f32, ny: f32) -> bool {
    // nx, ny in [-1, 1] relative to the object's bounding box.
    match shape {
        Silhouette::Ellipse => nx * nx + ny * ny <= 1.0,
        Silhouette::RoundedBox => {
            let (ax, ay) = ((nx.abs() - 0.7).max(0.0), (ny.abs() - 0.7).max(0.0));
            ax * ax + ay * ay <= 0.09
        }
        Silhouette::Bag => {
            // Trapezoid body, wider at the bottom.
            let half_width = 0.65 + 0.35 * (ny + 1.0) / 2.0;
            ny >= -0.6 && nx.abs() <= half_width
        }
    }
}

/// A textured object on a white background, roughly like a product shot.
pub fn synthetic_product(rng: &mut impl Rng, res: usize) -> RgbImage {
    let shape = [Silhouette::Ellipse, Silhouette::RoundedBox, Silhouette::Bag][rng.random_range(0..3)];
    let kind = PatternKind::ALL[rng.random_range(0..3)];
    let scale = res as f32 / 64.0;
    let pattern = Pattern::random(kind, rng, 4.0 * scale, 10.0 * scale);
    let half_w = rng.random_range(0.28..0.42) * res as f32;
    let half_h = rng.random_range(0.28..0.42) * res as f32;
    let cx = res as f32 / 2.0 + rng.random_range(-0.06..0.06) * res as f32;
    let cy = res as f32 / 2.0 + rng.random_range(-0.06..0.06) * res as f32;
    let mut img = RgbImage::filled(res, res, [1.0, 1.0, 1.0]);
    for y in 0..res {
        for x in 0..res {
            let nx = (x as f32 + 0.5 - cx) / half_w;
            let ny = (y as f32 + 0.5 - cy) / half_h;
            if inside(shape, nx, ny) {
                // Top lighting: darker toward the bottom edge.
                let shade = 1.0 - 0.25 * (ny + 1.0) / 2.0;
                let c = pattern.color_at(x, y);
                img.set(x, y, c.map(|v| (v * shade).min(0.9)));
            }
        }
    }
    img
}

/// `count` named synthetic photos.
pub fn synthetic_products(count: usize, rng: &mut impl Rng, res: usize) -> Vec<(String, RgbImage)> {
    (0..count)
        .map(|i| (format!("synthetic-{i:04}.png"), synthetic_product(rng, res)))
        .collect()
}
