use texturegan::colorkit::{lab_to_srgb, srgb_to_lab, RgbImage};
use texturegan::infer::{ColorSource, SynthesisRequest};

use crate::{Backend, Rendered};

/// Deterministic stand-in for a trained model: pastes the patches onto a
/// white canvas and draws the sketch strokes on top.
#[derive(Debug, Clone)]
pub struct StubRenderer {
    pub resolution: usize,
}

impl Default for StubRenderer {
    fn default() -> Self {
        Self { resolution: 128 }
    }
}

impl Backend for StubRenderer {
    fn checkpoint_id(&self) -> &str {
        "stub"
    }

    fn resolution(&self) -> usize {
        self.resolution
    }

    fn render(&self, req: &SynthesisRequest) -> texturegan::Result<Rendered> {
        req.validate()?;
        let r = req.resolution;
        let mut canvas = RgbImage::filled(r, r, [1.0; 3]);
        for p in &req.texture_patches {
            let (w, h) = (p.image.width(), p.image.height());
            for y in p.rect.y..p.rect.y + p.rect.h {
                for x in p.rect.x..p.rect.x + p.rect.w {
                    canvas.set(x, y, p.image.get((x - p.rect.x) % w, (y - p.rect.y) % h));
                }
            }
        }
        for p in &req.color_patches {
            for y in p.rect.y..p.rect.y + p.rect.h {
                for x in p.rect.x..p.rect.x + p.rect.w {
                    let px = match &p.source {
                        ColorSource::Rgb(c) => c.map(|v| v as f32 / 255.0),
                        ColorSource::Image(img) => {
                            img.get((x - p.rect.x) % img.width(), (y - p.rect.y) % img.height())
                        }
                    };
                    // keep the underlying lightness, take the patch chroma
                    let under = srgb_to_lab(canvas.get(x, y).map(f64::from));
                    let over = srgb_to_lab(px.map(f64::from));
                    let (rgb, _) = lab_to_srgb([under[0], over[1], over[2]]);
                    canvas.set(x, y, rgb.map(|v| v as f32));
                }
            }
        }
        let sketch = req.sketch.resize(r, r);
        for y in 0..r {
            for x in 0..r {
                if sketch.get(x, y) {
                    canvas.set(x, y, [0.0; 3]);
                }
            }
        }
        Ok(Rendered {
            image: canvas,
            internal_resolution: r,
        })
    }
}
