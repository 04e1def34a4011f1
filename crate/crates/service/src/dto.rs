//! Wire format of the synthesize endpoint.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use texturegan::colorkit::RgbImage;
use texturegan::datagen::BinaryMap;
use texturegan::infer::{parse_hex_color, ColorPatch, ColorSource, Rect, SynthesisRequest, TexturePatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesizeDto {
    /// Base64 PNG; dark pixels are strokes.
    pub sketch: String,
    #[serde(default)]
    pub texture_patches: Vec<TexturePatchDto>,
    #[serde(default)]
    pub color_patches: Vec<ColorPatchDto>,
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TexturePatchDto {
    /// Base64 PNG swatch.
    pub image: String,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorPatchDto {
    /// `#rrggbb`.
    pub rgb: String,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// A 400 response naming the offending field.
#[derive(Debug)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl IntoResponse for FieldError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({
            "error": format!("{}: {}", self.field, self.message),
            "field": self.field,
        });
        (StatusCode::BAD_REQUEST, Json(body)).into_response()
    }
}

fn field_err(field: impl Into<String>, message: impl ToString) -> FieldError {
    FieldError {
        field: field.into(),
        message: message.to_string(),
    }
}

fn decode_png(field: &str, b64: &str) -> Result<image::DynamicImage, FieldError> {
    let bytes = STANDARD.decode(b64.trim()).map_err(|e| field_err(field, format!("invalid base64: {e}")))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| field_err(field, format!("invalid PNG: {e}")))
}

pub(crate) fn parse(body: &[u8]) -> Result<SynthesisRequest, FieldError> {
    let dto: SynthesizeDto = serde_json::from_slice(body).map_err(|e| field_err("body", e))?;
    dto.into_request()
}

impl SynthesizeDto {
    /// Decodes images and colors. Rectangles are checked later, against the
    /// requested resolution.
    pub fn into_request(self) -> Result<SynthesisRequest, FieldError> {
        let sketch = BinaryMap::from_stroke_image(&decode_png("sketch", &self.sketch)?);
        let mut req = SynthesisRequest::new(sketch, self.resolution);
        for (i, p) in self.texture_patches.iter().enumerate() {
            let img = decode_png(&format!("texture_patches[{i}].image"), &p.image)?;
            req.texture_patches.push(TexturePatch {
                image: RgbImage::from_dynamic(&img),
                rect: Rect::new(p.x, p.y, p.w, p.h),
            });
        }
        for (i, p) in self.color_patches.iter().enumerate() {
            let rgb = parse_hex_color(&p.rgb).map_err(|e| field_err(format!("color_patches[{i}].rgb"), e))?;
            req.color_patches.push(ColorPatch {
                source: ColorSource::Rgb(rgb),
                rect: Rect::new(p.x, p.y, p.w, p.h),
            });
        }
        Ok(req)
    }
}
