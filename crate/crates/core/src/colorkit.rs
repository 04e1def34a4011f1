//! sRGB / CIE Lab conversions and the L-to-grayscale replication operator.
//!
//! Colors use sRGB primaries with a D65 reference white. Lab lightness lives
//! in `[0, 100]` and the chroma channels in `[-128, 128]`; any rescaling for
//! the networks happens in [`crate::datagen`], not here.

use std::path::Path;

use candle_core::Tensor;
use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};

pub const L_MAX: f32 = 100.0;
pub const AB_LIMIT: f32 = 128.0;

// sRGB (D65) linear RGB -> XYZ.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

// Exact inverse of RGB_TO_XYZ.
const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240454836021, -1.537138850103, -0.498531546868],
    [-0.969266389876, 1.876010928842, 0.041556082347],
    [0.055643419604, -0.204025854268, 1.057225162458],
];

// Reference white: XYZ of linear (1,1,1), so white maps to a = b = 0 exactly.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const EPSILON: f64 = 216.0 / 24389.0; // (6/29)^3
const KAPPA: f64 = 24389.0 / 27.0;

fn srgb_decode(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn srgb_encode(c: f64) -> f64 {
    if c <= 0.0031308 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > EPSILON {
        t
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

fn mat_mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Converts one sRGB color with components in `[0, 1]` to `[L, a, b]`.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_decode);
    let xyz = mat_mul(&RGB_TO_XYZ, lin);
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    let l = 116.0 * fy - 16.0;
    let a = 500.0 * (fx - fy);
    let b = 200.0 * (fy - fz);
    [
        l.clamp(0.0, L_MAX as f64),
        a.clamp(-AB_LIMIT as f64, AB_LIMIT as f64),
        b.clamp(-AB_LIMIT as f64, AB_LIMIT as f64),
    ]
}

/// Converts `[L, a, b]` to sRGB. The second value is true when at least one
/// component fell outside `[0, 1]` and had to be clamped.
pub fn lab_to_srgb(lab: [f64; 3]) -> ([f64; 3], bool) {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        lab_f_inv(fx) * WHITE[0],
        lab_f_inv(fy) * WHITE[1],
        lab_f_inv(fz) * WHITE[2],
    ];
    let lin = mat_mul(&XYZ_TO_RGB, xyz);
    let mut clamped = false;
    let rgb = lin.map(|c| {
        let v = srgb_encode(c.max(0.0));
        if !(-1e-9..=1.0 + 1e-9).contains(&v) || c < -1e-9 {
            clamped = true;
        }
        v.clamp(0.0, 1.0)
    });
    (rgb, clamped)
}

/// Opens any supported image file.
pub fn load_dynamic(path: impl AsRef<Path>) -> Result<DynamicImage> {
    let path = path.as_ref();
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

/// Interleaved (HWC) sRGB image with components in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Validation(format!(
                "expected {} rgb values for {width}x{height}, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Validation(format!(
                "rgb component {bad} is not a finite value in [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
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

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb.map(|c| c.clamp(0.0, 1.0)));
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|c| c.clamp(0.0, 1.0)).collect();
        Self {
            width: w as usize,
            height: h as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let raw = self
            .data
            .iter()
            .map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_dynamic(&load_dynamic(path)?))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_png_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Bilinear resize (half-pixel centers).
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let px = bilinear(self.width, self.height, x, y, width, height, |xx, yy| {
                    self.get(xx, yy)
                });
                data.extend_from_slice(&px);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }
}

pub(crate) fn bilinear(
    src_w: usize,
    src_h: usize,
    x: usize,
    y: usize,
    dst_w: usize,
    dst_h: usize,
    sample: impl Fn(usize, usize) -> [f32; 3],
) -> [f32; 3] {
    let sx = ((x as f32 + 0.5) * src_w as f32 / dst_w as f32 - 0.5).clamp(0.0, (src_w - 1) as f32);
    let sy = ((y as f32 + 0.5) * src_h as f32 / dst_h as f32 - 0.5).clamp(0.0, (src_h - 1) as f32);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(src_w - 1), (y0 + 1).min(src_h - 1));
    let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
    let (p00, p10, p01, p11) = (sample(x0, y0), sample(x1, y0), sample(x0, y1), sample(x1, y1));
    std::array::from_fn(|c| {
        let top = p00[c] * (1.0 - fx) + p10[c] * fx;
        let bottom = p01[c] * (1.0 - fx) + p11[c] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Planar CIE Lab image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    width: usize,
    height: usize,
    l: Vec<f32>,
    a: Vec<f32>,
    b: Vec<f32>,
}

impl LabImage {
    pub fn new(width: usize, height: usize, l: Vec<f32>, a: Vec<f32>, b: Vec<f32>) -> Result<Self> {
        let n = width * height;
        if n == 0 || l.len() != n || a.len() != n || b.len() != n {
            return Err(Error::Validation(format!(
                "Lab planes must all hold {width}x{height} values"
            )));
        }
        if l.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > L_MAX) {
            return Err(Error::Validation("L outside [0, 100]".into()));
        }
        if a.iter()
            .chain(b.iter())
            .any(|v| !v.is_finite() || v.abs() > AB_LIMIT)
        {
            return Err(Error::Validation("a/b outside [-128, 128]".into()));
        }
        Ok(Self {
            width,
            height,
            l,
            a,
            b,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn l(&self) -> &[f32] {
        &self.l
    }

    pub fn a(&self) -> &[f32] {
        &self.a
    }

    pub fn b(&self) -> &[f32] {
        &self.b
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = y * self.width + x;
        [self.l[i], self.a[i], self.b[i]]
    }

    pub(crate) fn set(&mut self, x: usize, y: usize, lab: [f32; 3]) {
        let i = y * self.width + x;
        self.l[i] = lab[0].clamp(0.0, L_MAX);
        self.a[i] = lab[1].clamp(-AB_LIMIT, AB_LIMIT);
        self.b[i] = lab[2].clamp(-AB_LIMIT, AB_LIMIT);
    }

    /// Crops a `w`x`h` window at `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if x + w > self.width || y + h > self.height || w == 0 || h == 0 {
            return Err(Error::Validation(format!(
                "crop ({x},{y},{w},{h}) outside {}x{}",
                self.width, self.height
            )));
        }
        let pick = |plane: &[f32]| {
            (y..y + h)
                .flat_map(|yy| plane[yy * self.width + x..yy * self.width + x + w].iter().copied())
                .collect::<Vec<_>>()
        };
        Ok(Self {
            width: w,
            height: h,
            l: pick(&self.l),
            a: pick(&self.a),
            b: pick(&self.b),
        })
    }

    /// Channel-first `(3, H, W)` values in Lab units.
    pub fn to_planar(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.l.len() * 3);
        out.extend_from_slice(&self.l);
        out.extend_from_slice(&self.a);
        out.extend_from_slice(&self.b);
        out
    }

    /// Inverse of [`LabImage::to_planar`]; values are clamped into range.
    pub fn from_planar(width: usize, height: usize, planar: &[f32]) -> Result<Self> {
        let n = width * height;
        if planar.len() != 3 * n || n == 0 {
            return Err(Error::Shape(format!(
                "expected {} planar Lab values, got {}",
                3 * n,
                planar.len()
            )));
        }
        let clean = |v: f32, lo: f32, hi: f32| if v.is_finite() { v.clamp(lo, hi) } else { 0.0 };
        Ok(Self {
            width,
            height,
            l: planar[..n].iter().map(|v| clean(*v, 0.0, L_MAX)).collect(),
            a: planar[n..2 * n].iter().map(|v| clean(*v, -AB_LIMIT, AB_LIMIT)).collect(),
            b: planar[2 * n..].iter().map(|v| clean(*v, -AB_LIMIT, AB_LIMIT)).collect(),
        })
    }
}

pub fn rgb_to_lab(img: &RgbImage) -> Result<LabImage> {
    let n = img.width * img.height;
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("rgb image contains non-finite values".into()));
    }
    let (mut l, mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for px in img.data.chunks_exact(3) {
        let lab = srgb_to_lab([px[0] as f64, px[1] as f64, px[2] as f64]);
        l.push(lab[0] as f32);
        a.push(lab[1] as f32);
        b.push(lab[2] as f32);
    }
    Ok(LabImage {
        width: img.width,
        height: img.height,
        l,
        a,
        b,
    })
}

/// Converts back to sRGB, returning the image and the number of pixels
/// that were out of gamut and clamped.
pub fn lab_to_rgb(img: &LabImage) -> (RgbImage, usize) {
    let mut clamped = 0;
    let mut data = Vec::with_capacity(img.l.len() * 3);
    for i in 0..img.l.len() {
        let (rgb, was_clamped) =
            lab_to_srgb([img.l[i] as f64, img.a[i] as f64, img.b[i] as f64]);
        clamped += usize::from(was_clamped);
        data.extend(rgb.map(|c| c as f32));
    }
    (
        RgbImage {
            width: img.width,
            height: img.height,
            data,
        },
        clamped,
    )
}

/// Three identical channels derived from a lightness map (Lab units).
///
/// Only [`l_to_gray3`] builds one, so anything consuming a `GrayTriple` is
/// guaranteed to see lightness and nothing of the chroma channels.
#[derive(Debug, Clone)]
pub struct GrayTriple(Tensor);

impl GrayTriple {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Replicates a `(B, 1, H, W)` lightness map (Lab units) into three
/// channels. The backward rule averages the three incoming channel gradients
/// instead of summing them. Feature extractors rescale the triple to their
/// own input range.
pub fn l_to_gray3(l: &Tensor) -> Result<GrayTriple> {
    let (_, c, _, _) = l.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("l_to_gray3 expects one channel, got {c}")));
    }
    let rep = Tensor::cat(&[l, l, l], 1)?;
    let frozen = rep.detach();
    // Value is exactly `rep`; gradient reaching `l` is the channel mean.
    let third = 1.0 / 3.0;
    let live = (rep.affine(third, 0.0)? - frozen.affine(third, 0.0)?)?;
    Ok(GrayTriple((frozen + live)?))
}
