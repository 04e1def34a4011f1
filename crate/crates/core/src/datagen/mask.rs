use std::collections::VecDeque;
use std::path::Path;

use crate::colorkit::RgbImage;
use crate::error::{Error, Result};

/// Row-major binary raster; every value is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "binary map of {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| *v > 1) {
            return Err(Error::Validation("binary map values must be 0 or 1".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|v| *v as usize).sum()
    }

    /// Grayscale image where 1 renders black (sketch convention is dark
    /// strokes on white).
    pub fn to_stroke_image(&self) -> image::GrayImage {
        let raw = self.data.iter().map(|v| if *v == 1 { 0 } else { 255 }).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    /// Reads a stroke image: dark pixels (luma < 128) become 1.
    pub fn from_stroke_image(img: &image::DynamicImage) -> Self {
        let luma = img.to_luma8();
        let (w, h) = luma.dimensions();
        let data = luma.into_raw().into_iter().map(|v| u8::from(v < 128)).collect();
        Self {
            width: w as usize,
            height: h as usize,
            data,
        }
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        Self::from_fn(width, height, |x, y| {
            let sx = (x * self.width / width).min(self.width - 1);
            let sy = (y * self.height / height).min(self.height - 1);
            self.get(sx, sy)
        })
    }
}

/// Binary foreground mask (1 = object).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    map: BinaryMap,
    integral: Vec<u32>,
}

impl SegmentationMask {
    pub fn new(map: BinaryMap) -> Self {
        let (w, h) = (map.width, map.height);
        let mut integral = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += map.data[y * w + x] as u32;
                integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
            }
        }
        Self { map, integral }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::new(BinaryMap::ones(width, height))
    }

    pub fn map(&self) -> &BinaryMap {
        &self.map
    }

    pub fn width(&self) -> usize {
        self.map.width
    }

    pub fn height(&self) -> usize {
        self.map.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.map.get(x, y)
    }

    pub fn coverage(&self) -> f64 {
        self.map.count() as f64 / (self.map.width * self.map.height) as f64
    }

    /// Number of foreground pixels inside the rectangle.
    pub fn count_in_rect(&self, x: usize, y: usize, w: usize, h: usize) -> usize {
        let stride = self.map.width + 1;
        let at = |xx: usize, yy: usize| self.integral[yy * stride + xx] as i64;
        (at(x + w, y + h) - at(x, y + h) - at(x + w, y) + at(x, y)) as usize
    }

    /// Fraction of the rectangle covered by foreground.
    pub fn overlap(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        self.count_in_rect(x, y, w, h) as f64 / (w * h) as f64
    }

    /// Copy of the mask with the rectangle cleared.
    pub fn without_rect(&self, x: usize, y: usize, w: usize, h: usize) -> Self {
        let mut map = self.map.clone();
        for yy in y..(y + h).min(map.height) {
            for xx in x..(x + w).min(map.width) {
                map.set(xx, yy, false);
            }
        }
        Self::new(map)
    }

}

/// Per-pixel region labels; 0 is background, every other value names a
/// semantic region (top, skirt, bag, ...). A plain binary mask is the
/// special case with a single non-zero label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionLabels {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RegionLabels {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "label map of {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn foreground(&self) -> BinaryMap {
        BinaryMap::from_fn(self.width, self.height, |x, y| self.get(x, y) != 0)
    }

    /// Sorted distinct non-zero labels.
    pub fn regions(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for v in &self.data {
            seen[*v as usize] = true;
        }
        (1..=255u8).filter(|v| seen[*v as usize]).collect()
    }

    pub fn region_mask(&self, label: u8) -> SegmentationMask {
        SegmentationMask::new(BinaryMap::from_fn(self.width, self.height, |x, y| {
            self.get(x, y) == label
        }))
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let sx = (x * self.width / width).min(self.width - 1);
                let sy = (y * self.height / height).min(self.height - 1);
                data.push(self.get(sx, sy));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Loads a mask file; the luma value of each pixel is its label.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?;
        let luma = img.to_luma8();
        let (w, h) = luma.dimensions();
        Self::new(w as usize, h as usize, luma.into_raw())
    }
}

/// How the foreground of a photo is determined.
#[derive(Debug, Clone)]
pub enum MaskSource {
    /// Pixels whose smallest channel exceeds the threshold are background.
    WhiteBackground { threshold: f32 },
    /// A mask (or region label map) supplied alongside the photo.
    Provided(RegionLabels),
    /// Background is everything reachable from the border without crossing
    /// a sketch stroke.
    SketchFill(BinaryMap),
}

pub const DEFAULT_WHITE_THRESHOLD: f32 = 0.95;

impl Default for MaskSource {
    fn default() -> Self {
        MaskSource::WhiteBackground {
            threshold: DEFAULT_WHITE_THRESHOLD,
        }
    }
}

pub fn compute_foreground_mask(
    photo: &RgbImage,
    source: &MaskSource,
    image_id: &str,
) -> Result<SegmentationMask> {
    let (w, h) = (photo.width(), photo.height());
    let map = match source {
        MaskSource::WhiteBackground { threshold } => BinaryMap::from_fn(w, h, |x, y| {
            let px = photo.get(x, y);
            px[0].min(px[1]).min(px[2]) <= *threshold
        }),
        MaskSource::Provided(mask) => {
            if mask.width() != w || mask.height() != h {
                return Err(Error::Shape(format!(
                    "mask for `{image_id}` is {}x{}, photo is {w}x{h}",
                    mask.width(),
                    mask.height()
                )));
            }
            mask.foreground()
        }
        MaskSource::SketchFill(sketch) => {
            if sketch.width() != w || sketch.height() != h {
                return Err(Error::Shape(format!(
                    "sketch for `{image_id}` is {}x{}, photo is {w}x{h}",
                    sketch.width(),
                    sketch.height()
                )));
            }
            fill_holes(sketch)
        }
    };
    let mask = SegmentationMask::new(map);
    if mask.map().count() == 0 {
        return Err(Error::Rejected {
            image: image_id.to_string(),
            reason: "empty foreground".into(),
        });
    }
    Ok(mask)
}

/// Flood-fills the non-stroke region connected to the border (4-connectivity);
/// whatever it does not reach is foreground.
pub fn fill_holes(strokes: &BinaryMap) -> BinaryMap {
    let (w, h) = (strokes.width(), strokes.height());
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    let seed = |x: usize, y: usize, outside: &mut Vec<bool>, queue: &mut VecDeque<(usize, usize)>| {
        let i = y * w + x;
        if !strokes.get(x, y) && !outside[i] {
            outside[i] = true;
            queue.push_back((x, y));
        }
    };
    for x in 0..w {
        seed(x, 0, &mut outside, &mut queue);
        seed(x, h - 1, &mut outside, &mut queue);
    }
    for y in 0..h {
        seed(0, y, &mut outside, &mut queue);
        seed(w - 1, y, &mut outside, &mut queue);
    }
    while let Some((x, y)) = queue.pop_front() {
        if x > 0 {
            seed(x - 1, y, &mut outside, &mut queue);
        }
        if x + 1 < w {
            seed(x + 1, y, &mut outside, &mut queue);
        }
        if y > 0 {
            seed(x, y - 1, &mut outside, &mut queue);
        }
        if y + 1 < h {
            seed(x, y + 1, &mut outside, &mut queue);
        }
    }
    BinaryMap::from_fn(w, h, |x, y| !outside[y * w + x])
}
