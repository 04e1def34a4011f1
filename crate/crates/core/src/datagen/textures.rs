use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::example::derive_seed;
use crate::colorkit::{rgb_to_lab, LabImage, RgbImage};
use crate::error::{Error, Result};

/// A standalone texture image used during fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureExample {
    pub texture: LabImage,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy)]
pub struct TextureIngestConfig {
    /// Side of each square crop; at least the network resolution.
    pub crop_size: usize,
    pub crops_per_image: usize,
    pub seed: u64,
}

pub(crate) fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Image files in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Samples square crops from one texture image. Images smaller than the
/// crop are upscaled first so the short side equals the crop size.
pub fn crops_from_image(
    img: &RgbImage,
    name: &str,
    cfg: &TextureIngestConfig,
) -> Result<Vec<TextureExample>> {
    let short = img.width().min(img.height());
    let img = if short < cfg.crop_size {
        let scale = cfg.crop_size as f64 / short as f64;
        img.resize(
            ((img.width() as f64 * scale).ceil() as usize).max(cfg.crop_size),
            ((img.height() as f64 * scale).ceil() as usize).max(cfg.crop_size),
        )
    } else {
        img.clone()
    };
    let lab = rgb_to_lab(&img)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, name));
    (0..cfg.crops_per_image)
        .map(|k| {
            let x = rng.random_range(0..=lab.width() - cfg.crop_size);
            let y = rng.random_range(0..=lab.height() - cfg.crop_size);
            Ok(TextureExample {
                texture: lab.crop(x, y, cfg.crop_size, cfg.crop_size)?,
                source_id: format!("{name}#{k}"),
            })
        })
        .collect()
}

/// Loads every decodable image in `dir` (lexicographic order) and cuts
/// `crops_per_image` crops from each. Undecodable files are skipped with a
/// warning.
pub fn ingest_texture_dir(dir: impl AsRef<Path>, cfg: &TextureIngestConfig) -> Result<Vec<TextureExample>> {
    let dir = dir.as_ref();
    if cfg.crop_size == 0 || cfg.crops_per_image == 0 {
        return Err(Error::Config("crop size and crops per image must be positive".into()));
    }
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::Validation(format!(
            "texture directory {} contains no images",
            dir.display()
        )));
    }
    let mut out = Vec::new();
    for path in &files {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match RgbImage::load(path) {
            Ok(img) => out.extend(crops_from_image(&img, &name, cfg)?),
            Err(e) => log::warn!("skipping texture {}: {e}", path.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::Validation(format!(
            "no decodable textures in {}",
            dir.display()
        )));
    }
    log::info!("ingested {} texture crops from {} files", out.len(), files.len());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_texture(dir: &Path, name: &str, shade: f32) {
        let mut img = RgbImage::filled(40, 30, [shade, shade, shade]);
        for x in (0..40).step_by(4) {
            for y in 0..30 {
                img.set(x, y, [0.1, 0.2, 0.3]);
            }
        }
        img.save_png(dir.join(name)).unwrap();
    }

    #[test]
    fn empty_dir_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TextureIngestConfig {
            crop_size: 16,
            crops_per_image: 2,
            seed: 0,
        };
        assert!(ingest_texture_dir(dir.path(), &cfg).is_err());
    }

    #[test]
    fn crops_and_stable_order() {
        let dir = tempfile::tempdir().unwrap();
        write_texture(dir.path(), "c.png", 0.9);
        write_texture(dir.path(), "a.png", 0.5);
        write_texture(dir.path(), "b.png", 0.7);
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let cfg = TextureIngestConfig {
            crop_size: 16,
            crops_per_image: 2,
            seed: 3,
        };
        let first = ingest_texture_dir(dir.path(), &cfg).unwrap();
        let second = ingest_texture_dir(dir.path(), &cfg).unwrap();
        assert_eq!(first.len(), 6);
        assert_eq!(first, second);
        let ids: Vec<&str> = first.iter().map(|t| t.source_id.as_str()).collect();
        assert_eq!(ids, ["a.png#0", "a.png#1", "b.png#0", "b.png#1", "c.png#0", "c.png#1"]);
        assert!(first.iter().all(|t| t.texture.width() == 16 && t.texture.height() == 16));
    }

    #[test]
    fn small_images_are_upscaled() {
        let img = RgbImage::filled(8, 12, [0.3, 0.3, 0.3]);
        let cfg = TextureIngestConfig {
            crop_size: 24,
            crops_per_image: 3,
            seed: 1,
        };
        let crops = crops_from_image(&img, "tiny", &cfg).unwrap();
        assert_eq!(crops.len(), 3);
        assert!(crops.iter().all(|c| c.texture.width() == 24));
    }
}
