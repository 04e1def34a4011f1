//! Sharded on-disk storage for generated examples plus the JSON manifest.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::example::{derive_seed, ExampleConfig, ExampleGenerator, InputStack, TrainingExample, CHANNELS};
use super::mask::{BinaryMap, RegionLabels, SegmentationMask};
use super::patch::PatchPlacement;
use super::textures::list_images;
use crate::colorkit::{LabImage, RgbImage};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExampleMeta {
    source_id: String,
    texture_placements: Vec<PatchPlacement>,
    color_placement: Option<PatchPlacement>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes examples (all the same size) into one safetensors buffer.
pub fn encode_shard(examples: &[TrainingExample]) -> Result<Vec<u8>> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Validation("cannot write an empty shard".into()))?;
    let (w, h) = (first.input.width(), first.input.height());
    if examples
        .iter()
        .any(|e| e.input.width() != w || e.input.height() != h)
    {
        return Err(Error::Shape("all examples in a shard must share one size".into()));
    }
    let n = examples.len();
    let dev = Device::Cpu;
    let input: Vec<f32> = examples.iter().flat_map(|e| e.input.data().iter().copied()).collect();
    let target: Vec<f32> = examples.iter().flat_map(|e| e.target.to_planar()).collect();
    let mask: Vec<u8> = examples
        .iter()
        .flat_map(|e| e.mask.map().data().iter().copied())
        .collect();
    let tensors = [
        ("input", Tensor::from_vec(input, (n, CHANNELS, h, w), &dev)?),
        ("mask", Tensor::from_vec(mask, (n, 1, h, w), &dev)?),
        ("target", Tensor::from_vec(target, (n, 3, h, w), &dev)?),
    ];
    let meta: Vec<ExampleMeta> = examples
        .iter()
        .map(|e| ExampleMeta {
            source_id: e.source_id.clone(),
            texture_placements: e.texture_placements.clone(),
            color_placement: e.color_placement,
        })
        .collect();
    let info = HashMap::from([("examples".to_string(), serde_json::to_string(&meta)?)]);
    safetensors::serialize(tensors.iter().map(|(k, t)| (*k, t)), Some(info))
        .map_err(|e| Error::Validation(format!("shard serialization failed: {e}")))
}

pub fn decode_shard(bytes: &[u8]) -> Result<Vec<TrainingExample>> {
    let bad = |m: String| Error::Validation(format!("malformed shard: {m}"));
    let (_, metadata) =
        safetensors::SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let meta: Vec<ExampleMeta> = metadata
        .metadata()
        .as_ref()
        .and_then(|m| m.get("examples"))
        .map(|s| serde_json::from_str(s))
        .transpose()?
        .ok_or_else(|| bad("missing example metadata".into()))?;
    let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
    let get = |name: &str| tensors.get(name).ok_or_else(|| bad(format!("missing `{name}`")));
    let input = get("input")?;
    let (n, c, h, w) = input.dims4()?;
    if c != CHANNELS || n != meta.len() {
        return Err(bad(format!("input has shape {:?}", input.dims())));
    }
    let input = input.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let target = get("target")?.flatten_all()?.to_vec1::<f32>()?;
    let mask = get("mask")?.flatten_all()?.to_vec1::<u8>()?;
    let px = h * w;
    meta.into_iter()
        .enumerate()
        .map(|(i, m)| {
            Ok(TrainingExample {
                input: InputStack::from_planar(
                    w,
                    h,
                    input[i * CHANNELS * px..(i + 1) * CHANNELS * px].to_vec(),
                )?,
                target: LabImage::from_planar(w, h, &target[i * 3 * px..(i + 1) * 3 * px])?,
                mask: SegmentationMask::new(BinaryMap::new(
                    w,
                    h,
                    mask[i * px..(i + 1) * px].to_vec(),
                )?),
                source_id: m.source_id,
                texture_placements: m.texture_placements,
                color_placement: m.color_placement,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub photos: usize,
    pub examples: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub counts: Counts,
    pub config: ExampleConfig,
    pub shards: Vec<ShardEntry>,
}

#[derive(Debug, Clone)]
pub struct DatagenOptions {
    pub root: PathBuf,
    pub out: PathBuf,
    pub example: ExampleConfig,
    pub seed: u64,
    pub shard_size: usize,
}

/// Generates examples for every photo under `<root>/photos` and writes
/// shards plus `manifest.json` into `out`. Photos whose mask or patch
/// sampling fails are skipped and counted as rejected.
pub fn run_datagen(opts: &DatagenOptions, generator: &ExampleGenerator) -> Result<Manifest> {
    let photos_dir = opts.root.join("photos");
    let masks_dir = opts.root.join("masks");
    let photos = list_images(&photos_dir)?;
    if photos.is_empty() {
        return Err(Error::Validation(format!(
            "no photos found in {}",
            photos_dir.display()
        )));
    }
    std::fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;

    let mut examples = Vec::new();
    let mut rejected = 0;
    for path in &photos {
        let id = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let photo = RgbImage::load(path)?;
        let labels = find_mask(&masks_dir, path)
            .map(RegionLabels::load)
            .transpose()?;
        match generator.generate(&photo, labels.as_ref(), derive_seed(opts.seed, &id), &id) {
            Ok(ex) => examples.push(ex),
            Err(e @ (Error::Rejected { .. } | Error::Sampling(_))) => {
                log::warn!("{e}");
                rejected += 1;
            }
            Err(e) => return Err(e),
        }
    }

    let mut shards = Vec::new();
    for (i, chunk) in examples.chunks(opts.shard_size.max(1)).enumerate() {
        let file = format!("shard-{i:05}.safetensors");
        let bytes = encode_shard(chunk)?;
        let path = opts.out.join(&file);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        shards.push(ShardEntry {
            file,
            count: chunk.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: opts.seed,
        counts: Counts {
            photos: photos.len(),
            examples: examples.len(),
            rejected,
        },
        config: generator.config().clone(),
        shards,
    };
    let path = opts.out.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn find_mask(masks_dir: &Path, photo: &Path) -> Option<PathBuf> {
    let stem = photo.file_stem()?;
    let candidate = masks_dir.join(stem).with_extension("png");
    candidate.is_file().then_some(candidate)
}

/// Reads every shard listed in the manifest, verifying checksums.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<TrainingExample>)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Validation(format!(
            "manifest version {} is not supported",
            manifest.version
        )));
    }
    let mut examples = Vec::new();
    for shard in &manifest.shards {
        let path = dir.join(&shard.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != shard.sha256 {
            return Err(Error::Validation(format!(
                "checksum mismatch for {}",
                path.display()
            )));
        }
        examples.extend(decode_shard(&bytes)?);
    }
    Ok((manifest, examples))
}
