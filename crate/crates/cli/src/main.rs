use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use texturegan::colorkit::RgbImage;
use texturegan::datagen::shard::{run_datagen, DatagenOptions};
use texturegan::datagen::{BinaryMap, ExampleConfig, ExampleGenerator, PatchSamplerConfig, SketchKind};
use texturegan::infer::{parse_hex_color, parse_patch_arg, ColorPatch, ColorSource, SynthesisRequest, Synthesizer, TexturePatch};
use texturegan::train::{run, RunOptions, Stage, TrainConfig};
use texturegan_service::{serve, ServeOptions, DEFAULT_MAX_INFLIGHT};

#[derive(Parser)]
#[command(name = "tgan", version, about = "Texture-guided sketch-to-image synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build training pairs from a photo directory.
    Datagen {
        /// Directory holding `photos/` and optionally `masks/`.
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
        /// mask_canny, xdog or learned_edges.
        #[arg(long, default_value = "mask_canny")]
        sketch: String,
        #[arg(long, default_value_t = 1)]
        patches: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        shard_size: usize,
    },
    /// Ground-truth training.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Training with external textures, starting from a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Synthesize one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sketch: PathBuf,
        /// `image.png:x,y,w,h`, repeatable.
        #[arg(long = "texture")]
        textures: Vec<String>,
        /// `#rrggbb:x,y,w,h`, repeatable.
        #[arg(long = "color")]
        colors: Vec<String>,
        /// Output side; defaults to the checkpoint resolution.
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        stub: bool,
        #[arg(long, default_value_t = DEFAULT_MAX_INFLIGHT)]
        max_inflight: usize,
        /// Allowed CORS origin; any origin when omitted.
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Datagen {
            root,
            out,
            resolution,
            sketch,
            patches,
            seed,
            shard_size,
        } => {
            let example = ExampleConfig {
                resolution,
                sketch: sketch.parse::<SketchKind>()?,
                max_patches: patches,
                patch: PatchSamplerConfig::for_resolution(resolution),
                ..ExampleConfig::default()
            };
            let generator = ExampleGenerator::new(example.clone(), None)?;
            let opts = DatagenOptions {
                root,
                out,
                example,
                seed,
                shard_size,
            };
            let manifest = run_datagen(&opts, &generator)?;
            log::info!(
                "{} examples from {} photos, {} rejected",
                manifest.counts.examples,
                manifest.counts.photos,
                manifest.counts.rejected
            );
        }
        Command::Pretrain { config, resume } => {
            let cfg = TrainConfig::load(&config)?;
            if cfg.stage != Stage::Pretrain {
                bail!("{} is not a pretrain config", config.display());
            }
            let last = run(&cfg, &RunOptions { resume, ..RunOptions::default() })?;
            log::info!("final checkpoint {}", last.display());
        }
        Command::Finetune { config, init, resume } => {
            let cfg = TrainConfig::load(&config)?;
            if cfg.stage != Stage::Finetune {
                bail!("{} is not a finetune config", config.display());
            }
            if init.is_none() && resume.is_none() {
                bail!("finetune needs --init or --resume");
            }
            let last = run(&cfg, &RunOptions { resume, init, ..RunOptions::default() })?;
            log::info!("final checkpoint {}", last.display());
        }
        Command::Infer {
            checkpoint,
            sketch,
            textures,
            colors,
            resolution,
            out,
        } => {
            let synth = Synthesizer::load(&checkpoint)?;
            let img = texturegan::colorkit::load_dynamic(&sketch)?;
            let mut req = SynthesisRequest::new(
                BinaryMap::from_stroke_image(&img),
                resolution.unwrap_or(synth.resolution()),
            );
            for arg in &textures {
                let (path, rect) = parse_patch_arg(arg)?;
                let image = RgbImage::load(path).with_context(|| format!("texture {path}"))?;
                req.texture_patches.push(TexturePatch { image, rect });
            }
            for arg in &colors {
                let (hex, rect) = parse_patch_arg(arg)?;
                req.color_patches.push(ColorPatch {
                    source: ColorSource::Rgb(parse_hex_color(hex)?),
                    rect,
                });
            }
            let result = synth.synthesize(&req)?;
            result.image.save_png(&out)?;
            log::info!(
                "wrote {} in {:.1} ms (internal resolution {})",
                out.display(),
                result.latency.as_secs_f64() * 1e3,
                result.internal_resolution
            );
        }
        Command::Serve {
            checkpoint,
            port,
            stub,
            max_inflight,
            cors_origin,
        } => {
            let opts = ServeOptions {
                checkpoint,
                port,
                stub,
                max_inflight,
                cors_origin,
            };
            tokio::runtime::Runtime::new()?.block_on(serve(opts))?;
        }
    }
    Ok(())
}
