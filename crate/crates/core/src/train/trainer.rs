use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::checkpoint::{Checkpoint, CheckpointMeta, ExtractorInfo, OptimizerSteps, RngState};
use super::config::{ExtractorConfig, Mixing, Stage, TextureColor, TrainConfig};
use crate::colorkit::LabImage;
use crate::datagen::shard::load_dataset;
use crate::datagen::{
    ingest_texture_dir, lab_to_network, sample_with_rng, texture_intensity, InputStack, SegmentationMask,
    TextureExample, TextureIngestConfig, TrainingExample,
};
use crate::error::{Error, Result};
use crate::losses::{
    crop, finetune_objective, lsgan_d_loss, pretrain_objective, sample_crops, scalar, LossContext, LossReport,
};
use crate::nets::{
    stack_inputs, Discriminator, FeatureExtractor, Generator, LChannel, LocalDiscriminator, ParamStore, PatchPair,
    TinyExtractor, Vgg19,
};

pub const METRICS_FILE: &str = "metrics.jsonl";

pub fn build_extractor(cfg: &ExtractorConfig, dtype: DType, device: &Device) -> Result<Box<dyn FeatureExtractor>> {
    Ok(match cfg {
        ExtractorConfig::Tiny(t) => Box::new(TinyExtractor::new(t.clone(), dtype, device)?),
        ExtractorConfig::Vgg19 { path } => Box::new(Vgg19::load(path, dtype, device)?),
    })
}

/// The three trained networks.
#[derive(Debug, Clone)]
pub struct Models {
    pub g: Generator,
    pub d: Discriminator,
    pub d_local: LocalDiscriminator,
}

const GROUPS: [&str; 3] = ["g", "d", "dl"];

impl Models {
    pub fn new(cfg: &TrainConfig, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            g: Generator::new(cfg.generator.clone(), cfg.seed, dtype, device)?,
            d: Discriminator::new(cfg.discriminator.clone(), cfg.seed.wrapping_add(1), dtype, device)?,
            d_local: LocalDiscriminator::new(
                cfg.local_discriminator.clone(),
                cfg.seed.wrapping_add(2),
                dtype,
                device,
            )?,
        })
    }

    fn stores(&self) -> [(&'static str, &ParamStore); 3] {
        [
            (GROUPS[0], self.g.params()),
            (GROUPS[1], self.d.params()),
            (GROUPS[2], self.d_local.params()),
        ]
    }

    /// Overwrites all network parameters from a checkpoint.
    pub fn load_from(&self, ckpt: &Checkpoint) -> Result<()> {
        for (group, store) in self.stores() {
            store.restore(&ckpt.group(group))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationKind {
    GroundTruth,
    Texture,
}

/// One metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Iteration number after the step (1-based).
    pub iteration: u64,
    pub kind: IterationKind,
    pub losses: LossReport,
    pub d_loss: Option<f64>,
    pub d_real_acc: Option<f64>,
    pub d_fake_acc: Option<f64>,
    pub d_local_loss: Option<f64>,
    pub d_local_acc: Option<f64>,
    pub wall_ms: f64,
}

/// Everything needed to continue training bit-for-bit.
pub struct TrainState {
    pub config: TrainConfig,
    pub iteration: u64,
    pub models: Models,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_d_local: Adam,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let models = Models::new(&config, DType::F32, &device)?;
        let opt_g = Adam::new(config.lr.g, config.adam, models.g.params())?;
        let opt_d = Adam::new(config.lr.d_global, config.adam, models.d.params())?;
        let opt_d_local = Adam::new(config.lr.d_local, config.adam, models.d_local.params())?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7458_5475_7265_4741);
        Ok(Self {
            config,
            iteration: 0,
            models,
            opt_g,
            opt_d,
            opt_d_local,
            rng,
        })
    }

    pub fn to_checkpoint(&self, fe: &dyn FeatureExtractor) -> Result<Checkpoint> {
        let mut tensors = std::collections::BTreeMap::new();
        for (group, store) in self.models.stores() {
            for (name, t) in store.snapshot() {
                tensors.insert(format!("{group}.{name}"), t);
            }
        }
        for (group, opt) in self.optimizers() {
            for (name, t) in opt.state() {
                tensors.insert(format!("opt_{group}.{name}"), t.clone());
            }
        }
        Ok(Checkpoint {
            meta: CheckpointMeta {
                config: self.config.clone(),
                iteration: self.iteration,
                rng: RngState {
                    seed: self.rng.get_seed(),
                    stream: self.rng.get_stream(),
                    word_pos: self.rng.get_word_pos().to_string(),
                },
                extractor: ExtractorInfo {
                    name: fe.name().to_string(),
                    fingerprint: fe.fingerprint().to_string(),
                },
                optimizer_steps: OptimizerSteps {
                    g: self.opt_g.steps(),
                    d: self.opt_d.steps(),
                    d_local: self.opt_d_local.steps(),
                },
            },
            tensors,
        })
    }

    /// Rebuilds a state saved by [`TrainState::to_checkpoint`]. The feature
    /// extractor must be the one the checkpoint was trained with.
    pub fn from_checkpoint(ckpt: &Checkpoint, fe: &dyn FeatureExtractor) -> Result<Self> {
        if ckpt.meta.extractor.fingerprint != fe.fingerprint() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with extractor {} ({}), got {} ({})",
                ckpt.meta.extractor.name,
                ckpt.meta.extractor.fingerprint,
                fe.name(),
                fe.fingerprint()
            )));
        }
        let mut state = Self::new(ckpt.meta.config.clone())?;
        state.models.load_from(ckpt)?;
        let steps = ckpt.meta.optimizer_steps;
        let get = |prefix: &str| {
            let group = ckpt.group(prefix);
            move |k: &str| group.get(k).cloned()
        };
        state.opt_g.restore(steps.g, get("opt_g"))?;
        state.opt_d.restore(steps.d, get("opt_d"))?;
        state.opt_d_local.restore(steps.d_local, get("opt_dl"))?;
        let word_pos: u128 = ckpt.meta.rng.word_pos.parse().map_err(|_| {
            Error::Checkpoint(format!("bad RNG position `{}`", ckpt.meta.rng.word_pos))
        })?;
        state.rng = ChaCha8Rng::from_seed(ckpt.meta.rng.seed);
        state.rng.set_stream(ckpt.meta.rng.stream);
        state.rng.set_word_pos(word_pos);
        state.iteration = ckpt.meta.iteration;
        Ok(state)
    }

    fn optimizers(&self) -> [(&'static str, &Adam); 3] {
        [(GROUPS[0], &self.opt_g), (GROUPS[1], &self.opt_d), (GROUPS[2], &self.opt_d_local)]
    }

    fn loss_context<'a>(&'a self, fe: &'a dyn FeatureExtractor) -> LossContext<'a> {
        LossContext {
            fe,
            d: &self.models.d,
            d_txt: &self.models.d_local,
            weights: self.config.weights,
            switches: self.config.switches,
            local: self.config.local,
            style_reference: self.config.style_reference,
        }
    }
}

/// Batch tensors in network units.
struct BatchTensors {
    input: Tensor,
    target: Tensor,
    sketch: Tensor,
    ids: String,
}

fn lab_batch(images: &[&LabImage], device: &Device) -> Result<Tensor> {
    let (w, h) = (images[0].width(), images[0].height());
    let data: Vec<f32> = images.iter().flat_map(|l| lab_to_network(l)).collect();
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?)
}

fn mask_batch(masks: &[&SegmentationMask], device: &Device) -> Result<Tensor> {
    let (w, h) = (masks[0].width(), masks[0].height());
    let data: Vec<f32> = masks
        .iter()
        .flat_map(|m| m.map().data().iter().map(|v| *v as f32))
        .collect();
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), device)?)
}

fn batch_tensors(examples: &[&TrainingExample], inputs: &[&InputStack]) -> Result<BatchTensors> {
    let device = Device::Cpu;
    let input = stack_inputs(inputs, DType::F32, &device)?;
    let targets: Vec<&LabImage> = examples.iter().map(|e| &e.target).collect();
    let target = lab_batch(&targets, &device)?;
    let sketch = input.narrow(1, 0, 1)?;
    let ids = examples.iter().map(|e| e.source_id.as_str()).collect::<Vec<_>>().join(",");
    Ok(BatchTensors {
        input,
        target,
        sketch,
        ids,
    })
}

fn fraction(t: &Tensor, pred: impl Fn(f32) -> bool) -> Result<f64> {
    let v = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Ok(v.iter().filter(|x| pred(**x)).count() as f64 / v.len().max(1) as f64)
}

struct GlobalDStats {
    loss: f64,
    real_acc: f64,
    fake_acc: f64,
}

fn update_global_d(state: &mut TrainState, gen: &Tensor, real: &Tensor, sketch: &Tensor) -> Result<GlobalDStats> {
    let d = &state.models.d;
    let sk = d.config().conditional.then_some(sketch);
    let real_scores = d.forward(&LChannel::from_lab(real)?, sk)?;
    let fake_scores = d.forward(&LChannel::from_lab(&gen.detach())?, sk)?;
    let loss = lsgan_d_loss(&real_scores, &fake_scores)?;
    let grads = loss.backward()?;
    state.opt_d.step(d.params(), &grads)?;
    Ok(GlobalDStats {
        loss: scalar(&loss)?,
        real_acc: fraction(&real_scores, |v| v > 0.5)?,
        fake_acc: fraction(&fake_scores, |v| v < 0.5)?,
    })
}

fn check_finite(state: &TrainState, report: &LossReport, ids: &str) -> Result<()> {
    if report.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite {
        iteration: state.iteration,
        batch_id: ids.to_string(),
        report: serde_json::to_string(report)?,
    })
}

fn ground_truth_step(
    state: &mut TrainState,
    fe: &dyn FeatureExtractor,
    batch: &[&TrainingExample],
) -> Result<StepMetrics> {
    let start = Instant::now();
    let inputs: Vec<&InputStack> = batch.iter().map(|e| &e.input).collect();
    let bt = batch_tensors(batch, &inputs)?;
    let gen = state.models.g.forward(&bt.input)?;
    let d_stats = if state.config.switches.adversarial {
        Some(update_global_d(state, &gen, &bt.target, &bt.sketch)?)
    } else {
        None
    };
    let placements: Vec<_> = batch.iter().map(|e| e.texture_placements.clone()).collect();
    let ctx = state.loss_context(fe);
    let (total, report) = pretrain_objective(&ctx, &gen, &bt.target, Some(&bt.sketch), Some(&placements))?;
    check_finite(state, &report, &bt.ids)?;
    let grads = total.backward()?;
    state.opt_g.step(state.models.g.params(), &grads)?;
    state.iteration += 1;
    Ok(StepMetrics {
        iteration: state.iteration,
        kind: IterationKind::GroundTruth,
        losses: report,
        d_loss: d_stats.as_ref().map(|s| s.loss),
        d_real_acc: d_stats.as_ref().map(|s| s.real_acc),
        d_fake_acc: d_stats.as_ref().map(|s| s.fake_acc),
        d_local_loss: None,
        d_local_acc: None,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// One discriminator update then one generator update on ground-truth
/// inputs.
pub fn pretrain_step(
    state: &mut TrainState,
    fe: &dyn FeatureExtractor,
    batch: &[&TrainingExample],
) -> Result<StepMetrics> {
    if state.config.stage != Stage::Pretrain {
        return Err(Error::Config("pretrain_step needs stage = pretrain".into()));
    }
    ground_truth_step(state, fe, batch)
}

/// Whether the given iteration is a ground-truth one. Draws from `rng`
/// only under Bernoulli mixing.
pub fn is_ground_truth_iteration(mixing: Mixing, iteration: u64, rng: &mut impl Rng) -> bool {
    match mixing {
        Mixing::Alternate => iteration.is_multiple_of(2),
        Mixing::Bernoulli => rng.random_bool(0.5),
    }
}

/// Texture identity used to tell positive from negative pairs: crops of one
/// source image share a family.
pub fn texture_family(source_id: &str) -> &str {
    source_id.split('#').next().unwrap_or(source_id)
}

/// `(1, 1, H, W)` lightness of a Lab image in network units.
pub fn l_tensor(img: &LabImage, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = img.l().iter().map(|l| l / 50.0 - 1.0).collect();
    Ok(Tensor::from_vec(data, (1, 1, img.height(), img.width()), device)?)
}

/// Random `s x s` crop of a `(1, C, H, W)` tensor.
pub fn random_crop(t: &Tensor, s: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let (_, _, h, w) = t.dims4()?;
    if s > h || s > w {
        return Err(Error::Shape(format!("crop of {s} does not fit {w}x{h}")));
    }
    let x = rng.random_range(0..=w - s);
    let y = rng.random_range(0..=h - s);
    Ok(t.narrow(2, y, s)?.narrow(3, x, s)?)
}

/// One least-squares update of the local discriminator: positives towards
/// 1, negatives towards 0. Returns the loss and the pair accuracy.
pub fn local_disc_step(
    d_local: &LocalDiscriminator,
    opt: &mut Adam,
    positives: &PatchPair,
    negatives: &PatchPair,
) -> Result<(f64, f64)> {
    let pos = d_local.forward(positives)?;
    let neg = d_local.forward(negatives)?;
    let loss = lsgan_d_loss(&pos, &neg)?;
    let grads = loss.backward()?;
    opt.step(d_local.params(), &grads)?;
    Ok((scalar(&loss)?, pair_accuracy_from(&pos, &neg)?))
}

fn pair_accuracy_from(pos: &Tensor, neg: &Tensor) -> Result<f64> {
    let (np, nn) = (pos.elem_count() as f64, neg.elem_count() as f64);
    let correct = fraction(pos, |v| v > 0.5)? * np + fraction(neg, |v| v < 0.5)? * nn;
    Ok(correct / (np + nn))
}

/// Fraction of pairs classified correctly (score above 0.5 for positives,
/// below for negatives).
pub fn pair_accuracy(d_local: &LocalDiscriminator, positives: &PatchPair, negatives: &PatchPair) -> Result<f64> {
    pair_accuracy_from(&d_local.forward(positives)?, &d_local.forward(negatives)?)
}

/// Builds a texture-iteration input: the example's texture channels are
/// replaced by a crop of `window` at a placement sampled on the example's
/// foreground mask.
pub fn texture_input(
    ex: &TrainingExample,
    window: &LabImage,
    color: TextureColor,
    patch: &crate::datagen::PatchSamplerConfig,
    rng: &mut impl Rng,
) -> Result<InputStack> {
    let p = sample_with_rng(&ex.mask, rng, patch)?;
    let mut input = ex.input.clone();
    input.clear_texture();
    input.paste_texture(&p, |dx, dy| texture_intensity(window.get(p.x + dx, p.y + dy)[0]))?;
    match color {
        TextureColor::Texture => {
            input.clear_color();
            input.paste_color(&p, |dx, dy| {
                let v = window.get(p.x + dx, p.y + dy);
                [v[1], v[2]]
            })?;
        }
        TextureColor::Example => {}
        TextureColor::None => input.clear_color(),
    }
    Ok(input)
}

/// A `res x res` window at a random offset inside the texture image.
pub fn texture_window(tex: &LabImage, res: usize, rng: &mut impl Rng) -> Result<LabImage> {
    if tex.width() < res || tex.height() < res {
        return Err(Error::Validation(format!(
            "texture of {}x{} is smaller than the {res} px input",
            tex.width(),
            tex.height()
        )));
    }
    let x = rng.random_range(0..=tex.width() - res);
    let y = rng.random_range(0..=tex.height() - res);
    tex.crop(x, y, res, res)
}

fn pick_other(pool: &[TextureExample], family: &str, rng: &mut impl Rng) -> Result<usize> {
    let others: Vec<usize> = (0..pool.len())
        .filter(|i| texture_family(&pool[*i].source_id) != family)
        .collect();
    if others.is_empty() {
        return Err(Error::Config("the texture pool needs at least two distinct textures".into()));
    }
    Ok(others[rng.random_range(0..others.len())])
}

fn texture_step(
    state: &mut TrainState,
    fe: &dyn FeatureExtractor,
    batch: &[&TrainingExample],
    pool: &[TextureExample],
) -> Result<StepMetrics> {
    let start = Instant::now();
    let device = Device::Cpu;
    let res = state.config.resolution;
    let s = state.config.local.s;
    let mut textures = Vec::with_capacity(batch.len());
    let mut windows = Vec::with_capacity(batch.len());
    let mut inputs = Vec::with_capacity(batch.len());
    for ex in batch {
        let idx = state.rng.random_range(0..pool.len());
        let window = texture_window(&pool[idx].texture, res, &mut state.rng)?;
        let input = texture_input(
            ex,
            &window,
            state.config.texture_color,
            &state.config.texture_patch,
            &mut state.rng,
        )?;
        textures.push(idx);
        windows.push(window);
        inputs.push(input);
    }
    let input_refs: Vec<&InputStack> = inputs.iter().collect();
    let bt = batch_tensors(batch, &input_refs)?;
    let window_refs: Vec<&LabImage> = windows.iter().collect();
    let window_t = lab_batch(&window_refs, &device)?;
    let masks: Vec<SegmentationMask> = batch.iter().map(|e| e.mask.clone()).collect();
    let mask_refs: Vec<&SegmentationMask> = masks.iter().collect();
    let mask_t = mask_batch(&mask_refs, &device)?;

    let gen = state.models.g.forward(&bt.input)?;
    let adversarial = state.config.switches.adversarial;
    let d_stats = if adversarial && state.config.global_d_on_texture {
        Some(update_global_d(state, &gen, &bt.target, &bt.sketch)?)
    } else {
        None
    };

    let mut d_local_stats = None;
    if adversarial && state.config.switches.local_texture {
        let gen_l = gen.narrow(1, 0, 1)?.detach();
        let (mut pos_a, mut pos_b, mut neg_a, mut neg_b) = (vec![], vec![], vec![], vec![]);
        for (i, ex) in batch.iter().enumerate() {
            let own = l_tensor(&pool[textures[i]].texture, &device)?;
            let other_idx = pick_other(pool, texture_family(&pool[textures[i]].source_id), &mut state.rng)?;
            let other = l_tensor(&pool[other_idx].texture, &device)?;
            pos_a.push(random_crop(&own, s, &mut state.rng)?);
            pos_b.push(random_crop(&own, s, &mut state.rng)?);
            let p = sample_crops(&ex.mask, 1, s, &mut state.rng)?[0];
            neg_a.push(crop(&gen_l.narrow(0, i, 1)?, &p)?);
            neg_b.push(random_crop(&other, s, &mut state.rng)?);
            neg_a.push(random_crop(&own, s, &mut state.rng)?);
            neg_b.push(random_crop(&other, s, &mut state.rng)?);
        }
        let positives = PatchPair::new(Tensor::cat(&pos_a, 0)?, Tensor::cat(&pos_b, 0)?)?;
        let negatives = PatchPair::new(Tensor::cat(&neg_a, 0)?, Tensor::cat(&neg_b, 0)?)?;
        d_local_stats = Some(local_disc_step(
            &state.models.d_local,
            &mut state.opt_d_local,
            &positives,
            &negatives,
        )?);
    }

    let mut rng = std::mem::replace(&mut state.rng, ChaCha8Rng::seed_from_u64(0));
    let result = {
        let ctx = state.loss_context(fe);
        finetune_objective(&ctx, &gen, &bt.target, &window_t, &mask_t, &masks, Some(&bt.sketch), &mut rng)
    };
    state.rng = rng;
    let (total, report, _) = result?;
    check_finite(state, &report, &bt.ids)?;
    let grads = total.backward()?;
    state.opt_g.step(state.models.g.params(), &grads)?;
    state.iteration += 1;
    Ok(StepMetrics {
        iteration: state.iteration,
        kind: IterationKind::Texture,
        losses: report,
        d_loss: d_stats.as_ref().map(|s| s.loss),
        d_real_acc: d_stats.as_ref().map(|s| s.real_acc),
        d_fake_acc: d_stats.as_ref().map(|s| s.fake_acc),
        d_local_loss: d_local_stats.map(|s| s.0),
        d_local_acc: d_local_stats.map(|s| s.1),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// One fine-tuning iteration: a ground-truth step or an external-texture
/// step according to the mixing rule.
pub fn finetune_step(
    state: &mut TrainState,
    fe: &dyn FeatureExtractor,
    gt_batch: &[&TrainingExample],
    pool: &[TextureExample],
) -> Result<StepMetrics> {
    if state.config.stage != Stage::Finetune {
        return Err(Error::Config("finetune_step needs stage = finetune".into()));
    }
    if pool.is_empty() {
        return Err(Error::Config("fine-tuning needs a non-empty texture pool".into()));
    }
    let iteration = state.iteration;
    if is_ground_truth_iteration(state.config.mixing, iteration, &mut state.rng) {
        ground_truth_step(state, fe, gt_batch)
    } else {
        texture_step(state, fe, gt_batch, pool)
    }
}

/// Draws batch indices; the whole set when it is no larger than a batch.
pub fn sample_batch(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<usize> {
    if batch_size >= n {
        (0..n).collect()
    } else {
        sample(rng, n, batch_size).into_vec()
    }
}

/// Training data held in memory.
#[derive(Debug, Clone, Default)]
pub struct Datasets {
    pub examples: Vec<TrainingExample>,
    pub textures: Vec<TextureExample>,
}

impl Datasets {
    /// Reads the datagen output and, for fine-tuning, the texture directory.
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let (_, examples) = load_dataset(&config.data)?;
        let textures = match (&config.stage, &config.textures) {
            (Stage::Finetune, Some(dir)) => ingest_texture_dir(
                dir,
                &TextureIngestConfig {
                    crop_size: config.resolution,
                    crops_per_image: config.texture_crops_per_image,
                    seed: config.seed,
                },
            )?,
            _ => Vec::new(),
        };
        Ok(Self { examples, textures })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Initialize network weights from this checkpoint (fine-tuning).
    pub init: Option<PathBuf>,
    /// Stop (and checkpoint) once this iteration is reached.
    pub stop_at: Option<u64>,
}

pub fn checkpoint_path(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir.join(format!("ckpt-{iteration:08}.tgan"))
}

/// Trains according to `config`, writing checkpoints and `metrics.jsonl`
/// under `config.out_dir`. Returns the last checkpoint written.
pub fn run(config: &TrainConfig, opts: &RunOptions) -> Result<PathBuf> {
    let data = Datasets::load(config)?;
    run_with_data(config, &data, opts)
}

pub fn run_with_data(config: &TrainConfig, data: &Datasets, opts: &RunOptions) -> Result<PathBuf> {
    config.validate()?;
    if data.examples.is_empty() {
        return Err(Error::Validation("no training examples".into()));
    }
    let fe = build_extractor(&config.extractor, DType::F32, &Device::Cpu)?;
    let out = &config.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join(METRICS_FILE);

    let mut state = match &opts.resume {
        Some(path) => {
            let (ckpt, _) = Checkpoint::load(path)?;
            let mut state = TrainState::from_checkpoint(&ckpt, fe.as_ref())?;
            state.config.iterations = config.iterations;
            truncate_metrics(&metrics_path, state.iteration)?;
            state
        }
        None => {
            let state = TrainState::new(config.clone())?;
            if let Some(init) = &opts.init {
                let (ckpt, _) = Checkpoint::load(init)?;
                if ckpt.meta.extractor.fingerprint != fe.fingerprint() {
                    return Err(Error::Checkpoint("initial checkpoint used a different extractor".into()));
                }
                state.models.load_from(&ckpt)?;
            }
            std::fs::write(&metrics_path, b"").map_err(|e| Error::io(&metrics_path, e))?;
            state.to_checkpoint(fe.as_ref())?.save(checkpoint_path(out, 0))?;
            state
        }
    };

    let mut metrics = std::fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let end = opts
        .stop_at
        .map_or(state.config.iterations, |s| s.min(state.config.iterations));
    let mut last = checkpoint_path(out, state.iteration);
    while state.iteration < end {
        let idx = sample_batch(data.examples.len(), state.config.batch_size, &mut state.rng);
        let batch: Vec<&TrainingExample> = idx.iter().map(|i| &data.examples[*i]).collect();
        let m = match state.config.stage {
            Stage::Pretrain => pretrain_step(&mut state, fe.as_ref(), &batch)?,
            Stage::Finetune => finetune_step(&mut state, fe.as_ref(), &batch, &data.textures)?,
        };
        let line = serde_json::to_string(&m)?;
        writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        let every = state.config.checkpoint_every;
        if (every > 0 && state.iteration % every == 0) || state.iteration == end {
            last = checkpoint_path(out, state.iteration);
            state.to_checkpoint(fe.as_ref())?.save(&last)?;
            log::info!("iteration {}: total {:.4}", state.iteration, m.losses.total);
        }
    }
    Ok(last)
}

fn truncate_metrics(path: &Path, upto: u64) -> Result<()> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = String::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let m: StepMetrics = serde_json::from_str(&line)?;
        if m.iteration <= upto {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Reads a metrics file.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
