//! Loss terms and the two combined objectives.
//!
//! All tensors are in network units: generated and reference images are
//! `(B, 3, H, W)` with L mapped to `L/50 - 1` and a, b to `a/128`, `b/128`.
//! Structure terms read only channel 0 and the color term only channels 1-2,
//! so their gradients never cross over.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colorkit::l_to_gray3;
use crate::datagen::{sample_with_rng, PatchPlacement, PatchSamplerConfig, SegmentationMask};
use crate::error::{Error, Result};
use crate::nets::{Discriminator, FeatureExtractor, LChannel, LocalDiscriminator, PatchPair, Tap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Global adversarial weight.
    pub adv: f64,
    pub style: f64,
    pub pixel: f64,
    pub color: f64,
    /// Pixel weight inside the local texture loss.
    pub local_pixel: f64,
    /// Adversarial weight inside the local texture loss.
    pub local_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            style: 0.1,
            pixel: 10.0,
            color: 100.0,
            local_pixel: 10.0,
            local_adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            adv: 0.0,
            style: 0.0,
            pixel: 0.0,
            color: 0.0,
            local_pixel: 0.0,
            local_adv: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.adv, self.style, self.pixel, self.color, self.local_pixel, self.local_adv];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Ablation switches; a disabled term is not computed and reports 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSwitches {
    pub style: bool,
    pub adversarial: bool,
    pub local_texture: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            style: true,
            adversarial: true,
            local_texture: true,
        }
    }
}

/// Style reference during ground-truth pre-training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleReference {
    /// Whole ground-truth image.
    #[default]
    GroundTruth,
    /// Co-located crops of output and ground truth at the texture placements.
    TexturePatch,
}

/// Unweighted per-term values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub feature: f64,
    pub adv: f64,
    pub style: f64,
    pub pixel: f64,
    pub color: f64,
    pub local_style: f64,
    pub local_pixel: f64,
    pub local_adv: f64,
    pub total: f64,
}

impl LossReport {
    /// Recomputes the total from the individual terms.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.feature
            + w.adv * self.adv
            + w.style * self.style
            + w.pixel * self.pixel
            + w.color * self.color
            + self.local_style
            + w.local_pixel * self.local_pixel
            + w.local_adv * self.local_adv
    }

    pub fn terms(&self) -> [(&'static str, f64); 9] {
        [
            ("feature", self.feature),
            ("adv", self.adv),
            ("style", self.style),
            ("pixel", self.pixel),
            ("color", self.color),
            ("local_style", self.local_style),
            ("local_pixel", self.local_pixel),
            ("local_adv", self.local_adv),
            ("total", self.total),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().all(|(_, v)| v.is_finite())
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn zero_like(t: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), t.dtype(), t.device())?)
}

/// `L` channel of a `(B, 3, H, W)` network-unit batch.
pub fn l_of(lab: &Tensor) -> Result<Tensor> {
    Ok(lab.narrow(1, 0, 1)?)
}

/// `a, b` channels of a `(B, 3, H, W)` network-unit batch.
pub fn ab_of(lab: &Tensor) -> Result<Tensor> {
    Ok(lab.narrow(1, 1, 2)?)
}

/// Gram matrices of `(B, N, h, w)` features, shape `(B, N, N)`.
/// `G_ij = sum_k F_ik F_jk`, divided by `N * K` when `normalize` is set.
pub fn gram(features: &Tensor, normalize: bool) -> Result<Tensor> {
    let (b, n, h, w) = features.dims4()?;
    let k = h * w;
    let f = features.reshape((b, n, k))?;
    let g = f.matmul(&f.t()?)?;
    Ok(if normalize {
        g.affine(1.0 / (n * k) as f64, 0.0)?
    } else {
        g
    })
}

fn gray(l_net: &Tensor) -> Result<crate::colorkit::GrayTriple> {
    // Network units back to Lab lightness.
    l_to_gray3(&l_net.affine(50.0, 50.0)?)
}

/// Mean squared difference of deep-tap activations. `gt_l` is detached.
pub fn feature_loss(gen_l: &Tensor, gt_l: &Tensor, fe: &dyn FeatureExtractor) -> Result<Tensor> {
    same_shape(gen_l, gt_l)?;
    let a = fe.extract(&gray(gen_l)?, &[Tap::Deep])?;
    let b = fe.extract(&gray(&gt_l.detach())?, &[Tap::Deep])?;
    let (fa, fb) = (a.get(Tap::Deep).expect("deep"), b.get(Tap::Deep).expect("deep"));
    Ok((fa - fb)?.sqr()?.mean_all()?)
}

/// Sum over taps of the mean squared difference of normalized Gram
/// matrices. `ref_l` is detached.
pub fn style_loss(gen_l: &Tensor, ref_l: &Tensor, fe: &dyn FeatureExtractor, taps: &[Tap]) -> Result<Tensor> {
    same_shape(gen_l, ref_l)?;
    let a = fe.extract(&gray(gen_l)?, taps)?;
    let b = fe.extract(&gray(&ref_l.detach())?, taps)?;
    let mut total = zero_like(gen_l)?;
    for tap in taps {
        let ga = gram(a.get(*tap).expect("tap"), true)?;
        let gb = gram(b.get(*tap).expect("tap"), true)?;
        total = (total + (ga - gb)?.sqr()?.mean_all()?)?;
    }
    Ok(total)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean squared error, restricted to pixels where the `(B, 1, H, W)` mask is
/// 1 when one is given. An all-zero mask yields 0.
pub fn masked_mse(gen: &Tensor, reference: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    same_shape(gen, reference)?;
    let sq = (gen - reference.detach())?.sqr()?;
    let Some(mask) = mask else {
        return Ok(sq.mean_all()?);
    };
    let (b, _, h, w) = gen.dims4()?;
    if mask.dims() != [b, 1, h, w] {
        return Err(Error::Shape(format!("mask shape {:?} does not match {:?}", mask.dims(), gen.dims())));
    }
    let mask = mask.to_dtype(gen.dtype())?.detach();
    let channels = gen.dims()[1] as f64;
    let count = scalar(&mask.sum_all()?)? * channels;
    if count == 0.0 {
        log::warn!("masked loss over an empty mask; returning 0");
        return zero_like(gen);
    }
    Ok(sq.broadcast_mul(&mask)?.sum_all()?.affine(1.0 / count, 0.0)?)
}

/// L2 on the lightness channel of `(B, 3, H, W)` batches.
pub fn pixel_loss_l(gen: &Tensor, reference: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    masked_mse(&l_of(gen)?, &l_of(reference)?, mask)
}

/// L2 on the chroma channels of `(B, 3, H, W)` batches.
pub fn color_loss_ab(gen: &Tensor, reference: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    masked_mse(&ab_of(gen)?, &ab_of(reference)?, mask)
}

pub fn lsgan_d_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = real.affine(1.0, -1.0)?.sqr()?.mean_all()?;
    let f = fake.sqr()?.mean_all()?;
    Ok((r + f)?)
}

pub fn lsgan_g_loss(fake: &Tensor) -> Result<Tensor> {
    Ok(fake.affine(1.0, -1.0)?.sqr()?.mean_all()?)
}

/// `n` square placements of side `s`, each at least 70% inside `mask`.
pub fn sample_crops(mask: &SegmentationMask, n: usize, s: usize, rng: &mut impl Rng) -> Result<Vec<PatchPlacement>> {
    let cfg = PatchSamplerConfig::fixed(s);
    (0..n).map(|_| sample_with_rng(mask, rng, &cfg)).collect()
}

/// Extracts a rectangle from a `(B, C, H, W)` tensor.
pub fn crop(t: &Tensor, p: &PatchPlacement) -> Result<Tensor> {
    Ok(t.narrow(2, p.y, p.h)?.narrow(3, p.x, p.w)?)
}

/// `n` seeded `s x s` crops of a `(1, C, H, W)` image inside `mask`.
pub fn crop_patches(
    image: &Tensor,
    mask: &SegmentationMask,
    n: usize,
    s: usize,
    seed: u64,
) -> Result<(Vec<PatchPlacement>, Vec<Tensor>)> {
    let (_, _, h, w) = image.dims4()?;
    if (mask.width(), mask.height()) != (w, h) {
        return Err(Error::Shape("mask and image sizes differ".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let placements = sample_crops(mask, n, s, &mut rng)?;
    let crops = placements.iter().map(|p| crop(image, p)).collect::<Result<_>>()?;
    Ok((placements, crops))
}

/// Local texture loss settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalConfig {
    /// Crops per example.
    pub n: usize,
    /// Crop side in pixels.
    pub s: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self::for_resolution(128)
    }
}

impl LocalConfig {
    /// 60 px at 128, 100 px at 256, scaled linearly elsewhere.
    pub fn for_resolution(resolution: usize) -> Self {
        let s = match resolution {
            256 => 100,
            128 => 60,
            r => (r * 60 / 128).max(12),
        };
        Self { n: 1, s }
    }
}

/// Unweighted local terms plus the crop pairs that produced them.
#[derive(Debug, Clone)]
pub struct LocalTerms {
    pub style: Tensor,
    pub pixel: Tensor,
    pub adv: Tensor,
    pub placements: Vec<Vec<PatchPlacement>>,
    /// Crops of the generated L, `(B*n, 1, s, s)`.
    pub gen_crops: Tensor,
    /// Co-located crops of the texture L.
    pub tex_crops: Tensor,
}

impl LocalTerms {
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        let p = self.pixel.affine(w.local_pixel, 0.0)?;
        let a = self.adv.affine(w.local_adv, 0.0)?;
        Ok(((&self.style + p)? + a)?)
    }
}

/// Local style, pixel and adversarial terms on crops taken at the same
/// placement from the generated L and the texture window L (both
/// `(B, 1, H, W)`). Crops lie inside each example's foreground mask.
/// The adversarial term is `mean((D_txt(PG, PT) - 1)^2)`.
#[allow(clippy::too_many_arguments)]
pub fn local_texture_loss(
    gen_l: &Tensor,
    tex_l: &Tensor,
    masks: &[SegmentationMask],
    d_txt: &LocalDiscriminator,
    fe: &dyn FeatureExtractor,
    cfg: &LocalConfig,
    with_adv: bool,
    rng: &mut impl Rng,
) -> Result<LocalTerms> {
    same_shape(gen_l, tex_l)?;
    let (b, _, _, _) = gen_l.dims4()?;
    if masks.len() != b {
        return Err(Error::Shape(format!("{} masks for a batch of {b}", masks.len())));
    }
    let mut placements = Vec::with_capacity(b);
    let mut gen_crops = Vec::new();
    let mut tex_crops = Vec::new();
    for (i, mask) in masks.iter().enumerate() {
        let ps = sample_crops(mask, cfg.n, cfg.s, rng)?;
        let g = gen_l.narrow(0, i, 1)?;
        let t = tex_l.narrow(0, i, 1)?;
        for p in &ps {
            gen_crops.push(crop(&g, p)?);
            tex_crops.push(crop(&t, p)?.detach());
        }
        placements.push(ps);
    }
    let gen_crops = Tensor::cat(&gen_crops, 0)?;
    let tex_crops = Tensor::cat(&tex_crops, 0)?;
    let style = style_loss(&gen_crops, &tex_crops, fe, &Tap::ALL)?;
    let pixel = masked_mse(&gen_crops, &tex_crops, None)?;
    let adv = if with_adv {
        let pair = PatchPair::new(gen_crops.clone(), tex_crops.clone())?;
        lsgan_g_loss(&d_txt.forward(&pair)?)?
    } else {
        zero_like(gen_l)?
    };
    Ok(LocalTerms {
        style,
        pixel,
        adv,
        placements,
        gen_crops,
        tex_crops,
    })
}

/// Networks and settings shared by both objectives.
pub struct LossContext<'a> {
    pub fe: &'a dyn FeatureExtractor,
    pub d: &'a Discriminator,
    pub d_txt: &'a LocalDiscriminator,
    pub weights: LossWeights,
    pub switches: LossSwitches,
    pub local: LocalConfig,
    pub style_reference: StyleReference,
}

impl LossContext<'_> {
    fn global_adv(&self, gen: &Tensor, sketch: Option<&Tensor>) -> Result<Tensor> {
        let sketch = if self.d.config().conditional { sketch } else { None };
        lsgan_g_loss(&self.d.forward(&LChannel::from_lab(gen)?, sketch)?)
    }
}

fn weighted(terms: &[(f64, &Tensor)]) -> Result<Tensor> {
    let mut total = terms[0].1.affine(terms[0].0, 0.0)?;
    for (w, t) in &terms[1..] {
        total = (total + t.affine(*w, 0.0)?)?;
    }
    Ok(total)
}

/// Ground-truth pre-training objective:
/// `L_F + w_adv L_adv + w_s L_s + w_p L_p + w_c L_c`.
///
/// `sketch` is the `(B, 1, H, W)` sketch channel (used only by a conditional
/// discriminator); `texture_placements` is needed for
/// [`StyleReference::TexturePatch`].
pub fn pretrain_objective(
    ctx: &LossContext,
    gen: &Tensor,
    target: &Tensor,
    sketch: Option<&Tensor>,
    texture_placements: Option<&[Vec<PatchPlacement>]>,
) -> Result<(Tensor, LossReport)> {
    same_shape(gen, target)?;
    let w = &ctx.weights;
    let (gen_l, gt_l) = (l_of(gen)?, l_of(target)?);
    let feature = feature_loss(&gen_l, &gt_l, ctx.fe)?;
    let zero = zero_like(gen)?;
    let adv = if ctx.switches.adversarial {
        ctx.global_adv(gen, sketch)?
    } else {
        zero.clone()
    };
    let style = if !ctx.switches.style {
        zero.clone()
    } else {
        match (ctx.style_reference, texture_placements) {
            (StyleReference::GroundTruth, _) => style_loss(&gen_l, &gt_l, ctx.fe, &Tap::ALL)?,
            (StyleReference::TexturePatch, Some(all)) => patch_style(&gen_l, &gt_l, all, ctx.fe)?,
            (StyleReference::TexturePatch, None) => {
                return Err(Error::Config("patch style reference needs texture placements".into()))
            }
        }
    };
    let pixel = pixel_loss_l(gen, target, None)?;
    let color = color_loss_ab(gen, target, None)?;
    let total = weighted(&[
        (1.0, &feature),
        (w.adv, &adv),
        (w.style, &style),
        (w.pixel, &pixel),
        (w.color, &color),
    ])?;
    let report = LossReport {
        feature: scalar(&feature)?,
        adv: scalar(&adv)?,
        style: scalar(&style)?,
        pixel: scalar(&pixel)?,
        color: scalar(&color)?,
        total: scalar(&total)?,
        ..LossReport::default()
    };
    Ok((total, report))
}

fn patch_style(
    gen_l: &Tensor,
    gt_l: &Tensor,
    placements: &[Vec<PatchPlacement>],
    fe: &dyn FeatureExtractor,
) -> Result<Tensor> {
    let mut total = zero_like(gen_l)?;
    let mut count = 0usize;
    for (i, ps) in placements.iter().enumerate() {
        let (g, t) = (gen_l.narrow(0, i, 1)?, gt_l.narrow(0, i, 1)?);
        for p in ps {
            total = (total + style_loss(&crop(&g, p)?, &crop(&t, p)?, fe, &Tap::ALL)?)?;
            count += 1;
        }
    }
    Ok(if count == 0 { total } else { total.affine(1.0 / count as f64, 0.0)? })
}

/// External-texture fine-tuning objective:
/// `L_F + w_adv L_adv + w_p L'_p + w_c L'_c + L_t`.
///
/// `texture` is the texture window aligned with the output, `(B, 3, H, W)`;
/// `mask` is the `(B, 1, H, W)` foreground mask (also given as
/// `seg_masks` for crop sampling). The feature term compares against the
/// ground-truth photo the sketch came from.
#[allow(clippy::too_many_arguments)]
pub fn finetune_objective(
    ctx: &LossContext,
    gen: &Tensor,
    target: &Tensor,
    texture: &Tensor,
    mask: &Tensor,
    seg_masks: &[SegmentationMask],
    sketch: Option<&Tensor>,
    rng: &mut impl Rng,
) -> Result<(Tensor, LossReport, Option<LocalTerms>)> {
    same_shape(gen, target)?;
    same_shape(gen, texture)?;
    let w = &ctx.weights;
    let feature = feature_loss(&l_of(gen)?, &l_of(target)?, ctx.fe)?;
    let zero = zero_like(gen)?;
    let adv = if ctx.switches.adversarial {
        ctx.global_adv(gen, sketch)?
    } else {
        zero.clone()
    };
    let pixel = pixel_loss_l(gen, texture, Some(mask))?;
    let color = color_loss_ab(gen, texture, Some(mask))?;
    let local = if ctx.switches.local_texture {
        Some(local_texture_loss(
            &l_of(gen)?,
            &l_of(texture)?,
            seg_masks,
            ctx.d_txt,
            ctx.fe,
            &ctx.local,
            ctx.switches.adversarial,
            rng,
        )?)
    } else {
        None
    };
    let (ls, lp, la) = match &local {
        Some(t) => (t.style.clone(), t.pixel.clone(), t.adv.clone()),
        None => (zero.clone(), zero.clone(), zero.clone()),
    };
    let total = weighted(&[
        (1.0, &feature),
        (w.adv, &adv),
        (w.pixel, &pixel),
        (w.color, &color),
        (1.0, &ls),
        (w.local_pixel, &lp),
        (w.local_adv, &la),
    ])?;
    let report = LossReport {
        feature: scalar(&feature)?,
        adv: scalar(&adv)?,
        style: 0.0,
        pixel: scalar(&pixel)?,
        color: scalar(&color)?,
        local_style: scalar(&ls)?,
        local_pixel: scalar(&lp)?,
        local_adv: scalar(&la)?,
        total: scalar(&total)?,
    };
    Ok((total, report, local))
}
