//! Training objectives.
//!
//! Reductions: distillation, reconstruction and feature losses average over
//! elements; the diversity loss sums its masked feature differences so that the
//! reciprocal actually vanishes as two samples move apart.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tch::{nn, CModule, Device, IValue, Kind, Tensor};

use crate::adversary::Discriminator;
use crate::config::RunConfig;
use crate::error::{Result, SpnError};
use crate::layers::Conv;
use crate::pretext::imagenet_normalize;
use crate::prior::LatentStats;

/// Floor applied inside every `log` of the adversarial losses.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub delta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 3.0,
            delta: 4.0,
            lambda1: 10.0,
            lambda2: 1.0,
            lambda3: 10.0,
            lambda4: 1.0,
            lambda5: 0.05,
            epsilon: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        let w = LossWeights {
            alpha: cfg.float("loss.alpha"),
            delta: cfg.float("loss.delta"),
            lambda1: cfg.float("loss.lambda1"),
            lambda2: cfg.float("loss.lambda2"),
            lambda3: cfg.float("loss.lambda3"),
            lambda4: cfg.float("loss.lambda4"),
            lambda5: cfg.float("loss.lambda5"),
            epsilon: cfg.float("loss.epsilon"),
        };
        let all = [w.alpha, w.delta, w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5];
        if all.iter().any(|&v| v < 0.0 || !v.is_finite()) || w.epsilon <= 0.0 {
            return Err(SpnError::Config("loss weights must be nonnegative and epsilon positive".into()));
        }
        Ok(w)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.size() != b.size() {
        return Err(SpnError::Shape(format!("{what}: {:?} vs {:?}", a.size(), b.size())));
    }
    Ok(())
}

/// `Σ_l mean(|target − projection| ⊙ (1 + α·M^l))`; each mask is `[B, 1, h_l, w_l]`.
pub fn prior_distillation_loss(
    targets: &[Tensor],
    projections: &[Tensor],
    masks: &[Tensor],
    alpha: f64,
) -> Result<Tensor> {
    if targets.len() != projections.len() || targets.len() != masks.len() || targets.is_empty() {
        return Err(SpnError::Shape(format!(
            "{} targets, {} projections, {} masks",
            targets.len(),
            projections.len(),
            masks.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (l, ((t, p), m)) in targets.iter().zip(projections).zip(masks).enumerate() {
        same_shape(t, p, &format!("distillation level {}", l + 1))?;
        let term = ((t - p).abs() * (m * alpha + 1.0)).mean(p.kind());
        total = Some(match total {
            Some(acc) => acc + term,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `mean(|real − fake| ⊙ (1 + δ·M))` with `M` broadcast over channels.
pub fn reconstruction_loss(real: &Tensor, fake: &Tensor, mask: &Tensor, delta: f64) -> Result<Tensor> {
    same_shape(real, fake, "reconstruction")?;
    Ok(((real - fake).abs() * (mask * delta + 1.0)).mean(fake.kind()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvForm {
    /// `D` is the probability of FAKE; both losses minimized as written.
    Paper,
    /// `D` is the probability of REAL with the non-saturating generator loss.
    NonSaturating,
}

impl AdvForm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(AdvForm::Paper),
            "nonsaturating" => Ok(AdvForm::NonSaturating),
            other => Err(SpnError::Config(format!("unknown adv.loss_form `{other}`"))),
        }
    }
}

fn log_clamped(x: &Tensor) -> Tensor {
    x.clamp_min(LOG_CLAMP).log()
}

/// Generator side: `−mean(log(1 − D(fake)))` under [`AdvForm::Paper`].
pub fn generator_adversarial_loss(d_fake: &Tensor, form: AdvForm) -> Tensor {
    match form {
        AdvForm::Paper => -log_clamped(&(1.0 - d_fake)).mean(d_fake.kind()),
        AdvForm::NonSaturating => -log_clamped(d_fake).mean(d_fake.kind()),
    }
}

/// Discriminator side: `mean(log D(real)) + mean(log(1 − D(fake)))` under
/// [`AdvForm::Paper`].
pub fn discriminator_adversarial_loss(d_real: &Tensor, d_fake: &Tensor, form: AdvForm) -> Tensor {
    match form {
        AdvForm::Paper => log_clamped(d_real).mean(d_real.kind()) + log_clamped(&(1.0 - d_fake)).mean(d_fake.kind()),
        AdvForm::NonSaturating => {
            -log_clamped(d_real).mean(d_real.kind()) - log_clamped(&(1.0 - d_fake)).mean(d_fake.kind())
        }
    }
}

/// `(gen_loss, disc_loss)` from one discriminator evaluation of each input.
pub fn adversarial_losses(disc: &Discriminator, real: &Tensor, fake: &Tensor, form: AdvForm) -> (Tensor, Tensor) {
    let d_real = disc.discriminate(real).probs;
    let d_fake = disc.discriminate(fake).probs;
    (generator_adversarial_loss(&d_fake, form), discriminator_adversarial_loss(&d_real, &d_fake, form))
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, I))` summed over latent dimensions and
/// averaged over the batch.
pub fn kl_loss(stats: &LatentStats) -> Tensor {
    let per_dim = stats.mu.square() + stats.logvar.exp() - &stats.logvar - 1.0;
    (per_dim.sum_dim_intlist([1i64].as_slice(), false, stats.mu.kind()) * 0.5).mean(stats.mu.kind())
}

fn mean_l1_over_layers(a: &[Tensor], b: &[Tensor], what: &str) -> Result<Tensor> {
    if a.len() != b.len() || a.is_empty() {
        return Err(SpnError::Shape(format!("{what}: {} vs {} layers", a.len(), b.len())));
    }
    let mut acc: Option<Tensor> = None;
    for (x, y) in a.iter().zip(b) {
        same_shape(x, y, what)?;
        let term = (x - y).abs().mean(x.kind());
        acc = Some(match acc {
            Some(s) => s + term,
            None => term,
        });
    }
    Ok(acc.expect("non-empty") / a.len() as f64)
}

/// `(1/N) Σ mean|φ(real) − φ(fake)| + (1/K) Σ mean|ϕ(real) − ϕ(fake)|`
pub fn feature_matching_perceptual_loss(
    disc_real: &[Tensor],
    disc_fake: &[Tensor],
    perc_real: &[Tensor],
    perc_fake: &[Tensor],
) -> Result<Tensor> {
    Ok(mean_l1_over_layers(disc_real, disc_fake, "discriminator features")?
        + mean_l1_over_layers(perc_real, perc_fake, "perceptual features")?)
}

/// `(1/K) Σ_i 1 / (‖ϕ_i(fake1)·M_i − ϕ_i(fake2)·M_i‖₁ + ε)`.
///
/// The norm is a per-sample sum over all masked feature elements; the reciprocal
/// is averaged over the batch. `masks[i]` is `[B, 1, h_i, w_i]`, 1 on missing pixels.
pub fn perceptual_diversity_loss(
    feats1: &[Tensor],
    feats2: &[Tensor],
    masks: &[Tensor],
    epsilon: f64,
) -> Result<Tensor> {
    if feats1.len() != feats2.len() || feats1.len() != masks.len() || feats1.is_empty() {
        return Err(SpnError::Shape("diversity loss layer counts differ".into()));
    }
    let mut acc: Option<Tensor> = None;
    for ((a, b), m) in feats1.iter().zip(feats2).zip(masks) {
        same_shape(a, b, "diversity features")?;
        let dist = ((a * m) - (b * m)).abs().sum_dim_intlist([1i64, 2, 3].as_slice(), false, a.kind());
        let term = (dist + epsilon).reciprocal().mean(a.kind());
        acc = Some(match acc {
            Some(s) => s + term,
            None => term,
        });
    }
    Ok(acc.expect("non-empty") / feats1.len() as f64)
}

/// Nearest-neighbour copies of `mask` (`[B, 1, H, W]`) at each feature's resolution.
pub fn masks_like(mask: &Tensor, feats: &[Tensor]) -> Vec<Tensor> {
    feats
        .iter()
        .map(|f| {
            let s = f.size();
            if s[2..] == mask.size()[2..] {
                mask.shallow_clone()
            } else {
                mask.upsample_nearest2d([s[2], s[3]], None, None)
            }
        })
        .collect()
}

/// Image-level wrapper around [`perceptual_diversity_loss`].
pub fn perceptual_diversity_loss_images(
    fake1: &Tensor,
    fake2: &Tensor,
    extractor: &dyn PerceptualExtractor,
    mask: &Tensor,
    epsilon: f64,
) -> Result<Tensor> {
    let f1 = extractor.features(fake1)?;
    let f2 = extractor.features(fake2)?;
    let masks = masks_like(mask, &f1);
    perceptual_diversity_loss(&f1, &f2, &masks, epsilon)
}

/// `L_DET = L_prior + λ₁·L_img + λ₂·L_adv`
pub fn total_deterministic(prior: &Tensor, img: &Tensor, adv: &Tensor, w: &LossWeights) -> Tensor {
    prior + img * w.lambda1 + adv * w.lambda2
}

/// `L_PROB = L_DET + λ₃·L_feature + λ₄·L_diverse + λ₅·L_KL`
pub fn total_probabilistic(det: &Tensor, feature: &Tensor, diverse: &Tensor, kl: &Tensor, w: &LossWeights) -> Tensor {
    det + feature * w.lambda3 + diverse * w.lambda4 + kl * w.lambda5
}

// ---------------------------------------------------------------------------
// Perceptual network

/// A frozen network with `K` tapped layers.
pub trait PerceptualExtractor: Send {
    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>>;
    fn tag(&self) -> String;
    fn parameters(&self) -> Vec<(String, Tensor)>;
}

/// Fixed random VGG-style stack with five ReLU taps at strides 1, 2, 4, 8, 16.
pub struct StubPerceptual {
    vs: nn::VarStore,
    convs: Vec<Conv>,
    seed: u64,
}

impl StubPerceptual {
    pub const WIDTHS: [i64; 5] = [16, 32, 64, 64, 64];

    pub fn new(seed: u64) -> Self {
        let mut vs = nn::VarStore::new(Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let root = vs.root();
        let mut c_in = 3;
        let convs = Self::WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let stride = if i == 0 { 1 } else { 2 };
                let conv = Conv::new(&(&root / format!("conv{i}")), &mut rng, c_in, c, 3, stride, 1, true);
                c_in = c;
                conv
            })
            .collect();
        vs.freeze();
        StubPerceptual { vs, convs, seed }
    }

    pub fn set_kind(&mut self, kind: Kind) {
        self.vs.set_kind(kind);
    }
}

impl PerceptualExtractor for StubPerceptual {
    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = imagenet_normalize(image);
        Ok(self
            .convs
            .iter()
            .map(|c| {
                x = c.forward(&x).relu();
                x.shallow_clone()
            })
            .collect())
    }

    fn tag(&self) -> String {
        format!("stub-perceptual(seed={})", self.seed)
    }

    fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut vars: Vec<_> = self.vs.variables().into_iter().collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }
}

/// TorchScript perceptual network (e.g. a traced VGG19 returning its ReLU taps).
pub struct TorchScriptPerceptual {
    module: CModule,
}

impl TorchScriptPerceptual {
    pub fn load(weights: &Path) -> Result<Self> {
        let mut module = CModule::load_on_device(weights, Device::Cpu)
            .map_err(|e| SpnError::Config(format!("cannot load perceptual network {}: {e}", weights.display())))?;
        module.set_eval();
        Ok(TorchScriptPerceptual { module })
    }
}

impl PerceptualExtractor for TorchScriptPerceptual {
    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let input = imagenet_normalize(image);
        let out = self
            .module
            .forward_is(&[IValue::Tensor(input)])
            .map_err(|e| SpnError::Contract(format!("perceptual forward failed: {e}")))?;
        match out {
            IValue::Tuple(items) | IValue::GenericList(items) => items
                .into_iter()
                .map(|v| match v {
                    IValue::Tensor(t) => Ok(t),
                    other => Err(SpnError::Contract(format!("unexpected perceptual output {other:?}"))),
                })
                .collect(),
            IValue::TensorList(ts) => Ok(ts),
            other => Err(SpnError::Contract(format!("unexpected perceptual output {other:?}"))),
        }
    }

    fn tag(&self) -> String {
        "vgg19(torchscript)".into()
    }

    fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut params = self.module.named_parameters().unwrap_or_default();
        params.sort_by(|a, b| a.0.cmp(&b.0));
        params
    }
}

pub fn perceptual_from_run(cfg: &RunConfig) -> Result<Box<dyn PerceptualExtractor>> {
    match cfg.str("perceptual.kind") {
        "stub" => Ok(Box::new(StubPerceptual::new(cfg.int("perceptual.seed") as u64))),
        "vgg19" => {
            let w = cfg.str("perceptual.weights");
            if w.is_empty() {
                return Err(SpnError::Config("perceptual.kind = vgg19 needs perceptual.weights".into()));
            }
            Ok(Box::new(TorchScriptPerceptual::load(Path::new(w))?))
        }
        other => Err(SpnError::UnknownExtractor(other.to_string())),
    }
}
