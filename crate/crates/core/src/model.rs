//! The assembled network and the inference-side model interface.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tch::{nn, Device, Kind, Tensor};

use crate::adversary::Discriminator;
use crate::checkpoint::{self, CheckpointKind, NamedTensors};
use crate::config::RunConfig;
use crate::data::{ImageTensor, MaskTensor};
use crate::error::{Result, SpnError};
use crate::generator::{DecoderFeatures, GenConfig, Generator};
use crate::layers::standard_normal;
use crate::prior::{sample_latent, ContextFeatures, LatentStats, Mode, PriorConfig, PriorLearner, PriorPyramid, HEADS_PREFIX};

pub fn named_variables(vs: &nn::VarStore) -> NamedTensors {
    vs.variables().into_iter().collect()
}

/// Trainable variables sorted by name.
pub fn trainable(vs: &nn::VarStore) -> Vec<(String, Tensor)> {
    named_variables(vs).into_iter().filter(|(_, t)| t.requires_grad()).collect()
}

pub struct ForwardOutput {
    pub output: Tensor,
    pub ctx: ContextFeatures,
    pub pyramid: PriorPyramid,
    pub decoder: DecoderFeatures,
    pub stats: Option<LatentStats>,
    /// Generator encoder output, reusable for further latent draws.
    pub encoded: Tensor,
}

/// Prior learner, generator and discriminator with their variable stores.
pub struct Networks {
    pub config: RunConfig,
    pub distill_dims: Vec<i64>,
    pub prior_vs: nn::VarStore,
    pub gen_vs: nn::VarStore,
    pub disc_vs: nn::VarStore,
    pub prior: PriorLearner,
    pub generator: Generator,
    pub disc: Discriminator,
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

impl Networks {
    /// Initializes every network from `train.seed`; `distill_dims` are the
    /// pretext extractor's per-level channel counts.
    pub fn build(cfg: &RunConfig, distill_dims: Vec<i64>) -> Result<Self> {
        let seed = cfg.int("train.seed") as u64;
        let prior_cfg = PriorConfig::from_run(cfg, distill_dims.clone())?;
        let gen_cfg = GenConfig::from_run(cfg)?;
        let prior_vs = nn::VarStore::new(Device::Cpu);
        let gen_vs = nn::VarStore::new(Device::Cpu);
        let disc_vs = nn::VarStore::new(Device::Cpu);
        let prior = PriorLearner::new(&prior_vs.root(), &mut stream(seed, 1), &prior_cfg)?;
        let generator = Generator::new(&gen_vs.root(), &mut stream(seed, 2), &gen_cfg);
        let disc = Discriminator::from_run(&disc_vs.root(), &mut stream(seed, 3), cfg)?;
        Ok(Networks { config: cfg.clone(), distill_dims, prior_vs, gen_vs, disc_vs, prior, generator, disc })
    }

    pub fn mode(&self) -> Mode {
        self.prior.mode()
    }

    pub fn levels(&self) -> usize {
        self.prior.levels()
    }

    pub fn latent_dim(&self) -> i64 {
        self.prior.latent_dim()
    }

    pub fn set_kind(&mut self, kind: Kind) {
        self.prior_vs.set_kind(kind);
        self.gen_vs.set_kind(kind);
        self.disc_vs.set_kind(kind);
    }

    /// Full inpainting pass. `masked` must already have missing pixels zeroed;
    /// `z` (standard normal, `[B, d_z]`) is required in probabilistic mode and
    /// ignored otherwise.
    pub fn forward(&self, masked: &Tensor, mask: &Tensor, z: Option<&Tensor>) -> Result<ForwardOutput> {
        let ctx = self.prior.encode_context(masked, mask)?;
        let (pyramid, stats) = match self.mode() {
            Mode::Deterministic => (self.prior.build_pyramid_deterministic(&ctx)?, None),
            Mode::Probabilistic => {
                let z = z.ok_or_else(|| SpnError::Invalid("probabilistic forward needs a latent draw".into()))?;
                let mut stats = self.prior.infer_latent_stats(ctx.top())?;
                let z_hat = sample_latent(&stats, z)?;
                let pyramid = self.prior.build_pyramid_stochastic(&ctx, &z_hat)?;
                stats.z_hat = Some(z_hat);
                (pyramid, Some(stats))
            }
        };
        let encoded = self.generator.encode_image(masked, mask)?;
        let (output, decoder) = self.generator.decode_with_features(&encoded, &pyramid)?;
        Ok(ForwardOutput { output, ctx, pyramid, decoder, stats, encoded })
    }

    pub fn prior_params(&self) -> NamedTensors {
        named_variables(&self.prior_vs)
    }

    pub fn gen_params(&self) -> NamedTensors {
        named_variables(&self.gen_vs)
    }

    pub fn disc_params(&self) -> NamedTensors {
        named_variables(&self.disc_vs)
    }

    /// Writes `params/`, `config.toml` and `meta`. Inference exports leave out the
    /// distillation heads and the discriminator.
    pub fn save_params(&self, dir: &Path, kind: CheckpointKind, iteration: u64) -> Result<()> {
        let mut prior = self.prior_params();
        if kind == CheckpointKind::Inference {
            prior.retain(|name, _| !name.starts_with(HEADS_PREFIX));
        }
        checkpoint::write_tensors(&checkpoint::params_path(dir, "prior"), &prior)?;
        checkpoint::write_tensors(&checkpoint::params_path(dir, "gen"), &self.gen_params())?;
        let disc = checkpoint::params_path(dir, "disc");
        if kind == CheckpointKind::Training {
            checkpoint::write_tensors(&disc, &self.disc_params())?;
        } else if disc.exists() {
            std::fs::remove_file(&disc).map_err(|e| SpnError::io(&disc, e))?;
        }
        let cfg = checkpoint::config_path(dir);
        std::fs::write(&cfg, self.config.to_text()).map_err(|e| SpnError::io(&cfg, e))?;
        let meta = checkpoint::Meta {
            version: checkpoint::FORMAT_VERSION,
            iteration,
            kind,
            distill_dims: self.distill_dims.clone(),
        };
        let mp = checkpoint::meta_path(dir);
        std::fs::write(&mp, meta.to_text()).map_err(|e| SpnError::io(&mp, e))
    }

    /// Rebuilds the networks from a checkpoint directory's own config and loads
    /// its parameters. `overrides` replaces the stored config; an incompatible
    /// one surfaces as a shape-manifest error.
    pub fn load(dir: &Path, overrides: Option<&RunConfig>) -> Result<(Self, checkpoint::Meta)> {
        let meta = checkpoint::read_meta(dir)?;
        let cfg_path = checkpoint::config_path(dir);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| SpnError::io(&cfg_path, e))?;
        let mut cfg = RunConfig::from_text(&text)?;
        if let Some(o) = overrides {
            cfg = o.clone();
        }
        let nets = Networks::build(&cfg, meta.distill_dims.clone())?;
        let is_inference = meta.kind == CheckpointKind::Inference;
        checkpoint::load_into(
            &nets.prior_params(),
            &checkpoint::read_tensors(&checkpoint::params_path(dir, "prior"))?,
            "prior",
            |n| is_inference && n.starts_with(HEADS_PREFIX),
        )?;
        checkpoint::load_into(
            &nets.gen_params(),
            &checkpoint::read_tensors(&checkpoint::params_path(dir, "gen"))?,
            "gen",
            |_| false,
        )?;
        if !is_inference {
            checkpoint::load_into(
                &nets.disc_params(),
                &checkpoint::read_tensors(&checkpoint::params_path(dir, "disc"))?,
                "disc",
                |_| false,
            )?;
        }
        Ok((nets, meta))
    }
}

/// Seed of sample `index` within a request seeded by `seed`, independent of how
/// many other samples are drawn alongside it.
pub fn latent_seed(seed: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Seeds stay below 2^53 so they survive a round trip through JavaScript numbers.
pub const SEED_MASK: u64 = (1 << 53) - 1;

/// Seed of sample `index` in a request seeded by `seed`. Sample 0 uses `seed`
/// itself, so resubmitting any echoed sample seed with one sample reproduces
/// that sample exactly.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    if index == 0 {
        seed & SEED_MASK
    } else {
        latent_seed(seed & SEED_MASK, index) & SEED_MASK
    }
}

/// Standard-normal latent `[1, d]` from a sample seed.
pub fn latent_from_seed(sample_seed: u64, dim: i64) -> Tensor {
    standard_normal(&mut ChaCha8Rng::seed_from_u64(sample_seed), &[1, dim])
}

/// Anything that fills masked regions. `image` is the full ground-truth image;
/// implementations must only read its valid pixels (except deliberate oracles).
pub trait InpaintModel: Send + Sync {
    fn is_probabilistic(&self) -> bool;
    /// Raw (non-composited) prediction for one sample seed.
    fn inpaint(&self, image: &ImageTensor, mask: &MaskTensor, sample_seed: u64) -> Result<ImageTensor>;
    fn describe(&self) -> String;
}

/// Inference wrapper: no distillation heads, no discriminator, no gradients.
pub struct Inpainter {
    nets: std::sync::Mutex<Networks>,
    mode: Mode,
    levels: usize,
    latent_dim: i64,
    pub hash: String,
}

impl Inpainter {
    pub fn new(nets: Networks, hash: String) -> Self {
        Inpainter { mode: nets.mode(), levels: nets.levels(), latent_dim: nets.latent_dim(), nets: nets.into(), hash }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (nets, _) = Networks::load(dir, None)?;
        Ok(Inpainter::new(nets, checkpoint::checkpoint_hash(dir)?))
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn with_networks<T>(&self, f: impl FnOnce(&Networks) -> T) -> T {
        f(&self.nets.lock().unwrap_or_else(|e| e.into_inner()))
    }
}

/// `[1, 3, H, W]` masked image and `[1, 1, H, W]` mask.
pub fn model_inputs(image: &ImageTensor, mask: &MaskTensor) -> Result<(Tensor, Tensor)> {
    if (image.height(), image.width()) != mask.shape() {
        return Err(SpnError::Shape(format!(
            "image {}x{} and mask {}x{} differ",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    let img = image.to_tensor().unsqueeze(0);
    let m = mask.to_tensor().unsqueeze(0);
    Ok((&img * (1.0 - &m), m))
}

impl InpaintModel for Inpainter {
    fn is_probabilistic(&self) -> bool {
        self.mode == Mode::Probabilistic
    }

    fn inpaint(&self, image: &ImageTensor, mask: &MaskTensor, sample_seed: u64) -> Result<ImageTensor> {
        let m = self.size_multiple();
        if image.height() % m != 0 || image.width() % m != 0 {
            return Err(SpnError::Shape(format!("image sides must be multiples of {m}")));
        }
        let (masked, mask_t) = model_inputs(image, mask)?;
        let z = self.is_probabilistic().then(|| latent_from_seed(sample_seed, self.latent_dim));
        let out = self.with_networks(|nets| tch::no_grad(|| nets.forward(&masked, &mask_t, z.as_ref())))?;
        ImageTensor::from_tensor(&out.output)
    }

    fn describe(&self) -> String {
        format!("spn({}, {})", self.mode.as_str(), self.hash)
    }
}

/// Oracle that returns the ground truth.
pub struct IdentityModel;

impl InpaintModel for IdentityModel {
    fn is_probabilistic(&self) -> bool {
        false
    }

    fn inpaint(&self, image: &ImageTensor, _mask: &MaskTensor, _seed: u64) -> Result<ImageTensor> {
        Ok(image.clone())
    }

    fn describe(&self) -> String {
        "identity".into()
    }
}

/// Baseline that fills every pixel with a fixed per-channel color (typically
/// the training-set mean); compositing restores the valid pixels.
pub struct MeanFillModel {
    pub mean: [f32; 3],
}

impl MeanFillModel {
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a ImageTensor>) -> Result<Self> {
        let mut sum = [0f64; 3];
        let mut count = 0usize;
        for img in images {
            let plane = img.height() * img.width();
            for (c, s) in sum.iter_mut().enumerate() {
                *s += img.data()[c * plane..(c + 1) * plane].iter().map(|&v| f64::from(v)).sum::<f64>();
            }
            count += plane;
        }
        if count == 0 {
            return Err(SpnError::Invalid("mean fill needs at least one image".into()));
        }
        Ok(MeanFillModel { mean: sum.map(|s| (s / count as f64) as f32) })
    }
}

impl InpaintModel for MeanFillModel {
    fn is_probabilistic(&self) -> bool {
        false
    }

    fn inpaint(&self, image: &ImageTensor, _mask: &MaskTensor, _seed: u64) -> Result<ImageTensor> {
        let (h, w) = (image.height(), image.width());
        let data = self.mean.iter().flat_map(|&m| std::iter::repeat_n(m, h * w)).collect();
        ImageTensor::new(3, h, w, data)
    }

    fn describe(&self) -> String {
        "mean-fill".into()
    }
}
