//! Joint optimization of the prior learner and generator against the
//! discriminator.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tch::{Kind, Tensor};

use crate::checkpoint::{self, CheckpointKind, NamedTensors};
use crate::config::RunConfig;
use crate::data::{stack_images, stack_masks, Dataset, SamplePair};
use crate::error::{Result, SpnError};
use crate::layers::standard_normal;
use crate::losses::{
    self, adversarial_losses, discriminator_adversarial_loss, feature_matching_perceptual_loss, generator_adversarial_loss,
    kl_loss, masks_like, perceptual_diversity_loss, prior_distillation_loss, reconstruction_loss, AdvForm, LossWeights,
    PerceptualExtractor,
};
use crate::model::{trainable, Networks};
use crate::pretext::{extract_targets, register_extractor, PretextExtractor};
use crate::prior::{sample_latent, Mode};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub total_iters: u64,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub decay_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        let tc = TrainConfig {
            mode: Mode::parse(cfg.str("prior.mode"))?,
            total_iters: cfg.usize("train.iters")? as u64,
            batch_size: cfg.usize("train.batch_size")?,
            lr_initial: cfg.float("train.lr_initial"),
            lr_final: cfg.float("train.lr_final"),
            decay_fraction: cfg.float("train.decay_fraction"),
            beta1: cfg.float("train.beta1"),
            beta2: cfg.float("train.beta2"),
            grad_clip: cfg.float("train.grad_clip"),
            seed: cfg.int("train.seed") as u64,
        };
        if !(0.0 < tc.lr_final && tc.lr_final <= tc.lr_initial) {
            return Err(SpnError::Config("need 0 < lr_final <= lr_initial".into()));
        }
        if tc.total_iters == 0 || tc.decay_start() >= tc.total_iters {
            return Err(SpnError::Config("decay must start before the last iteration".into()));
        }
        if tc.batch_size == 0 {
            return Err(SpnError::Config("train.batch_size must be positive".into()));
        }
        Ok(tc)
    }

    pub fn decay_start(&self) -> u64 {
        (self.decay_fraction * self.total_iters as f64).floor() as u64
    }
}

/// Step schedule: `lr_initial` before the decay point, `lr_final` from it on.
pub fn lr_at(cfg: &TrainConfig, iter: u64) -> f64 {
    if iter < cfg.decay_start() {
        cfg.lr_initial
    } else {
        cfg.lr_final
    }
}

/// Adam without weight decay over a fixed, name-sorted parameter list.
pub struct Adam {
    params: Vec<(String, Tensor)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: Vec<(String, Tensor)>, beta1: f64, beta2: f64) -> Self {
        let m = params.iter().map(|(_, p)| p.zeros_like()).collect();
        let v = params.iter().map(|(_, p)| p.zeros_like()).collect();
        Adam { params, m, v, step: 0, beta1, beta2, eps: 1e-8 }
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.params {
            let mut p = p.shallow_clone();
            p.zero_grad();
        }
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`; returns
    /// the norm before clipping.
    pub fn clip_grad_norm(&self, max_norm: f64) -> f64 {
        let grads: Vec<Tensor> = self.params.iter().map(|(_, p)| p.grad()).filter(|g| g.defined()).collect();
        let total: f64 = grads.iter().map(|g| g.square().sum(Kind::Double).double_value(&[])).sum::<f64>().sqrt();
        if total.is_finite() && total > max_norm {
            let scale = max_norm / (total + 1e-6);
            tch::no_grad(|| {
                for g in &grads {
                    let mut g = g.shallow_clone();
                    let _ = g.g_mul_scalar_(scale);
                }
            });
        }
        total
    }

    pub fn step(&mut self, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        tch::no_grad(|| {
            for (i, (_, p)) in self.params.iter().enumerate() {
                let g = p.grad();
                if !g.defined() {
                    continue;
                }
                let m = &self.m[i] * self.beta1 + &g * (1.0 - self.beta1);
                let v = &self.v[i] * self.beta2 + g.square() * (1.0 - self.beta2);
                let update = (&m / bc1) / ((&v / bc2).sqrt() + self.eps) * lr;
                self.m[i].copy_(&m);
                self.v[i].copy_(&v);
                let mut p = p.shallow_clone();
                p.copy_(&(&p - update));
            }
        });
    }

    pub fn state(&self) -> NamedTensors {
        let mut out = NamedTensors::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("m.{name}"), self.m[i].detach());
            out.insert(format!("v.{name}"), self.v[i].detach());
        }
        out.insert("step".into(), Tensor::from_slice(&[self.step]));
        out
    }

    pub fn load_state(&mut self, state: &NamedTensors) -> Result<()> {
        let expected = 2 * self.params.len() + 1;
        if state.len() != expected {
            return Err(SpnError::Manifest(format!("optimizer state has {} entries, expected {expected}", state.len())));
        }
        for (i, (name, p)) in self.params.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("{prefix}.{name}");
                let src = state.get(&key).ok_or_else(|| SpnError::Manifest(format!("optimizer lacks `{key}`")))?;
                if src.size() != p.size() {
                    return Err(SpnError::Manifest(format!("optimizer entry `{key}` has shape {:?}", src.size())));
                }
                *slot = src.to_kind(p.kind());
            }
        }
        self.step = state
            .get("step")
            .ok_or_else(|| SpnError::Manifest("optimizer lacks `step`".into()))?
            .int64_value(&[0]);
        Ok(())
    }
}

/// SHA-256 of a parameter list, for freeze audits.
pub fn param_digest(params: &[(String, Tensor)]) -> String {
    let map: NamedTensors = params.iter().map(|(n, t)| (n.clone(), t.shallow_clone())).collect();
    let mut h = Sha256::new();
    h.update(checkpoint::encode_tensors(&map).expect("float parameters serialize"));
    hex::encode(h.finalize())
}

/// Component losses of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub iteration: u64,
    pub lr: f64,
    pub prior: f64,
    pub img: f64,
    pub adv: f64,
    pub adv_d: f64,
    pub feature: Option<f64>,
    pub diverse: Option<f64>,
    pub kl: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn columns(mode: Mode) -> Vec<&'static str> {
        let mut cols = vec!["iter", "lr", "prior", "img", "adv", "adv_d"];
        if mode == Mode::Probabilistic {
            cols.extend(["feature", "diverse", "kl"]);
        }
        cols.push("total");
        cols
    }

    pub fn values(&self) -> Vec<f64> {
        let mut v = vec![self.iteration as f64, self.lr, self.prior, self.img, self.adv, self.adv_d];
        if let (Some(f), Some(d), Some(k)) = (self.feature, self.diverse, self.kl) {
            v.extend([f, d, k]);
        }
        v.push(self.total);
        v
    }

    pub fn tsv_row(&self) -> String {
        let v = self.values();
        let mut cells = vec![self.iteration.to_string()];
        cells.extend(v[1..].iter().map(|x| format!("{x:.6e}")));
        cells.join("\t")
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter {} prior={:.4} img={:.4} adv={:.4} adv_d={:.4}",
            self.iteration, self.prior, self.img, self.adv, self.adv_d
        )?;
        if let (Some(fe), Some(d), Some(k)) = (self.feature, self.diverse, self.kl) {
            write!(f, " feature={fe:.4} diverse={d:.4} kl={k:.4}")?;
        }
        write!(f, " total={:.4}", self.total)
    }
}

fn scalar(t: &Tensor) -> f64 {
    t.double_value(&[])
}

/// Nearest downsampling of `[B, 1, H, W]` by taking every `2^l`-th pixel.
pub fn mask_pyramid(mask: &Tensor, levels: usize) -> Vec<Tensor> {
    (0..levels)
        .map(|l| {
            let step = 1i64 << l;
            mask.slice(2, 0, None, step).slice(3, 0, None, step)
        })
        .collect()
}

pub struct Trainer {
    pub nets: Networks,
    pub pretext: Box<dyn PretextExtractor>,
    pub perceptual: Box<dyn PerceptualExtractor>,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub adv_form: AdvForm,
    pub iteration: u64,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    epoch_cache: Option<(u64, Vec<usize>)>,
}

fn step_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7f4a_7c15_9e37_79b9);
    rng.set_stream(iteration);
    rng
}

impl Trainer {
    /// Fresh networks plus the frozen extractors named in `cfg`.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let levels = cfg.int_list("prior.channels").len();
        let pretext = pretext_from_run(cfg, levels)?;
        let nets = Networks::build(cfg, pretext.channel_dims().to_vec())?;
        Trainer::with_parts(nets, pretext, losses::perceptual_from_run(cfg)?)
    }

    pub fn with_parts(
        nets: Networks,
        pretext: Box<dyn PretextExtractor>,
        perceptual: Box<dyn PerceptualExtractor>,
    ) -> Result<Self> {
        let cfg = nets.config.clone();
        let train = TrainConfig::from_run(&cfg)?;
        if pretext.channel_dims() != nets.distill_dims.as_slice() {
            return Err(SpnError::Config(format!(
                "extractor dims {:?} do not match the distillation heads {:?}",
                pretext.channel_dims(),
                nets.distill_dims
            )));
        }
        let mut gen_params = trainable(&nets.prior_vs);
        gen_params.iter_mut().for_each(|(n, _)| n.insert_str(0, "prior."));
        gen_params.extend(trainable(&nets.gen_vs).into_iter().map(|(n, t)| (format!("gen.{n}"), t)));
        let disc_params = trainable(&nets.disc_vs);
        Ok(Trainer {
            gen_opt: Adam::new(gen_params, train.beta1, train.beta2),
            disc_opt: Adam::new(disc_params, train.beta1, train.beta2),
            weights: LossWeights::from_run(&cfg)?,
            adv_form: AdvForm::parse(cfg.str("adv.loss_form"))?,
            nets,
            pretext,
            perceptual,
            train,
            iteration: 0,
            epoch_cache: None,
        })
    }

    pub fn mode(&self) -> Mode {
        self.nets.mode()
    }

    pub fn lr(&self) -> f64 {
        lr_at(&self.train, self.iteration)
    }

    /// Dataset indices of the next batch: a seeded permutation per epoch,
    /// consumed in order.
    pub fn batch_indices(&mut self, dataset_len: usize) -> Vec<usize> {
        let b = self.train.batch_size as u64;
        let n = dataset_len as u64;
        (0..b)
            .map(|j| {
                let pos = self.iteration * b + j;
                let epoch = pos / n;
                if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..dataset_len).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
                    rng.set_stream(1 << 40 | epoch);
                    perm.shuffle(&mut rng);
                    self.epoch_cache = Some((epoch, perm));
                }
                self.epoch_cache.as_ref().expect("filled").1[(pos % n) as usize]
            })
            .collect()
    }

    /// Draws the next batch from `dataset` and trains on it.
    pub fn step(&mut self, dataset: &Dataset) -> Result<LossReport> {
        if dataset.is_empty() {
            return Err(SpnError::Invalid("empty training set".into()));
        }
        let indices = self.batch_indices(dataset.len());
        let mut rng = step_rng(self.train.seed, self.iteration);
        let levels = self.nets.levels();
        let pairs: Vec<SamplePair> =
            indices.iter().map(|&i| dataset.training_pair(i, levels, &mut rng)).collect::<Result<_>>()?;
        self.train_step(&pairs)
    }

    /// One discriminator update followed by one update of the prior learner and
    /// generator.
    pub fn train_step(&mut self, batch: &[SamplePair]) -> Result<LossReport> {
        let images = stack_images(&batch.iter().map(|p| &p.image).collect::<Vec<_>>())?;
        let masks = stack_masks(&batch.iter().map(|p| &p.mask).collect::<Vec<_>>())?;
        self.train_step_tensors(&images, &masks)
    }

    pub fn train_step_tensors(&mut self, images: &Tensor, masks: &Tensor) -> Result<LossReport> {
        let kind = self.nets.prior.heads.first().map(|h| h.weight.kind()).unwrap_or(Kind::Float);
        let images = images.to_kind(kind);
        let masks = masks.to_kind(kind);
        let iter = self.iteration;
        let lr = self.lr();
        let mut rng = step_rng(self.train.seed, iter);
        // Keep the per-step stream aligned with `step`, which spent draws on data.
        rng.set_word_pos(1 << 32);
        let batch = images.size()[0];
        let masked = &images * (1.0 - &masks);
        let probabilistic = self.mode() == Mode::Probabilistic;
        let dz = self.nets.latent_dim();
        let z1 = probabilistic.then(|| standard_normal(&mut rng, &[batch, dz]).to_kind(kind));
        let z2 = probabilistic.then(|| standard_normal(&mut rng, &[batch, dz]).to_kind(kind));

        let targets = extract_targets(self.pretext.as_ref(), &images)?;
        let fwd = self.nets.forward(&masked, &masks, z1.as_ref())?;
        let fake = &fwd.output;

        // Discriminator.
        self.disc_opt.zero_grad();
        self.gen_opt.zero_grad();
        let d_real = self.nets.disc.forward(&images, true);
        let d_fake = self.nets.disc.forward(&fake.detach(), true);
        let adv_d = discriminator_adversarial_loss(&d_real.probs, &d_fake.probs, self.adv_form);
        let adv_d_value = scalar(&adv_d);
        if !adv_d_value.is_finite() {
            return Err(SpnError::NonFiniteLoss { iter, report: format!("adv_d={adv_d_value}") });
        }
        adv_d.backward();
        self.disc_opt.clip_grad_norm(self.train.grad_clip);
        self.disc_opt.step(lr);
        self.nets.disc.refresh_spectral();

        // Prior learner and generator.
        self.disc_opt.zero_grad();
        self.gen_opt.zero_grad();
        let projections = self.nets.prior.distill_project(&fwd.pyramid)?;
        let l_prior = prior_distillation_loss(
            &targets.levels,
            &projections,
            &mask_pyramid(&masks, self.nets.levels()),
            self.weights.alpha,
        )?;
        let l_img = reconstruction_loss(&images, fake, &masks, self.weights.delta)?;
        let d_fake = self.nets.disc.discriminate(fake);
        let l_adv = generator_adversarial_loss(&d_fake.probs, self.adv_form);
        let l_det = losses::total_deterministic(&l_prior, &l_img, &l_adv, &self.weights);
        let mut report = LossReport {
            iteration: iter,
            lr,
            prior: scalar(&l_prior),
            img: scalar(&l_img),
            adv: scalar(&l_adv),
            adv_d: adv_d_value,
            feature: None,
            diverse: None,
            kl: None,
            total: 0.0,
        };
        let total = if probabilistic {
            let stats = fwd.stats.as_ref().expect("probabilistic forward has stats");
            let real_disc = tch::no_grad(|| self.nets.disc.discriminate(&images)).features;
            let real_perc = tch::no_grad(|| self.perceptual.features(&images))?;
            let fake_perc = self.perceptual.features(fake)?;
            let l_feature = feature_matching_perceptual_loss(&real_disc, &d_fake.features, &real_perc, &fake_perc)?;
            // Second latent: same context and encoder output, only ẑ changes.
            let z_hat2 = sample_latent(stats, z2.as_ref().expect("drawn"))?;
            let pyramid2 = self.nets.prior.build_pyramid_stochastic(&fwd.ctx, &z_hat2)?;
            let fake2 = self.nets.generator.decode(&fwd.encoded, &pyramid2)?;
            let fake2_perc = self.perceptual.features(&fake2)?;
            let div_masks = masks_like(&masks, &fake_perc);
            let l_div = perceptual_diversity_loss(&fake_perc, &fake2_perc, &div_masks, self.weights.epsilon)?;
            let l_kl = kl_loss(stats);
            report.feature = Some(scalar(&l_feature));
            report.diverse = Some(scalar(&l_div));
            report.kl = Some(scalar(&l_kl));
            losses::total_probabilistic(&l_det, &l_feature, &l_div, &l_kl, &self.weights)
        } else {
            l_det
        };
        report.total = scalar(&total);
        if !report.all_finite() {
            return Err(SpnError::NonFiniteLoss { iter, report: report.to_string() });
        }
        total.backward();
        self.gen_opt.clip_grad_norm(self.train.grad_clip);
        self.gen_opt.step(lr);
        self.disc_opt.zero_grad();
        self.iteration += 1;
        Ok(report)
    }

    /// Digest of the frozen extractors' parameters.
    pub fn extractor_digest(&self) -> String {
        let mut params = self.pretext.parameters();
        params.extend(self.perceptual.parameters());
        param_digest(&params)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.nets.save_params(dir, CheckpointKind::Training, self.iteration)?;
        checkpoint::write_tensors(&checkpoint::optim_path(dir, "gen"), &self.gen_opt.state())?;
        checkpoint::write_tensors(&checkpoint::optim_path(dir, "disc"), &self.disc_opt.state())
    }

    /// Restores networks, optimizer state and the iteration counter. The stored
    /// config is used unless `overrides` is given.
    pub fn resume(dir: &Path, overrides: Option<&RunConfig>) -> Result<Self> {
        let (nets, meta) = Networks::load(dir, overrides)?;
        if meta.kind != CheckpointKind::Training {
            return Err(SpnError::Config(format!("{} is an inference export, not a training checkpoint", dir.display())));
        }
        let cfg = nets.config.clone();
        let pretext = pretext_from_run(&cfg, nets.levels())?;
        let mut t = Trainer::with_parts(nets, pretext, losses::perceptual_from_run(&cfg)?)?;
        t.gen_opt.load_state(&checkpoint::read_tensors(&checkpoint::optim_path(dir, "gen"))?)?;
        t.disc_opt.load_state(&checkpoint::read_tensors(&checkpoint::optim_path(dir, "disc"))?)?;
        t.iteration = meta.iteration;
        Ok(t)
    }
}

pub fn pretext_from_run(cfg: &RunConfig, levels: usize) -> Result<Box<dyn PretextExtractor>> {
    let weights = cfg.str("pretext.weights");
    let weights = (!weights.is_empty()).then(|| Path::new(weights));
    let stages: Vec<usize> = cfg.int_list("pretext.stages").iter().map(|&s| s as usize).collect();
    register_extractor(cfg.str("pretext.kind"), weights, cfg.int("pretext.seed") as u64, levels, &stages)
}

/// Runs one adversarial-only generator update against a frozen discriminator and
/// returns the generator loss before and after (used to check the sign
/// convention).
pub fn adversarial_probe(trainer: &mut Trainer, images: &Tensor, masks: &Tensor, lr: f64) -> Result<(f64, f64)> {
    let masked = images * (1.0 - masks);
    let disc_before = param_digest(&trainable(&trainer.nets.disc_vs));
    let eval = |t: &Trainer| -> Result<f64> {
        let fwd = tch::no_grad(|| t.nets.forward(&masked, masks, None))?;
        let d = tch::no_grad(|| t.nets.disc.discriminate(&fwd.output));
        Ok(scalar(&generator_adversarial_loss(&d.probs, t.adv_form)))
    };
    let before = eval(trainer)?;
    trainer.gen_opt.zero_grad();
    trainer.disc_opt.zero_grad();
    let fwd = trainer.nets.forward(&masked, masks, None)?;
    let (gen_loss, _) = adversarial_losses(&trainer.nets.disc, images, &fwd.output, trainer.adv_form);
    gen_loss.backward();
    trainer.gen_opt.step(lr);
    trainer.disc_opt.zero_grad();
    let after = eval(trainer)?;
    if param_digest(&trainable(&trainer.nets.disc_vs)) != disc_before {
        return Err(SpnError::Invalid("discriminator changed during the probe".into()));
    }
    Ok((before, after))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tc(total: u64) -> TrainConfig {
        let mut cfg = RunConfig::with_preset("default").unwrap();
        cfg.set("train.iters", &total.to_string()).unwrap();
        TrainConfig::from_run(&cfg).unwrap()
    }

    #[test]
    fn schedule_points() {
        let c = tc(150_000);
        assert_eq!(lr_at(&c, 0), 1e-4);
        assert_eq!(lr_at(&c, 127_000), 1e-5);
        assert_eq!(lr_at(&c, c.decay_start() - 1), 1e-4);
        assert_eq!(lr_at(&c, c.decay_start()), 1e-5);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let p = Tensor::from_slice(&[1.0f64, -2.0]).set_requires_grad(true);
        let mut opt = Adam::new(vec![("p".into(), p.shallow_clone())], 0.0, 0.9);
        (&p * &Tensor::from_slice(&[3.0f64, -0.5])).sum(Kind::Double).backward();
        opt.step(0.1);
        let v: Vec<f64> = Vec::try_from(&p.detach()).unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-6, "{v:?}");
        let state = opt.state();
        let mut other = Adam::new(vec![("p".into(), p.shallow_clone())], 0.0, 0.9);
        other.load_state(&state).unwrap();
        assert_eq!(other.step, 1);
    }

    #[test]
    fn mask_pyramid_takes_top_left() {
        let m = Tensor::from_slice(&[0.0f32, 0., 0., 0., 0., 1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0.]).view([1, 1, 4, 4]);
        let p = mask_pyramid(&m, 2);
        assert_eq!(p[1].size(), vec![1, 1, 2, 2]);
        assert_eq!(p[1].sum(Kind::Float).double_value(&[]), 1.0);
    }
}
