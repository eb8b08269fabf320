//! Checks shared by the integration tests and the acceptance report. Each
//! returns `Ok(detail)` on success and `Err(detail)` on failure.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tch::{nn, Kind, Tensor};

use spn::config::RunConfig;
use spn::data::{
    bucket_of, bucket_of_ratio, composite, mask_ratio, Dataset, ImageTensor, MaskTensor, SamplePair, BUCKETS,
    SYNTHETIC_EVAL_BASE, SYNTHETIC_TRAIN_BASE,
};
use spn::eval::{evaluate, fid, mae, psnr, psnr_masked, ssim, StubEmbedding};
use spn::generator::{Spade, SpadeResBlock};
use spn::losses::{self, AdvForm, LossWeights, StubPerceptual};
use spn::model::{sample_seed, InpaintModel, Inpainter, MeanFillModel, Networks};
use spn::prior::{LatentStats, Mode};
use spn::training::{adversarial_probe, Trainer};
use spn::visualize::{cluster_feature_map, kmeans};
use spn::SpnError;

pub type Outcome = Result<String, String>;

pub fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn desk(size: usize, mode: Mode) -> RunConfig {
    let mut cfg = RunConfig::with_preset("desk").unwrap();
    cfg.set("data.size", &size.to_string()).unwrap();
    cfg.set("prior.mode", mode.as_str()).unwrap();
    cfg
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, dims: &[i64]) -> Tensor {
    let n: i64 = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_slice(&v).view(dims)
}

pub fn uniform(rng: &mut ChaCha8Rng, dims: &[i64], lo: f64, hi: f64) -> Tensor {
    let n: i64 = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_slice(&v).view(dims)
}

pub fn binary(rng: &mut ChaCha8Rng, dims: &[i64]) -> Tensor {
    let n: i64 = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    Tensor::from_slice(&v).view(dims)
}

pub fn values(t: &Tensor) -> Vec<f64> {
    Vec::try_from(&t.detach().to_kind(Kind::Double).contiguous().view([-1])).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.double_value(&[])
}

// ---------------------------------------------------------------------------
// Shapes

fn expect_size(t: &Tensor, want: &[i64], what: &str) -> Result<(), String> {
    if t.size() != want {
        return Err(format!("{what}: {:?}, expected {want:?}", t.size()));
    }
    Ok(())
}

/// Every level `l` of context, prior and decoder features sits at `H / 2^l`
/// (0-based) with the configured widths; outputs are `[B, 3, H, W]` in `(-1, 1)`.
pub fn shape_contracts(h: i64, mode: Mode) -> Result<(), String> {
    let cfg = desk(h as usize, mode);
    let prior_ch = cfg.int_list("prior.channels");
    let gen_ch = cfg.int_list("gen.channels");
    let levels = prior_ch.len();
    let nets = Networks::build(&cfg, vec![8; levels]).map_err(fail)?;
    let b = 2;
    let mut r = rng(h as u64);
    let masked = uniform(&mut r, &[b, 3, h, h], -1.0, 1.0).to_kind(Kind::Float);
    let mask = binary(&mut r, &[b, 1, h, h]).to_kind(Kind::Float);
    let z = (mode == Mode::Probabilistic).then(|| randn(&mut r, &[b, nets.latent_dim()]).to_kind(Kind::Float));
    let out = tch::no_grad(|| nets.forward(&masked, &mask, z.as_ref())).map_err(fail)?;
    for (what, feats) in [("context", &out.ctx.levels), ("prior", &out.pyramid.levels), ("decoder", &out.decoder.levels)]
    {
        if feats.len() != levels {
            return Err(format!("{what}: {} levels, expected {levels}", feats.len()));
        }
        for (l, f) in feats.iter().enumerate() {
            let s = h >> l;
            let c = if what == "decoder" { gen_ch[l] } else { prior_ch[l] };
            expect_size(f, &[b, c, s, s], &format!("H={h} {what} level {}", l + 1))?;
        }
    }
    let top = h >> (levels - 1);
    expect_size(&out.encoded, &[b, gen_ch[levels - 1], top, top], &format!("H={h} encoder"))?;
    expect_size(&out.output, &[b, 3, h, h], &format!("H={h} output"))?;
    let (lo, hi) = (scalar(&out.output.min()), scalar(&out.output.max()));
    if lo <= -1.0 || hi >= 1.0 {
        return Err(format!("H={h} output range [{lo}, {hi}]"));
    }
    let distilled = tch::no_grad(|| nets.prior.distill_project(&out.pyramid)).map_err(fail)?;
    for (l, p) in distilled.iter().enumerate() {
        let s = h >> l;
        expect_size(p, &[b, 8, s, s], &format!("H={h} distillation level {}", l + 1))?;
    }
    if let Some(stats) = &out.stats {
        expect_size(&stats.mu, &[b, nets.latent_dim()], "latent mean")?;
        expect_size(&stats.logvar, &[b, nets.latent_dim()], "latent log-variance")?;
    }
    Ok(())
}

pub fn shape_suite() -> Outcome {
    for h in [32, 64, 128] {
        for mode in [Mode::Deterministic, Mode::Probabilistic] {
            shape_contracts(h, mode)?;
        }
    }
    Ok("H in {32, 64, 128}, both modes".into())
}

// ---------------------------------------------------------------------------
// Gradients

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-3;

/// Largest relative error between autograd and central differences over every
/// element of every tensor in `wrt`. `f` must read the tensors in `wrt` afresh on
/// each call.
pub fn max_fd_error(wrt: &[Tensor], f: &dyn Fn() -> Tensor) -> f64 {
    for t in wrt {
        let mut g = t.grad();
        if g.defined() {
            let _ = g.zero_();
        }
    }
    f().backward();
    let mut worst = 0.0f64;
    for t in wrt {
        let analytic = values(&t.grad());
        let flat = t.detach().view([-1]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = flat.double_value(&[i as i64]);
            let eval_at = |v: f64| {
                let _ = flat.get(i as i64).fill_(v);
                scalar(&tch::no_grad(f))
            };
            let plus = eval_at(orig + FD_STEP);
            let minus = eval_at(orig - FD_STEP);
            eval_at(orig);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

fn leaf(t: Tensor) -> Tensor {
    t.to_kind(Kind::Double).set_requires_grad(true)
}

fn module_params(vs: &nn::VarStore) -> Vec<Tensor> {
    let mut v: Vec<_> = vs.variables().into_iter().collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v.into_iter().map(|(_, t)| t).collect()
}

/// Random SPADE heads (not the zero init) so modulation actually depends on the prior.
fn randomize(vs: &nn::VarStore, seed: u64) {
    let mut r = rng(seed);
    tch::no_grad(|| {
        for t in module_params(vs) {
            let noise = randn(&mut r, &t.size()) * 0.5;
            let _ = t.detach().copy_(&noise);
        }
    });
}

pub fn gradient_checks() -> Vec<(String, f64)> {
    let mut results = Vec::new();
    let mut r = rng(2024);

    // SPADE modulation: feature [1, 2, 4, 4], prior [1, 3, 2, 2] (upsampled inside).
    {
        let mut vs = nn::VarStore::new(tch::Device::Cpu);
        let spade = Spade::new(&vs.root(), &mut rng(1), 2, 3, 4);
        vs.double();
        randomize(&vs, 11);
        let feat = leaf(randn(&mut r, &[1, 2, 4, 4]));
        let prior = leaf(randn(&mut r, &[1, 3, 2, 2]));
        let weight = randn(&mut r, &[1, 2, 4, 4]);
        let mut wrt = vec![feat.shallow_clone(), prior.shallow_clone()];
        wrt.extend(module_params(&vs));
        let err = max_fd_error(&wrt, &|| (spade.modulate(&feat, &prior).unwrap() * &weight).sum(Kind::Double));
        results.push(("spade_modulate".into(), err));
    }

    // SPADE ResBlock with a learned shortcut: 2 → 3 channels.
    {
        let mut vs = nn::VarStore::new(tch::Device::Cpu);
        let block = SpadeResBlock::new(&vs.root(), &mut rng(2), 2, 3, 3, 4);
        vs.double();
        randomize(&vs, 12);
        let x = leaf(randn(&mut r, &[1, 2, 4, 4]));
        let prior = leaf(randn(&mut r, &[1, 3, 4, 4]));
        let weight = randn(&mut r, &[1, 3, 4, 4]);
        let mut wrt = vec![x.shallow_clone(), prior.shallow_clone()];
        wrt.extend(module_params(&vs));
        let err = max_fd_error(&wrt, &|| (block.forward(&x, &prior).unwrap() * &weight).sum(Kind::Double));
        results.push(("spade_resblock".into(), err));
    }

    let dims = [1i64, 2, 4, 4];
    {
        let t = [leaf(randn(&mut r, &dims)), leaf(randn(&mut r, &[1, 2, 2, 2]))];
        let p = [leaf(randn(&mut r, &dims)), leaf(randn(&mut r, &[1, 2, 2, 2]))];
        let m = [binary(&mut r, &[1, 1, 4, 4]), binary(&mut r, &[1, 1, 2, 2])];
        let mut wrt: Vec<Tensor> = t.iter().map(Tensor::shallow_clone).collect();
        wrt.extend(p.iter().map(Tensor::shallow_clone));
        let err = max_fd_error(&wrt, &|| losses::prior_distillation_loss(&t, &p, &m, 3.0).unwrap());
        results.push(("prior_distillation_loss".into(), err));
    }
    {
        let real = leaf(randn(&mut r, &[1, 3, 4, 4]));
        let fake = leaf(randn(&mut r, &[1, 3, 4, 4]));
        let m = binary(&mut r, &[1, 1, 4, 4]);
        let err = max_fd_error(&[real.shallow_clone(), fake.shallow_clone()], &|| {
            losses::reconstruction_loss(&real, &fake, &m, 4.0).unwrap()
        });
        results.push(("reconstruction_loss".into(), err));
    }
    for form in [AdvForm::Paper, AdvForm::NonSaturating] {
        let d_real = leaf(uniform(&mut r, &[1, 1, 4, 4], 0.05, 0.95));
        let d_fake = leaf(uniform(&mut r, &[1, 1, 4, 4], 0.05, 0.95));
        let err = max_fd_error(&[d_fake.shallow_clone()], &|| losses::generator_adversarial_loss(&d_fake, form));
        results.push((format!("generator_adversarial_loss({form:?})"), err));
        let err = max_fd_error(&[d_real.shallow_clone(), d_fake.shallow_clone()], &|| {
            losses::discriminator_adversarial_loss(&d_real, &d_fake, form)
        });
        results.push((format!("discriminator_adversarial_loss({form:?})"), err));
    }
    {
        let mu = leaf(randn(&mut r, &[2, 4]));
        let logvar = leaf(randn(&mut r, &[2, 4]) * 0.5);
        let err = max_fd_error(&[mu.shallow_clone(), logvar.shallow_clone()], &|| {
            losses::kl_loss(&LatentStats { mu: mu.shallow_clone(), logvar: logvar.shallow_clone(), z_hat: None })
        });
        results.push(("kl_loss".into(), err));
    }
    {
        let make = |r: &mut ChaCha8Rng| vec![leaf(randn(r, &dims)), leaf(randn(r, &[1, 2, 2, 2]))];
        let (dr, df, pr, pf) = (make(&mut r), make(&mut r), make(&mut r), make(&mut r));
        let wrt: Vec<Tensor> = dr.iter().chain(&df).chain(&pr).chain(&pf).map(Tensor::shallow_clone).collect();
        let err = max_fd_error(&wrt, &|| losses::feature_matching_perceptual_loss(&dr, &df, &pr, &pf).unwrap());
        results.push(("feature_matching_perceptual_loss".into(), err));
    }
    {
        let f1 = vec![leaf(randn(&mut r, &dims)), leaf(randn(&mut r, &[1, 2, 2, 2]))];
        let f2 = vec![leaf(randn(&mut r, &dims)), leaf(randn(&mut r, &[1, 2, 2, 2]))];
        let m = vec![binary(&mut r, &[1, 1, 4, 4]), Tensor::ones([1, 1, 2, 2], (Kind::Double, tch::Device::Cpu))];
        let wrt: Vec<Tensor> = f1.iter().chain(&f2).map(Tensor::shallow_clone).collect();
        let err = max_fd_error(&wrt, &|| losses::perceptual_diversity_loss(&f1, &f2, &m, 1e-5).unwrap());
        results.push(("perceptual_diversity_loss".into(), err));
    }
    {
        let mut perceptual = StubPerceptual::new(5);
        perceptual.set_kind(Kind::Double);
        let a = leaf(uniform(&mut r, &[1, 3, 4, 4], -1.0, 1.0));
        let b = leaf(uniform(&mut r, &[1, 3, 4, 4], -1.0, 1.0));
        let m = Tensor::ones([1, 1, 4, 4], (Kind::Double, tch::Device::Cpu));
        let err = max_fd_error(&[a.shallow_clone(), b.shallow_clone()], &|| {
            losses::perceptual_diversity_loss_images(&a, &b, &perceptual, &m, 1e-5).unwrap()
        });
        results.push(("perceptual_diversity_loss_images".into(), err));
    }
    {
        let w = LossWeights::default();
        let t: Vec<Tensor> = (0..7).map(|_| leaf(randn(&mut r, &[]))).collect();
        let err = max_fd_error(&t[..3], &|| losses::total_deterministic(&t[0], &t[1], &t[2], &w));
        results.push(("total_deterministic".into(), err));
        let err = max_fd_error(&t[3..], &|| losses::total_probabilistic(&t[3], &t[4], &t[5], &t[6], &w));
        results.push(("total_probabilistic".into(), err));
    }
    results
}

pub fn gradient_suite() -> Outcome {
    let results = gradient_checks();
    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let detail: Vec<String> = results.iter().map(|(n, e)| format!("{n}={e:.1e}")).collect();
    if results.iter().all(|(_, e)| *e < FD_TOLERANCE) {
        Ok(format!("max relative error {worst:.2e} over {} checks", results.len()))
    } else {
        Err(detail.join(", "))
    }
}

// ---------------------------------------------------------------------------
// Loss oracles: plain loops over f64 values, written from the formulas.

pub const ORACLE_TOLERANCE: f64 = 1e-6;
pub const ORACLE_INSTANCES: u64 = 10;

/// `[B, C, H, W]` values and a `[B, 1, H, W]` mask broadcast over channels.
fn weighted_l1_oracle(a: &[f64], b: &[f64], mask: &[f64], dims: [usize; 4], weight: f64) -> f64 {
    let [bs, c, h, w] = dims;
    let mut sum = 0.0;
    for n in 0..bs {
        for ch in 0..c {
            for i in 0..h * w {
                let idx = (n * c + ch) * h * w + i;
                sum += (a[idx] - b[idx]).abs() * (1.0 + weight * mask[n * h * w + i]);
            }
        }
    }
    sum / (bs * c * h * w) as f64
}

fn random_dims(r: &mut ChaCha8Rng) -> [usize; 4] {
    [r.random_range(1..3), r.random_range(1..4), r.random_range(2..5), r.random_range(2..5)]
}

fn dims_i64(d: [usize; 4]) -> [i64; 4] {
    d.map(|v| v as i64)
}

pub fn loss_oracles() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, got: f64, want: f64| {
        let err = (got - want).abs();
        match out.iter_mut().find(|(n, _)| n == name) {
            Some((_, e)) => *e = e.max(err),
            None => out.push((name.to_string(), err)),
        }
    };
    for inst in 0..ORACLE_INSTANCES {
        let mut r = rng(7_000 + inst);

        // Distillation: sum over levels of weighted mean absolute errors.
        let alpha = r.random_range(0.0..5.0);
        let levels = r.random_range(1..4);
        let (mut ts, mut ps, mut ms, mut want) = (Vec::new(), Vec::new(), Vec::new(), 0.0);
        for _ in 0..levels {
            let d = random_dims(&mut r);
            let (t, p) = (randn(&mut r, &dims_i64(d)), randn(&mut r, &dims_i64(d)));
            let m = binary(&mut r, &[d[0] as i64, 1, d[2] as i64, d[3] as i64]);
            want += weighted_l1_oracle(&values(&t), &values(&p), &values(&m), d, alpha);
            ts.push(t);
            ps.push(p);
            ms.push(m);
        }
        record("distillation", scalar(&losses::prior_distillation_loss(&ts, &ps, &ms, alpha).unwrap()), want);

        // Reconstruction.
        let d = random_dims(&mut r);
        let d = [d[0], 3, d[2], d[3]];
        let (real, fake) = (randn(&mut r, &dims_i64(d)), randn(&mut r, &dims_i64(d)));
        let m = binary(&mut r, &[d[0] as i64, 1, d[2] as i64, d[3] as i64]);
        let delta = r.random_range(0.0..6.0);
        let want = weighted_l1_oracle(&values(&real), &values(&fake), &values(&m), d, delta);
        record("reconstruction", scalar(&losses::reconstruction_loss(&real, &fake, &m, delta).unwrap()), want);

        // KL: 0.5 Σ_j (μ² + σ² − log σ² − 1), averaged over the batch.
        let (bs, dim) = (r.random_range(1..4), r.random_range(1..6));
        let (mu, lv) = (randn(&mut r, &[bs, dim]), randn(&mut r, &[bs, dim]));
        let (mv, lvv) = (values(&mu), values(&lv));
        let mut want = 0.0;
        for n in 0..bs as usize {
            for j in 0..dim as usize {
                let (m_, l_) = (mv[n * dim as usize + j], lvv[n * dim as usize + j]);
                want += 0.5 * (m_ * m_ + l_.exp() - l_ - 1.0);
            }
        }
        want /= bs as f64;
        let stats = LatentStats { mu, logvar: lv, z_hat: None };
        record("kl", scalar(&losses::kl_loss(&stats)), want);

        // Feature matching: per-group average of per-layer mean absolute differences.
        let group = |r: &mut ChaCha8Rng, n: usize| -> (Vec<Tensor>, Vec<Tensor>, f64) {
            let (mut a, mut b, mut acc) = (Vec::new(), Vec::new(), 0.0);
            for _ in 0..n {
                let d = random_dims(r);
                let (x, y) = (randn(r, &dims_i64(d)), randn(r, &dims_i64(d)));
                let (xv, yv) = (values(&x), values(&y));
                acc += xv.iter().zip(&yv).map(|(p, q)| (p - q).abs()).sum::<f64>() / xv.len() as f64;
                a.push(x);
                b.push(y);
            }
            (a, b, acc / n as f64)
        };
        let (dr, df, want_d) = group(&mut r, 3);
        let (pr, pf, want_p) = group(&mut r, 2);
        record(
            "feature_matching",
            scalar(&losses::feature_matching_perceptual_loss(&dr, &df, &pr, &pf).unwrap()),
            want_d + want_p,
        );

        // Diversity: per layer, batch mean of 1 / (Σ |masked difference| + ε); then
        // the mean over layers.
        let eps = 10f64.powf(r.random_range(-6.0..-2.0));
        let (mut f1, mut f2, mut masks, mut want) = (Vec::new(), Vec::new(), Vec::new(), 0.0);
        let k = r.random_range(1..4);
        let bs = r.random_range(1..3);
        for _ in 0..k {
            let d = random_dims(&mut r);
            let d = [bs, d[1], d[2], d[3]];
            let (a, b) = (randn(&mut r, &dims_i64(d)), randn(&mut r, &dims_i64(d)));
            let m = binary(&mut r, &[bs as i64, 1, d[2] as i64, d[3] as i64]);
            let (av, bv, mv) = (values(&a), values(&b), values(&m));
            let [_, c, h, w] = d;
            let mut layer = 0.0;
            for n in 0..bs {
                let mut dist = 0.0;
                for ch in 0..c {
                    for i in 0..h * w {
                        let idx = (n * c + ch) * h * w + i;
                        let mm = mv[n * h * w + i];
                        dist += (av[idx] * mm - bv[idx] * mm).abs();
                    }
                }
                layer += 1.0 / (dist + eps);
            }
            want += layer / bs as f64;
            f1.push(a);
            f2.push(b);
            masks.push(m);
        }
        want /= k as f64;
        record("diversity", scalar(&losses::perceptual_diversity_loss(&f1, &f2, &masks, eps).unwrap()), want);

        // Composite objectives with random weights.
        let w = LossWeights {
            alpha: r.random_range(0.0..5.0),
            delta: r.random_range(0.0..5.0),
            lambda1: r.random_range(0.0..20.0),
            lambda2: r.random_range(0.0..5.0),
            lambda3: r.random_range(0.0..20.0),
            lambda4: r.random_range(0.0..5.0),
            lambda5: r.random_range(0.0..1.0),
            epsilon: 1e-5,
        };
        let t: Vec<f64> = (0..6).map(|_| r.random_range(-3.0..3.0)).collect();
        let tt: Vec<Tensor> = t.iter().map(|&v| Tensor::from(v)).collect();
        let det_want = t[0] + w.lambda1 * t[1] + w.lambda2 * t[2];
        let det = losses::total_deterministic(&tt[0], &tt[1], &tt[2], &w);
        record("total_deterministic", scalar(&det), det_want);
        let prob_want = det_want + w.lambda3 * t[3] + w.lambda4 * t[4] + w.lambda5 * t[5];
        record("total_probabilistic", scalar(&losses::total_probabilistic(&det, &tt[3], &tt[4], &tt[5], &w)), prob_want);
    }
    out
}

pub fn loss_oracle_suite() -> Outcome {
    let results = loss_oracles();
    let detail: Vec<String> = results.iter().map(|(n, e)| format!("{n}={e:.1e}")).collect();
    if results.iter().all(|(_, e)| *e <= ORACLE_TOLERANCE) {
        Ok(format!("{ORACLE_INSTANCES} instances each: {}", detail.join(", ")))
    } else {
        Err(detail.join(", "))
    }
}

// ---------------------------------------------------------------------------
// Adversarial sign

pub fn adversarial_sign() -> Outcome {
    let cfg = desk(32, Mode::Deterministic);
    let mut trainer = Trainer::new(&cfg).map_err(fail)?;
    let pairs: Vec<SamplePair> = (0..4).map(|i| spn::data::make_synthetic_pair(i, 32).unwrap()).collect();
    let images = spn::data::stack_images(&pairs.iter().map(|p| &p.image).collect::<Vec<_>>()).map_err(fail)?;
    let masks = spn::data::stack_masks(&pairs.iter().map(|p| &p.mask).collect::<Vec<_>>()).map_err(fail)?;
    let (before, after) = adversarial_probe(&mut trainer, &images, &masks, 1e-4).map_err(fail)?;
    let detail = format!("-mean(log(1-D(fake))) {before:.6} -> {after:.6}");
    if after < before {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Desk training

pub const DESK_SIZE: usize = 64;
pub const DESK_TRAIN_PAIRS: usize = 4096;
pub const DESK_TEST_PAIRS: usize = 64;

pub fn train(cfg: &RunConfig, dataset: &Dataset, log_every: u64) -> Result<Trainer, String> {
    let mut trainer = Trainer::new(cfg).map_err(fail)?;
    let start = std::time::Instant::now();
    while trainer.iteration < trainer.train.total_iters {
        let report = trainer.step(dataset).map_err(fail)?;
        if log_every > 0 && report.iteration % log_every == 0 {
            eprintln!("  {report} [{:.0}s]", start.elapsed().as_secs_f64());
        }
    }
    Ok(trainer)
}

pub fn test_pairs() -> Vec<SamplePair> {
    Dataset::Synthetic { first_seed: SYNTHETIC_EVAL_BASE, len: DESK_TEST_PAIRS, size: DESK_SIZE }
        .evaluation_pairs(0, 3)
        .unwrap()
}

pub fn train_dataset() -> Dataset {
    Dataset::Synthetic { first_seed: SYNTHETIC_TRAIN_BASE, len: DESK_TRAIN_PAIRS, size: DESK_SIZE }
}

/// Mean over pairs of the masked-region PSNR of composited outputs.
pub fn mean_masked_psnr(model: &dyn InpaintModel, pairs: &[SamplePair]) -> Result<f64, String> {
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        let raw = model.inpaint(&p.image, &p.mask, sample_seed(i as u64, 0)).map_err(fail)?;
        let out = composite(&raw, &p.image, &p.mask).map_err(fail)?;
        total += psnr_masked(&p.image, &out, &p.mask).map_err(fail)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean color of the first `n` training images.
pub fn mean_fill(dataset: &Dataset, n: usize) -> MeanFillModel {
    let mut r = rng(0);
    let images: Vec<ImageTensor> = (0..n).map(|i| dataset.training_pair(i, 3, &mut r).unwrap().image).collect();
    MeanFillModel::from_images(&images).unwrap()
}

pub fn desk_deterministic() -> Outcome {
    let cfg = desk(DESK_SIZE, Mode::Deterministic);
    let ds = train_dataset();
    let trainer = train(&cfg, &ds, 250)?;
    let model = Inpainter::new(trainer.nets, "desk-det".into());
    let pairs = test_pairs();
    let ours = mean_masked_psnr(&model, &pairs)?;
    let baseline = mean_masked_psnr(&mean_fill(&ds, 512), &pairs)?;
    let detail = format!("masked PSNR {ours:.2} dB vs mean fill {baseline:.2} dB (margin {:.2} dB)", ours - baseline);
    if ours - baseline >= 2.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub const OVERFIT_IMAGES: usize = 8;
pub const OVERFIT_ITERS: u64 = 500;

pub fn overfit_config() -> RunConfig {
    let mut cfg = desk(DESK_SIZE, Mode::Deterministic);
    cfg.set("train.iters", &OVERFIT_ITERS.to_string()).unwrap();
    cfg.set("train.batch_size", &OVERFIT_IMAGES.to_string()).unwrap();
    cfg
}

/// Raw (non-composited) reconstruction MAE over the training images, in `[0, 1]` units.
pub fn overfit() -> Outcome {
    let cfg = overfit_config();
    let ds = Dataset::Synthetic { first_seed: SYNTHETIC_TRAIN_BASE, len: OVERFIT_IMAGES, size: DESK_SIZE };
    let trainer = train(&cfg, &ds, 100)?;
    let model = Inpainter::new(trainer.nets, "overfit".into());
    let mut total = 0.0;
    let pairs = ds.evaluation_pairs(0, 3).map_err(fail)?;
    for p in &pairs {
        let raw = model.inpaint(&p.image, &p.mask, 0).map_err(fail)?;
        total += mae(&p.image, &raw).map_err(fail)?;
    }
    let err = total / pairs.len() as f64;
    let detail = format!("training reconstruction MAE {err:.4}");
    if err < 0.02 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn desk_probabilistic() -> Outcome {
    let cfg = desk(DESK_SIZE, Mode::Probabilistic);
    let trainer = train(&cfg, &train_dataset(), 250)?;
    let model = Inpainter::new(trainer.nets, "desk-prob".into());
    let pairs = test_pairs();
    probabilistic_properties(&model, &pairs, 5)
}

/// Sample spread on masked pixels, bit-identical valid pixels after compositing,
/// and best-of-k dominance on every pair.
pub fn probabilistic_properties(model: &dyn InpaintModel, pairs: &[SamplePair], k: usize) -> Outcome {
    let p = &pairs[0];
    let raws: Vec<ImageTensor> = (0..k as u64).map(|j| model.inpaint(&p.image, &p.mask, sample_seed(99, j)).unwrap()).collect();
    let comps: Vec<ImageTensor> = raws.iter().map(|r| composite(r, &p.image, &p.mask).unwrap()).collect();
    let (c, h, w) = p.image.shape();
    let plane = h * w;
    let (mut spread, mut n) = (0.0, 0usize);
    for ch in 0..c {
        for i in 0..plane {
            let idx = ch * plane + i;
            if p.mask.data()[i] == 1 {
                let vals: Vec<f64> = raws.iter().map(|r| (f64::from(r.data()[idx]) + 1.0) * 0.5).collect();
                let mean = vals.iter().sum::<f64>() / k as f64;
                spread += (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64).sqrt();
                n += 1;
            } else if comps.iter().any(|o| o.data()[idx].to_bits() != comps[0].data()[idx].to_bits()) {
                return Err(format!("valid pixel {idx} differs across composited samples"));
            }
        }
    }
    let spread = spread / n.max(1) as f64;
    let report = evaluate(model, pairs, k, true, 0, &StubEmbedding::new(13)).map_err(fail)?;
    let dominated = report.pairs.iter().all(|r| r.sample_psnrs.iter().all(|&s| r.psnr >= s));
    let detail = format!(
        "masked std {spread:.4}, valid region bit-identical, best-of-{k} dominance on {}/{} pairs",
        report.pairs.iter().filter(|r| r.sample_psnrs.iter().all(|&s| r.psnr >= s)).count(),
        report.pairs.len()
    );
    if spread >= 1e-3 && dominated && report.k == k {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Metrics

pub fn gaussian_set(r: &mut ChaCha8Rng, n: usize, mean: &[f64]) -> Vec<Vec<f64>> {
    (0..n).map(|_| mean.iter().map(|m| { let z: f64 = StandardNormal.sample(&mut *r); m + z }).collect()).collect()
}

pub fn random_image(r: &mut ChaCha8Rng, h: usize) -> ImageTensor {
    ImageTensor::new(3, h, h, (0..3 * h * h).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn metric_suite() -> Outcome {
    let mut r = rng(31);
    let x = gaussian_set(&mut r, 500, &[0.0; 4]);
    let self_fid = fid(&x, &x).map_err(fail)?;
    let m = [1.0, -0.5, 0.5, 1.0];
    let a = gaussian_set(&mut r, 10_000, &[0.0; 4]);
    let b = gaussian_set(&mut r, 10_000, &m);
    let closed: f64 = m.iter().map(|v| v * v).sum();
    let shifted = fid(&a, &b).map_err(fail)?;
    let img = random_image(&mut r, 32);
    let other = random_image(&mut r, 32);
    let self_ssim = ssim(&img, &img).map_err(fail)?;
    let (ua, ub) = (img.to_unit_range(), other.to_unit_range());
    let mse = ua.iter().zip(&ub).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / ua.len() as f64;
    let psnr_err = (psnr(&img, &other).map_err(fail)? - 10.0 * (1.0 / mse).log10()).abs();
    let mae_want = ua.iter().zip(&ub).map(|(p, q)| (p - q).abs()).sum::<f64>() / ua.len() as f64;
    let mae_err = (mae(&img, &other).map_err(fail)? - mae_want).abs();
    let detail = format!(
        "FID(X,X)={self_fid:.1e}, FID shift {shifted:.4} vs {closed:.4}, SSIM(x,x)={self_ssim}, PSNR err {psnr_err:.1e}, MAE err {mae_err:.1e}"
    );
    let ok = self_fid < 1e-6
        && ((shifted - closed) / closed).abs() <= 0.1
        && (self_ssim - 1.0).abs() < 1e-12
        && psnr_err <= 1e-6
        && mae_err <= 1e-6;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Protocol

/// Random mask with a random number of missing pixels at random positions.
pub fn random_mask(r: &mut ChaCha8Rng, size: usize) -> MaskTensor {
    let n = size * size;
    let missing = r.random_range(0..=n);
    let mut data = vec![0u8; n];
    for idx in rand::seq::index::sample(r, n, missing) {
        data[idx] = 1;
    }
    MaskTensor::new(size, size, data).unwrap()
}

pub fn bucket_partition(masks: usize) -> Result<usize, String> {
    let mut r = rng(4);
    let mut inside = 0;
    for _ in 0..masks {
        let m = random_mask(&mut r, 32);
        let ratio = mask_ratio(&m);
        let holders: Vec<_> = BUCKETS.iter().filter(|b| b.contains(ratio)).collect();
        match bucket_of(&m) {
            Ok(b) => {
                inside += 1;
                if holders.len() != 1 || holders[0].label != b.label {
                    return Err(format!("ratio {ratio}: {} buckets claim it", holders.len()));
                }
            }
            Err(SpnError::OutOfProtocol(_)) => {
                if !holders.is_empty() || (ratio > 0.0 && ratio <= 0.6) {
                    return Err(format!("ratio {ratio} rejected"));
                }
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    // The partition must also agree at every interval edge.
    for edge in [0.1, 0.2, 0.3, 0.4, 0.5, 0.6] {
        if BUCKETS.iter().filter(|b| b.contains(edge)).count() != 1 || bucket_of_ratio(edge).is_err() {
            return Err(format!("edge {edge}"));
        }
    }
    Ok(inside)
}

pub fn small_model(mode: Mode, seed: u64) -> Inpainter {
    let mut cfg = desk(32, mode);
    cfg.set("train.seed", &seed.to_string()).unwrap();
    Inpainter::new(Networks::build(&cfg, vec![8, 8, 8]).unwrap(), format!("init-{seed}"))
}

pub fn report_reproducible() -> Result<(), String> {
    let model = small_model(Mode::Probabilistic, 3);
    let pairs = Dataset::Synthetic { first_seed: 500, len: 6, size: 32 }.evaluation_pairs(0, 3).map_err(fail)?;
    let emb = StubEmbedding::new(13);
    let a = evaluate(&model, &pairs, 3, true, 17, &emb).map_err(fail)?;
    let b = evaluate(&model, &pairs, 3, true, 17, &emb).map_err(fail)?;
    if a.to_table() != b.to_table() || a.to_key_values() != b.to_key_values() {
        return Err("evaluation reports differ under a fixed seed".into());
    }
    Ok(())
}

pub fn checkpoint_round_trip() -> Result<(), String> {
    use spn::checkpoint::{params_path, read_tensors, CheckpointKind};
    let cfg = desk(32, Mode::Probabilistic);
    let mut cfg = cfg;
    cfg.set("train.batch_size", "2").unwrap();
    let mut trainer = Trainer::new(&cfg).map_err(fail)?;
    let ds = Dataset::Synthetic { first_seed: 0, len: 8, size: 32 };
    trainer.step(&ds).map_err(fail)?;
    let dir = tempfile::tempdir().map_err(fail)?;
    let ckpt = dir.path().join("ckpt");
    trainer.save(&ckpt).map_err(fail)?;
    let restored = Trainer::resume(&ckpt, None).map_err(fail)?;
    let same = |a: spn::checkpoint::NamedTensors, b: spn::checkpoint::NamedTensors| {
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.equal(tb))
    };
    if !same(trainer.nets.prior_params(), restored.nets.prior_params())
        || !same(trainer.nets.gen_params(), restored.nets.gen_params())
        || !same(trainer.nets.disc_params(), restored.nets.disc_params())
        || restored.iteration != trainer.iteration
    {
        return Err("restored parameters differ".into());
    }
    let export = dir.path().join("export");
    trainer.nets.save_params(&export, CheckpointKind::Inference, trainer.iteration).map_err(fail)?;
    let prior = read_tensors(&params_path(&export, "prior")).map_err(fail)?;
    if prior.keys().any(|k| k.starts_with("heads")) {
        return Err("export contains distillation heads".into());
    }
    if params_path(&export, "disc").exists() {
        return Err("export contains the discriminator".into());
    }
    let loaded = Inpainter::load(&export).map_err(fail)?;
    let original = Inpainter::new(Networks::load(&ckpt, None).map_err(fail)?.0, String::new());
    let p = spn::data::make_synthetic_pair(3, 32).map_err(fail)?;
    let (x, y) = (loaded.inpaint(&p.image, &p.mask, 5).map_err(fail)?, original.inpaint(&p.image, &p.mask, 5).map_err(fail)?);
    if x != y {
        return Err("export and checkpoint disagree".into());
    }
    Ok(())
}

pub fn protocol_suite() -> Outcome {
    let inside = bucket_partition(1000)?;
    report_reproducible()?;
    checkpoint_round_trip()?;
    Ok(format!("{inside}/1000 masks inside the protocol, each in exactly one bucket; reports reproducible; round-trip exact"))
}

// ---------------------------------------------------------------------------
// Visualization

pub fn two_population_map(seed: u64) -> (Tensor, Vec<bool>) {
    let mut r = rng(seed);
    let (c, h, w) = (6i64, 12i64, 10i64);
    let member: Vec<bool> = (0..h * w).map(|_| r.random_bool(0.4)).collect();
    let mut data = vec![0.0f64; (c * h * w) as usize];
    for (i, &m) in member.iter().enumerate() {
        for ch in 0..c as usize {
            let center = if m { 3.0 } else { -3.0 } * if ch % 2 == 0 { 1.0 } else { -0.5 };
            data[ch * (h * w) as usize + i] = { let z: f64 = StandardNormal.sample(&mut r); center + 0.3 * z };
        }
    }
    (Tensor::from_slice(&data).view([1, c, h, w]).to_kind(Kind::Float), member)
}

pub fn visualization() -> Outcome {
    let (map, member) = two_population_map(8);
    let a = cluster_feature_map(&map, 2, 5).map_err(fail)?;
    let b = cluster_feature_map(&map, 2, 5).map_err(fail)?;
    let first = a.labels[0];
    let exact = a.labels.iter().zip(&member).all(|(&l, &m)| (l == first) == (m == member[0]));
    let pts: Vec<Vec<f64>> = (0..50).map(|i| vec![f64::from(i % 7), f64::from(i % 3)]).collect();
    let repeat = a == b && kmeans(&pts, 4, 9).map_err(fail)? == kmeans(&pts, 4, 9).map_err(fail)?;
    let detail = format!("{} pixels, exact separation {exact}, repeatable {repeat}", member.len());
    if exact && repeat {
        Ok(detail)
    } else {
        Err(detail)
    }
}
