//! Image-quality metrics, FID, and bucketed evaluation reports.
//!
//! Metric inputs are `ImageTensor`s in `[-1, 1]`; every metric maps them to
//! `[0, 1]` first.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tch::{nn, CModule, Device, IValue, Kind, Tensor};

use crate::config::RunConfig;
use crate::data::{bucket_of, composite, ImageTensor, MaskTensor, SamplePair, BUCKETS};
use crate::error::{Result, SpnError};
use crate::layers::{lrelu, Conv};
use crate::model::{latent_seed, InpaintModel};

pub const PSNR_CAP: f64 = 100.0;

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SpnError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(real: &ImageTensor, fake: &ImageTensor) -> Result<f64> {
    check_pair(real, fake)?;
    let (a, b) = (real.to_unit_range(), fake.to_unit_range());
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

/// PSNR restricted to missing pixels (all channels). An empty mask gives the cap.
pub fn psnr_masked(real: &ImageTensor, fake: &ImageTensor, mask: &MaskTensor) -> Result<f64> {
    check_pair(real, fake)?;
    if (real.height(), real.width()) != mask.shape() {
        return Err(SpnError::Shape("mask does not match image".into()));
    }
    let (a, b) = (real.to_unit_range(), fake.to_unit_range());
    let plane = real.height() * real.width();
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        if mask.data()[i % plane] == 1 {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    Ok(if n == 0 { PSNR_CAP } else { psnr_from_mse(sum / n as f64) })
}

pub fn mae(real: &ImageTensor, fake: &ImageTensor) -> Result<f64> {
    check_pair(real, fake)?;
    let (a, b) = (real.to_unit_range(), fake.to_unit_range());
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut w = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WIN]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WIN + 1, w - SSIM_WIN + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WIN).map(|k| win[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WIN).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Gaussian-window SSIM (11×11, σ = 1.5, K₁ = 0.01, K₂ = 0.03, L = 1), averaged
/// over channels and valid window positions.
pub fn ssim(real: &ImageTensor, fake: &ImageTensor) -> Result<f64> {
    check_pair(real, fake)?;
    let (c, h, w) = real.shape();
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(SpnError::Shape(format!("SSIM needs at least {SSIM_WIN}x{SSIM_WIN} images, got {h}x{w}")));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let win = gaussian_window();
    let (a, b) = (real.to_unit_range(), fake.to_unit_range());
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let x = &a[ch * plane..(ch + 1) * plane];
        let y = &b[ch * plane..(ch + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(x, h, w, &win);
        let my = filter_valid(y, h, w, &win);
        let sxx = filter_valid(&xx, h, w, &win);
        let syy = filter_valid(&yy, h, w, &win);
        let sxy = filter_valid(&xy, h, w, &win);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn mean_and_cov(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = set[0].len();
    let n = set.len() as f64;
    let mut mu = DVector::zeros(d);
    for v in set {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = DVector::from_column_slice(v) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    (mu, cov)
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from round-off are clamped to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two embedding sets.
///
/// `Tr((Σa Σb)^{1/2})` is computed as `Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})`, which has
/// the same eigenvalues but is symmetric, so no imaginary parts arise.
pub fn fid(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(SpnError::Invalid("FID needs at least two samples per set".into()));
    }
    let d = set_a[0].len();
    if set_a.iter().chain(set_b).any(|v| v.len() != d) {
        return Err(SpnError::Shape("embeddings differ in length".into()));
    }
    let (mu_a, mut cov_a) = mean_and_cov(set_a);
    let (mu_b, mut cov_b) = mean_and_cov(set_b);
    if set_a.len() <= d || set_b.len() <= d {
        log::warn!("FID with fewer than d+1 = {} samples; adding 1e-6 to the covariance diagonals", d + 1);
        cov_a += DMatrix::identity(d, d) * 1e-6;
        cov_b += DMatrix::identity(d, d) * 1e-6;
    }
    let sa = sqrtm_psd(&cov_a);
    let cross = sqrtm_psd(&(&sa * &cov_b * &sa));
    let diff = mu_a - mu_b;
    let value = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

/// Frozen image → vector network for FID.
pub trait EmbeddingExtractor: Send {
    fn embed(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>>;
    fn tag(&self) -> String;
}

/// Fixed random conv stack followed by global average pooling.
pub struct StubEmbedding {
    _vs: nn::VarStore,
    convs: Vec<Conv>,
    seed: u64,
}

impl StubEmbedding {
    pub const DIM: i64 = 16;

    pub fn new(seed: u64) -> Self {
        let vs = nn::VarStore::new(Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let root = vs.root();
        let widths = [8, 16, Self::DIM];
        let mut c_in = 3;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(&(&root / format!("conv{i}")), &mut rng, c_in, c, 3, 2, 1, true);
                c_in = c;
                conv
            })
            .collect();
        let mut vs = vs;
        vs.freeze();
        StubEmbedding { _vs: vs, convs, seed }
    }
}

fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let t = t.to_kind(Kind::Double).contiguous();
    let n = t.size()[0];
    (0..n)
        .map(|i| Vec::<f64>::try_from(&t.get(i).flatten(0, -1)).map_err(SpnError::from))
        .collect()
}

impl EmbeddingExtractor for StubEmbedding {
    fn embed(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let batch = crate::data::stack_images(images)?;
        let out = tch::no_grad(|| {
            let mut x = batch;
            for c in &self.convs {
                x = lrelu(&c.forward(&x));
            }
            x.mean_dim([2i64, 3].as_slice(), false, Kind::Float)
        });
        to_rows(&out)
    }

    fn tag(&self) -> String {
        format!("stub-embedding(seed={})", self.seed)
    }
}

/// TorchScript embedding network taking `[B, 3, 299, 299]` inputs in `[-1, 1]`.
pub struct TorchScriptEmbedding {
    module: CModule,
}

impl TorchScriptEmbedding {
    pub fn load(weights: &Path) -> Result<Self> {
        let mut module = CModule::load_on_device(weights, Device::Cpu)
            .map_err(|e| SpnError::Config(format!("cannot load embedding network {}: {e}", weights.display())))?;
        module.set_eval();
        Ok(TorchScriptEmbedding { module })
    }
}

impl EmbeddingExtractor for TorchScriptEmbedding {
    fn embed(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let batch = crate::data::stack_images(images)?.upsample_bilinear2d([299, 299], false, None, None);
        let out = tch::no_grad(|| self.module.forward_is(&[IValue::Tensor(batch)]))
            .map_err(|e| SpnError::Contract(format!("embedding forward failed: {e}")))?;
        match out {
            IValue::Tensor(t) => to_rows(&t.flatten(1, -1)),
            other => Err(SpnError::Contract(format!("embedding network returned {other:?}"))),
        }
    }

    fn tag(&self) -> String {
        "inception(torchscript)".into()
    }
}

pub fn embedding_from_run(cfg: &RunConfig) -> Result<Box<dyn EmbeddingExtractor>> {
    match cfg.str("fid.kind") {
        "stub" => Ok(Box::new(StubEmbedding::new(cfg.int("fid.seed") as u64))),
        "inception" => {
            let w = cfg.str("fid.weights");
            if w.is_empty() {
                return Err(SpnError::Config("fid.kind = inception needs fid.weights".into()));
            }
            Ok(Box::new(TorchScriptEmbedding::load(Path::new(w))?))
        }
        other => Err(SpnError::UnknownExtractor(other.to_string())),
    }
}

/// Per-pair outcome of [`evaluate`].
#[derive(Debug, Clone)]
pub struct PairResult {
    pub id: String,
    pub bucket: &'static str,
    pub sample_seeds: Vec<u64>,
    pub sample_psnrs: Vec<f64>,
    pub best: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub label: String,
    pub count: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub mae: f64,
    pub fid: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    /// Six base buckets, then the "20%-40%" and "40%-60%" aggregates, then "All".
    pub rows: Vec<MetricRow>,
    pub pairs: Vec<PairResult>,
    pub k: usize,
    pub composited: bool,
    pub seed: u64,
    pub model: String,
    pub embedding: String,
    pub skipped: usize,
}

pub const AGGREGATES: [(&str, &[usize]); 2] = [("20%-40%", &[2, 3]), ("40%-60%", &[4, 5])];

impl MetricReport {
    pub fn row(&self, label: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Tab-separated table, one row per bucket.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "# model={} embedding={} k={} composited={} seed={}\n",
            self.model, self.embedding, self.k, self.composited, self.seed
        );
        s.push_str("bucket\tcount\tSSIM\tPSNR\tMAE\tFID\n");
        for r in &self.rows {
            let fid = r.fid.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{}\t{}\t{:.4}\t{:.4}\t{:.5}\t{}", r.label, r.count, r.ssim, r.psnr, r.mae, fid);
        }
        s
    }

    /// `metric.bucket = value` lines plus protocol metadata.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "protocol.k = {}", self.k);
        let _ = writeln!(s, "protocol.composited = {}", self.composited);
        let _ = writeln!(s, "protocol.seed = {}", self.seed);
        let _ = writeln!(s, "protocol.model = {}", self.model);
        let _ = writeln!(s, "protocol.embedding = {}", self.embedding);
        let _ = writeln!(s, "protocol.skipped = {}", self.skipped);
        for r in &self.rows {
            let _ = writeln!(s, "count.{} = {}", r.label, r.count);
            let _ = writeln!(s, "SSIM.{} = {:.6}", r.label, r.ssim);
            let _ = writeln!(s, "PSNR.{} = {:.6}", r.label, r.psnr);
            let _ = writeln!(s, "MAE.{} = {:.6}", r.label, r.mae);
            if let Some(f) = r.fid {
                let _ = writeln!(s, "FID.{} = {:.6}", r.label, f);
            }
        }
        s
    }
}

fn summarize(
    label: &str,
    members: &[usize],
    pairs: &[PairResult],
    reals: &[Vec<f64>],
    fakes: &[Vec<f64>],
) -> Result<MetricRow> {
    let n = members.len();
    let mean = |f: &dyn Fn(&PairResult) -> f64| {
        if n == 0 {
            f64::NAN
        } else {
            members.iter().map(|&i| f(&pairs[i])).sum::<f64>() / n as f64
        }
    };
    let fid_value = if n >= 2 {
        let a: Vec<Vec<f64>> = members.iter().map(|&i| reals[i].clone()).collect();
        let b: Vec<Vec<f64>> = members.iter().map(|&i| fakes[i].clone()).collect();
        Some(fid(&a, &b)?)
    } else {
        None
    };
    Ok(MetricRow {
        label: label.to_string(),
        count: n,
        ssim: mean(&|p| p.ssim),
        psnr: mean(&|p| p.psnr),
        mae: mean(&|p| p.mae),
        fid: fid_value,
    })
}

/// Best-of-`k` evaluation. Deterministic models always use `k = 1`. Sample `j`
/// of pair `i` uses latent seed `latent_seed(latent_seed(seed, i), j)`. Pairs
/// whose mask ratio falls outside the protocol range are skipped.
pub fn evaluate(
    model: &dyn InpaintModel,
    pairs: &[SamplePair],
    k: usize,
    composited: bool,
    seed: u64,
    embedder: &dyn EmbeddingExtractor,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(SpnError::Invalid("evaluation needs at least one pair".into()));
    }
    let k = if model.is_probabilistic() {
        k.max(1)
    } else {
        if k > 1 {
            log::warn!("model is deterministic; using k = 1 instead of {k}");
        }
        1
    };
    let mut results = Vec::new();
    let mut chosen = Vec::new();
    let mut reals = Vec::new();
    let mut skipped = 0;
    for (i, pair) in pairs.iter().enumerate() {
        let bucket = match bucket_of(&pair.mask) {
            Ok(b) => b,
            Err(SpnError::OutOfProtocol(r)) => {
                log::warn!("skipping {}: mask ratio {r:.4} outside the protocol", pair.id);
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let pair_seed = latent_seed(seed, i as u64);
        let mut best: Option<(usize, f64, ImageTensor)> = None;
        let mut seeds = Vec::with_capacity(k);
        let mut psnrs = Vec::with_capacity(k);
        for j in 0..k {
            let s = latent_seed(pair_seed, j as u64);
            let raw = model.inpaint(&pair.image, &pair.mask, s)?;
            let out = if composited { composite(&raw, &pair.image, &pair.mask)? } else { raw };
            let p = psnr(&pair.image, &out)?;
            seeds.push(s);
            psnrs.push(p);
            if best.as_ref().is_none_or(|(_, bp, _)| p > *bp) {
                best = Some((j, p, out));
            }
        }
        let (best_j, best_psnr, out) = best.expect("k >= 1");
        results.push(PairResult {
            id: pair.id.clone(),
            bucket: bucket.label,
            sample_seeds: seeds,
            sample_psnrs: psnrs,
            best: best_j,
            psnr: best_psnr,
            ssim: ssim(&pair.image, &out)?,
            mae: mae(&pair.image, &out)?,
        });
        reals.push(pair.image.clone());
        chosen.push(out);
    }
    if results.is_empty() {
        return Err(SpnError::Invalid("no evaluation pair lies inside the protocol range".into()));
    }
    let real_emb = embedder.embed(&reals.iter().collect::<Vec<_>>())?;
    let fake_emb = embedder.embed(&chosen.iter().collect::<Vec<_>>())?;
    let members_of = |labels: &[&str]| -> Vec<usize> {
        results.iter().enumerate().filter(|(_, r)| labels.contains(&r.bucket)).map(|(i, _)| i).collect()
    };
    let mut rows = Vec::new();
    for b in &BUCKETS {
        rows.push(summarize(b.label, &members_of(&[b.label]), &results, &real_emb, &fake_emb)?);
    }
    for (label, idx) in AGGREGATES {
        let labels: Vec<&str> = idx.iter().map(|&i| BUCKETS[i].label).collect();
        rows.push(summarize(label, &members_of(&labels), &results, &real_emb, &fake_emb)?);
    }
    let all: Vec<usize> = (0..results.len()).collect();
    rows.push(summarize("All", &all, &results, &real_emb, &fake_emb)?);
    Ok(MetricReport {
        rows,
        pairs: results,
        k,
        composited,
        seed,
        model: model.describe(),
        embedding: embedder.tag(),
        skipped,
    })
}
