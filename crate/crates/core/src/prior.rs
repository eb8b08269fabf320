//! Semantic prior learner.
//!
//! A U-Net style network: `L` stride-2 stages (plus a residual dense block on the
//! coarsest one) encode the ×2-upsampled masked image into context features, and
//! a decoder of residual blocks and pixel-shuffle upsamplers rebuilds the prior
//! pyramid with skip connections. In probabilistic mode the coarsest prior level
//! is generated from a reparameterized latent code instead.

use rand_chacha::ChaCha8Rng;
use tch::{nn, Tensor};

use crate::config::RunConfig;
use crate::error::{Result, SpnError};
use crate::layers::{lrelu, Conv, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Deterministic,
    Probabilistic,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "deterministic" | "det" => Ok(Mode::Deterministic),
            "probabilistic" | "prob" => Ok(Mode::Probabilistic),
            other => Err(SpnError::Config(format!("unknown mode `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Deterministic => "deterministic",
            Mode::Probabilistic => "probabilistic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    /// Widths `c_l`, finest level first.
    pub channels: Vec<i64>,
    pub latent_dim: i64,
    pub mode: Mode,
    pub gv_uses_context: bool,
    pub latent_grid: i64,
    pub rdb_layers: usize,
    pub rdb_growth: i64,
    pub bottom_blocks: usize,
    /// Output widths of the distillation heads; empty means no heads.
    pub distill_dims: Vec<i64>,
}

impl PriorConfig {
    pub fn from_run(cfg: &RunConfig, distill_dims: Vec<i64>) -> Result<Self> {
        let pc = PriorConfig {
            channels: cfg.int_list("prior.channels"),
            latent_dim: cfg.int("prior.latent_dim"),
            mode: Mode::parse(cfg.str("prior.mode"))?,
            gv_uses_context: cfg.bool("prior.gv_uses_context"),
            latent_grid: cfg.int("prior.latent_grid"),
            rdb_layers: cfg.usize("prior.rdb_layers")?,
            rdb_growth: cfg.int("prior.rdb_growth"),
            bottom_blocks: cfg.usize("prior.bottom_blocks")?,
            distill_dims,
        };
        pc.validate()?;
        Ok(pc)
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c <= 0) {
            return Err(SpnError::Config("prior.channels must be non-empty and positive".into()));
        }
        if let Some(c) = self.channels[1..].iter().find(|&&c| c % 4 != 0) {
            return Err(SpnError::Config(format!(
                "prior width {c} is not divisible by 4 and cannot be pixel-shuffled"
            )));
        }
        if !self.distill_dims.is_empty() && self.distill_dims.len() != self.levels() {
            return Err(SpnError::Config(format!(
                "{} distillation targets for {} prior levels",
                self.distill_dims.len(),
                self.levels()
            )));
        }
        if self.latent_dim <= 0 || self.latent_grid <= 0 {
            return Err(SpnError::Config("latent sizes must be positive".into()));
        }
        Ok(())
    }
}

/// `S_enc^l`, finest level first.
#[derive(Debug)]
pub struct ContextFeatures {
    pub levels: Vec<Tensor>,
}

impl ContextFeatures {
    pub fn top(&self) -> &Tensor {
        self.levels.last().expect("non-empty context")
    }
}

/// `S_prior^l`, finest level first.
#[derive(Debug)]
pub struct PriorPyramid {
    pub levels: Vec<Tensor>,
}

#[derive(Debug)]
pub struct LatentStats {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub z_hat: Option<Tensor>,
}

impl LatentStats {
    /// `exp(0.5 · logvar)`, strictly positive.
    pub fn sigma(&self) -> Tensor {
        (&self.logvar * 0.5).exp()
    }
}

/// `ẑ = z · σ + μ`
pub fn sample_latent(stats: &LatentStats, z: &Tensor) -> Result<Tensor> {
    if z.size() != stats.mu.size() {
        return Err(SpnError::Shape(format!(
            "latent noise {:?} does not match posterior {:?}",
            z.size(),
            stats.mu.size()
        )));
    }
    Ok(z * stats.sigma() + &stats.mu)
}

#[derive(Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub shortcut: Option<Conv>,
}

impl ResBlock {
    pub fn new(p: &nn::Path, rng: &mut ChaCha8Rng, c_in: i64, c_out: i64) -> Self {
        ResBlock {
            conv1: Conv::same(&(p / "conv1"), rng, c_in, c_out),
            conv2: Conv::same(&(p / "conv2"), rng, c_out, c_out),
            shortcut: (c_in != c_out).then(|| Conv::pointwise(&(p / "shortcut"), rng, c_in, c_out, false)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(x),
            None => x.shallow_clone(),
        };
        skip + self.conv2.forward(&lrelu(&self.conv1.forward(x)))
    }
}

#[derive(Debug)]
struct ResidualDenseBlock {
    layers: Vec<Conv>,
    fuse: Conv,
}

impl ResidualDenseBlock {
    fn new(p: &nn::Path, rng: &mut ChaCha8Rng, channels: i64, layers: usize, growth: i64) -> Self {
        let convs = (0..layers)
            .map(|i| Conv::same(&(p / format!("dense{i}")), rng, channels + i as i64 * growth, growth))
            .collect();
        let fuse = Conv::pointwise(&(p / "fuse"), rng, channels + layers as i64 * growth, channels, true);
        ResidualDenseBlock { layers: convs, fuse }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let mut feats = vec![x.shallow_clone()];
        for conv in &self.layers {
            let y = lrelu(&conv.forward(&Tensor::cat(&feats, 1)));
            feats.push(y);
        }
        x + self.fuse.forward(&Tensor::cat(&feats, 1))
    }
}

/// `E_v` (pooled context → μ, log σ²) and `G_v` (ẑ → coarsest prior level).
#[derive(Debug)]
pub struct Variational {
    pub ev_hidden: Linear,
    pub ev_mu: Linear,
    pub ev_logvar: Linear,
    pub gv_fc: Linear,
    pub gv_context: Option<Conv>,
    pub gv_blocks: Vec<ResBlock>,
    top_channels: i64,
    grid: i64,
}

impl Variational {
    fn new(p: &nn::Path, rng: &mut ChaCha8Rng, cfg: &PriorConfig) -> Self {
        let c = *cfg.channels.last().expect("validated");
        let d = cfg.latent_dim;
        let g = cfg.latent_grid;
        let ev_logvar = Linear::new(&(p / "ev_logvar"), rng, c, d);
        // σ = 1 at initialization.
        ev_logvar.zero_();
        Variational {
            ev_hidden: Linear::new(&(p / "ev_hidden"), rng, c, c),
            ev_mu: Linear::new(&(p / "ev_mu"), rng, c, d),
            ev_logvar,
            gv_fc: Linear::new(&(p / "gv_fc"), rng, d, c * g * g),
            gv_context: cfg
                .gv_uses_context
                .then(|| Conv::pointwise(&(p / "gv_context"), rng, 2 * c, c, true)),
            gv_blocks: (0..2).map(|i| ResBlock::new(&(p / format!("gv_block{i}")), rng, c, c)).collect(),
            top_channels: c,
            grid: g,
        }
    }

    fn encode(&self, top_ctx: &Tensor) -> LatentStats {
        let pooled = top_ctx.mean_dim([2i64, 3].as_slice(), false, top_ctx.kind());
        let h = lrelu(&self.ev_hidden.forward(&pooled));
        LatentStats { mu: self.ev_mu.forward(&h), logvar: self.ev_logvar.forward(&h), z_hat: None }
    }

    fn generate(&self, z_hat: &Tensor, top_ctx: &Tensor) -> Tensor {
        let size = top_ctx.size();
        let mut x = lrelu(&self.gv_fc.forward(z_hat)).view([size[0], self.top_channels, self.grid, self.grid]);
        if [self.grid, self.grid] != size[2..] {
            x = x.upsample_bilinear2d([size[2], size[3]], false, None, None);
        }
        if let Some(conv) = &self.gv_context {
            x = lrelu(&conv.forward(&Tensor::cat(&[&x, top_ctx], 1)));
        }
        for block in &self.gv_blocks {
            x = block.forward(&x);
        }
        x
    }
}

#[derive(Debug)]
pub struct PriorLearner {
    pub config: PriorConfig,
    stages: Vec<Conv>,
    rdb: ResidualDenseBlock,
    bottom: Vec<ResBlock>,
    /// `up_blocks[l]` merges the shuffled level `l+1` with the skip at level `l`.
    up_blocks: Vec<ResBlock>,
    /// `f^l`: 1×1 distillation heads, registered under `heads.*`.
    pub heads: Vec<Conv>,
    pub variational: Option<Variational>,
}

/// Variable-name prefix of the distillation heads.
pub const HEADS_PREFIX: &str = "heads.";

impl PriorLearner {
    pub fn new(p: &nn::Path, rng: &mut ChaCha8Rng, config: &PriorConfig) -> Result<Self> {
        config.validate()?;
        let ch = &config.channels;
        let levels = ch.len();
        let mut c_in = 4;
        let stages = ch
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(&(p / format!("enc{i}")), rng, c_in, c, 3, 2, 1, true);
                c_in = c;
                conv
            })
            .collect();
        let top = ch[levels - 1];
        let rdb = ResidualDenseBlock::new(&(p / "rdb"), rng, top, config.rdb_layers, config.rdb_growth);
        // The stochastic path replaces the bottleneck with the latent generator.
        let bottom_blocks = if config.mode == Mode::Deterministic { config.bottom_blocks } else { 0 };
        let bottom = (0..bottom_blocks)
            .map(|i| ResBlock::new(&(p / format!("bottom{i}")), rng, top, top))
            .collect();
        let up_blocks = (0..levels - 1)
            .map(|l| ResBlock::new(&(p / format!("up{l}")), rng, ch[l + 1] / 4 + ch[l], ch[l]))
            .collect();
        let heads = config
            .distill_dims
            .iter()
            .enumerate()
            .map(|(l, &d)| Conv::pointwise(&(p / "heads" / format!("l{l}")), rng, ch[l], d, true))
            .collect();
        let variational = (config.mode == Mode::Probabilistic).then(|| Variational::new(&(p / "var"), rng, config));
        Ok(PriorLearner { config: config.clone(), stages, rdb, bottom, up_blocks, heads, variational })
    }

    pub fn levels(&self) -> usize {
        self.config.levels()
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// Upsamples the masked image (bilinear) and mask (nearest) ×2, concatenates
    /// them and runs the downsampling stages.
    pub fn encode_context(&self, masked_image: &Tensor, mask: &Tensor) -> Result<ContextFeatures> {
        let (si, sm) = (masked_image.size(), mask.size());
        if si.len() != 4 || si[1] != 3 || sm.len() != 4 || sm[1] != 1 || si[2..] != sm[2..] || si[0] != sm[0] {
            return Err(SpnError::Shape(format!("masked image {si:?} and mask {sm:?} do not pair")));
        }
        let (h, w) = (2 * si[2], 2 * si[3]);
        let factor = 1i64 << self.levels();
        if h % factor != 0 || w % factor != 0 {
            return Err(SpnError::Shape(format!(
                "upsampled input {h}x{w} is not divisible by {factor}"
            )));
        }
        let img = masked_image.upsample_bilinear2d([h, w], false, None, None);
        let m = mask.upsample_nearest2d([h, w], None, None);
        let mut x = Tensor::cat(&[img, m], 1);
        let mut levels = Vec::with_capacity(self.levels());
        for conv in &self.stages {
            x = lrelu(&conv.forward(&x));
            levels.push(x.shallow_clone());
        }
        let top = levels.pop().expect("non-empty");
        levels.push(self.rdb.forward(&top));
        Ok(ContextFeatures { levels })
    }

    fn decode_from_top(&self, top: Tensor, ctx: &ContextFeatures) -> Result<PriorPyramid> {
        let levels = self.levels();
        let mut out = vec![top];
        for l in (0..levels - 1).rev() {
            let prev = out.last().expect("non-empty");
            if prev.size()[1] % 4 != 0 {
                return Err(SpnError::Shape(format!(
                    "cannot pixel-shuffle {} channels by 2",
                    prev.size()[1]
                )));
            }
            let up = prev.pixel_shuffle(2);
            let merged = Tensor::cat(&[&up, &ctx.levels[l]], 1);
            out.push(self.up_blocks[l].forward(&merged));
        }
        out.reverse();
        Ok(PriorPyramid { levels: out })
    }

    pub fn build_pyramid_deterministic(&self, ctx: &ContextFeatures) -> Result<PriorPyramid> {
        if self.mode() != Mode::Deterministic {
            return Err(SpnError::Mode { expected: "deterministic" });
        }
        let mut top = ctx.top().shallow_clone();
        for block in &self.bottom {
            top = block.forward(&top);
        }
        self.decode_from_top(top, ctx)
    }

    pub fn infer_latent_stats(&self, top_ctx: &Tensor) -> Result<LatentStats> {
        let var = self.variational.as_ref().ok_or(SpnError::Mode { expected: "probabilistic" })?;
        Ok(var.encode(top_ctx))
    }

    pub fn build_pyramid_stochastic(&self, ctx: &ContextFeatures, z_hat: &Tensor) -> Result<PriorPyramid> {
        let var = self.variational.as_ref().ok_or(SpnError::Mode { expected: "probabilistic" })?;
        let top = var.generate(z_hat, ctx.top());
        self.decode_from_top(top, ctx)
    }

    /// Applies the 1×1 distillation heads level by level.
    pub fn distill_project(&self, pyramid: &PriorPyramid) -> Result<Vec<Tensor>> {
        if self.heads.len() != pyramid.levels.len() {
            return Err(SpnError::Config(format!(
                "{} distillation heads for {} pyramid levels",
                self.heads.len(),
                pyramid.levels.len()
            )));
        }
        Ok(self.heads.iter().zip(&pyramid.levels).map(|(h, s)| h.forward(s)).collect())
    }

    pub fn latent_dim(&self) -> i64 {
        self.config.latent_dim
    }
}
