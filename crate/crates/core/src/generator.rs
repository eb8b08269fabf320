//! Context-aware image generator.
//!
//! A shallow convolutional encoder brings the masked image down to the coarsest
//! prior resolution; SPADE residual blocks then decode it, each conditioned on the
//! prior level that matches its resolution.

use rand_chacha::ChaCha8Rng;
use tch::{nn, Tensor};

use crate::config::RunConfig;
use crate::error::{Result, SpnError};
use crate::layers::{instance_norm, lrelu, Conv};
use crate::prior::PriorPyramid;

pub const IN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    /// Decoder widths per level, finest first; the encoder ends at the last one.
    pub channels: Vec<i64>,
    pub bottom_blocks: usize,
    pub spade_hidden: i64,
    /// Prior pyramid widths, finest first.
    pub prior_channels: Vec<i64>,
}

impl GenConfig {
    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        let gc = GenConfig {
            channels: cfg.int_list("gen.channels"),
            bottom_blocks: cfg.usize("gen.bottom_blocks")?,
            spade_hidden: cfg.int("gen.spade_hidden"),
            prior_channels: cfg.int_list("prior.channels"),
        };
        if gc.channels.len() != gc.prior_channels.len() {
            return Err(SpnError::Config(format!(
                "gen.channels has {} levels but prior.channels has {}",
                gc.channels.len(),
                gc.prior_channels.len()
            )));
        }
        if gc.channels.iter().any(|&c| c <= 0) || gc.spade_hidden <= 0 {
            return Err(SpnError::Config("generator widths must be positive".into()));
        }
        Ok(gc)
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }
}

/// Spatially-adaptive normalization: `γ · IN(F) + β` with `γ = 1 + head_γ(h)`,
/// `β = head_β(h)` and `h = ReLU(shared(prior))`, so zeroed heads give `IN(F)`.
#[derive(Debug)]
pub struct Spade {
    pub shared: Conv,
    pub gamma: Conv,
    pub beta: Conv,
}

impl Spade {
    pub fn new(p: &nn::Path, rng: &mut ChaCha8Rng, feature_channels: i64, prior_channels: i64, hidden: i64) -> Self {
        Spade {
            shared: Conv::same(&(p / "shared"), rng, prior_channels, hidden),
            gamma: Conv::same(&(p / "gamma"), rng, hidden, feature_channels),
            beta: Conv::same(&(p / "beta"), rng, hidden, feature_channels),
        }
    }

    /// Returns `(γ, β)` at the feature resolution.
    pub fn affine(&self, prior: &Tensor, height: i64, width: i64) -> Tensor2 {
        let prior = if prior.size()[2..] == [height, width] {
            prior.shallow_clone()
        } else {
            prior.upsample_nearest2d([height, width], None, None)
        };
        let h = self.shared.forward(&prior).relu();
        (self.gamma.forward(&h) + 1.0, self.beta.forward(&h))
    }

    pub fn modulate(&self, feature: &Tensor, prior: &Tensor) -> Result<Tensor> {
        let fs = feature.size();
        if fs[1] != self.gamma.out_channels() {
            return Err(SpnError::Config(format!(
                "SPADE heads emit {} channels for a {}-channel feature",
                self.gamma.out_channels(),
                fs[1]
            )));
        }
        if prior.size()[1] != self.shared.weight.size()[1] {
            return Err(SpnError::Config(format!(
                "SPADE expects a {}-channel prior, got {}",
                self.shared.weight.size()[1],
                prior.size()[1]
            )));
        }
        let (gamma, beta) = self.affine(prior, fs[2], fs[3]);
        Ok(instance_norm(feature, IN_EPS) * gamma + beta)
    }

    pub fn zero_heads(&self) {
        self.gamma.zero_();
        self.beta.zero_();
    }
}

type Tensor2 = (Tensor, Tensor);

/// Two-branch residual block: SPADE→act→conv twice on the main branch, and
/// SPADE→conv on the shortcut when the width changes.
#[derive(Debug)]
pub struct SpadeResBlock {
    pub spade1: Spade,
    pub conv1: Conv,
    pub spade2: Spade,
    pub conv2: Conv,
    pub shortcut: Option<(Spade, Conv)>,
}

impl SpadeResBlock {
    pub fn new(p: &nn::Path, rng: &mut ChaCha8Rng, c_in: i64, c_out: i64, prior_channels: i64, hidden: i64) -> Self {
        let mid = c_in.min(c_out);
        SpadeResBlock {
            spade1: Spade::new(&(p / "spade1"), rng, c_in, prior_channels, hidden),
            conv1: Conv::same(&(p / "conv1"), rng, c_in, mid),
            spade2: Spade::new(&(p / "spade2"), rng, mid, prior_channels, hidden),
            conv2: Conv::same(&(p / "conv2"), rng, mid, c_out),
            shortcut: (c_in != c_out).then(|| {
                (
                    Spade::new(&(p / "spade_s"), rng, c_in, prior_channels, hidden),
                    Conv::pointwise(&(p / "conv_s"), rng, c_in, c_out, false),
                )
            }),
        }
    }

    pub fn forward(&self, x: &Tensor, prior: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&lrelu(&self.spade1.modulate(x, prior)?));
        let h = self.conv2.forward(&lrelu(&self.spade2.modulate(&h, prior)?));
        let skip = match &self.shortcut {
            Some((spade, conv)) => conv.forward(&spade.modulate(x, prior)?),
            None => x.shallow_clone(),
        };
        Ok(skip + h)
    }

    pub fn spades(&self) -> Vec<&Spade> {
        let mut v = vec![&self.spade1, &self.spade2];
        if let Some((s, _)) = &self.shortcut {
            v.push(s);
        }
        v
    }
}

/// `F_dec^l`, finest level first.
#[derive(Debug)]
pub struct DecoderFeatures {
    pub levels: Vec<Tensor>,
}

#[derive(Debug)]
pub struct Generator {
    pub config: GenConfig,
    encoder: Vec<Conv>,
    pub bottom: Vec<SpadeResBlock>,
    /// `ups[l]` produces level `l` from the upsampled level `l+1`.
    pub ups: Vec<SpadeResBlock>,
    out_conv: Conv,
}

impl Generator {
    pub fn new(p: &nn::Path, rng: &mut ChaCha8Rng, config: &GenConfig) -> Self {
        let ch = &config.channels;
        let pc = &config.prior_channels;
        let levels = ch.len();
        let hidden = config.spade_hidden;
        // Encoder strides 1, 2, 2, ...: one stride-2 conv per level below the finest.
        let mut encoder = vec![Conv::same(&(p / "enc0"), rng, 4, ch[0])];
        for l in 1..levels {
            encoder.push(Conv::new(&(p / format!("enc{l}")), rng, ch[l - 1], ch[l], 3, 2, 1, true));
        }
        let top = ch[levels - 1];
        let bottom = (0..config.bottom_blocks)
            .map(|i| SpadeResBlock::new(&(p / format!("bottom{i}")), rng, top, top, pc[levels - 1], hidden))
            .collect();
        let ups = (0..levels - 1)
            .map(|l| SpadeResBlock::new(&(p / format!("up{l}")), rng, ch[l + 1], ch[l], pc[l], hidden))
            .collect();
        let out_conv = Conv::same(&(p / "out"), rng, ch[0], 3);
        Generator { config: config.clone(), encoder, bottom, ups, out_conv }
    }

    pub fn levels(&self) -> usize {
        self.config.levels()
    }

    /// `[B,3,H,W]` masked image and `[B,1,H,W]` mask at native resolution to
    /// `F_enc^L` at `H / 2^(L-1)`.
    pub fn encode_image(&self, masked_image: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (si, sm) = (masked_image.size(), mask.size());
        if si.len() != 4 || si[1] != 3 || sm.len() != 4 || sm[1] != 1 || si[2..] != sm[2..] {
            return Err(SpnError::Shape(format!("masked image {si:?} and mask {sm:?} do not pair")));
        }
        let mut x = Tensor::cat(&[masked_image, mask], 1);
        for conv in &self.encoder {
            x = lrelu(&conv.forward(&x));
        }
        Ok(x)
    }

    pub fn decode_with_features(&self, encoded: &Tensor, pyramid: &PriorPyramid) -> Result<(Tensor, DecoderFeatures)> {
        let levels = self.levels();
        if pyramid.levels.len() != levels {
            return Err(SpnError::Shape(format!(
                "pyramid has {} levels, generator expects {levels}",
                pyramid.levels.len()
            )));
        }
        let top = &pyramid.levels[levels - 1];
        if top.size()[2..] != encoded.size()[2..] {
            return Err(SpnError::Shape(format!(
                "coarsest prior {:?} does not match encoded features {:?}",
                top.size(),
                encoded.size()
            )));
        }
        let mut x = encoded.shallow_clone();
        for block in &self.bottom {
            x = block.forward(&x, top)?;
        }
        let mut feats = vec![x.shallow_clone()];
        for l in (0..levels - 1).rev() {
            let s = x.size();
            let prior = &pyramid.levels[l];
            if prior.size()[2..] != [2 * s[2], 2 * s[3]] {
                return Err(SpnError::Shape(format!("prior level {} has shape {:?}", l + 1, prior.size())));
            }
            x = x.upsample_nearest2d([2 * s[2], 2 * s[3]], None, None);
            x = self.ups[l].forward(&x, prior)?;
            feats.push(x.shallow_clone());
        }
        feats.reverse();
        let image = self.out_conv.forward(&lrelu(&x)).tanh();
        Ok((image, DecoderFeatures { levels: feats }))
    }

    pub fn decode(&self, encoded: &Tensor, pyramid: &PriorPyramid) -> Result<Tensor> {
        self.decode_with_features(encoded, pyramid).map(|(img, _)| img)
    }

    pub fn forward(&self, masked_image: &Tensor, mask: &Tensor, pyramid: &PriorPyramid) -> Result<Tensor> {
        let enc = self.encode_image(masked_image, mask)?;
        self.decode(&enc, pyramid)
    }
}
