//! Spectrally-normalized patch discriminator.
//!
//! Outputs are per-patch probabilities that the input is FAKE. Under that
//! convention both players minimize the losses as written in `losses`.

use rand_chacha::ChaCha8Rng;
use tch::{nn, Tensor};

use crate::config::RunConfig;
use crate::error::{Result, SpnError};
use crate::layers::{lrelu, SpectralConv};

#[derive(Debug)]
pub struct DiscOutput {
    /// `[B, 1, H/32, W/32]` probabilities in `(0, 1)`.
    pub probs: Tensor,
    pub logits: Tensor,
    /// Pre-activation outputs of the tapped layers, shallow to deep.
    pub features: Vec<Tensor>,
}

#[derive(Debug)]
pub struct Discriminator {
    pub layers: Vec<SpectralConv>,
    pub head: SpectralConv,
}

impl Discriminator {
    /// One 4×4 stride-2 layer per entry of `channels` (all tapped) and a final
    /// stride-2 layer to a single channel.
    pub fn new(p: &nn::Path, rng: &mut ChaCha8Rng, channels: &[i64]) -> Result<Self> {
        if channels.is_empty() {
            return Err(SpnError::Config("disc.channels must not be empty".into()));
        }
        let mut c_in = 3;
        let layers = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = SpectralConv::new(&(p / format!("conv{i}")), rng, c_in, c, 4, 2, 1);
                c_in = c;
                conv
            })
            .collect();
        let head = SpectralConv::new(&(p / "head"), rng, c_in, 1, 4, 2, 1);
        Ok(Discriminator { layers, head })
    }

    pub fn from_run(p: &nn::Path, rng: &mut ChaCha8Rng, cfg: &RunConfig) -> Result<Self> {
        Discriminator::new(p, rng, &cfg.int_list("disc.channels"))
    }

    pub fn taps(&self) -> usize {
        self.layers.len()
    }

    /// `update_sn` advances each layer's power iteration; the trainer sets it on
    /// the discriminator step only.
    pub fn forward(&self, image: &Tensor, update_sn: bool) -> DiscOutput {
        let mut features = Vec::with_capacity(self.layers.len());
        let mut x = image.shallow_clone();
        for layer in &self.layers {
            let f = layer.forward(&x, update_sn);
            x = lrelu(&f);
            features.push(f);
        }
        let logits = self.head.forward(&x, update_sn);
        DiscOutput { probs: logits.sigmoid(), logits, features }
    }

    pub fn discriminate(&self, image: &Tensor) -> DiscOutput {
        self.forward(image, false)
    }

    pub fn spectral_layers(&self) -> impl Iterator<Item = &SpectralConv> {
        self.layers.iter().chain(std::iter::once(&self.head))
    }

    /// Re-estimates every layer's singular vector; call after each weight update.
    pub fn refresh_spectral(&self) {
        for layer in self.spectral_layers() {
            layer.refresh();
        }
    }
}
