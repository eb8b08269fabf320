//! Frozen pretext feature extractors and the multi-scale distillation targets.
//!
//! The full image is upsampled ×2 before it reaches the extractor; level `l` of
//! the returned pyramid has spatial size `(H / 2^(l-1), W / 2^(l-1))` relative to
//! the original image.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tch::{nn, CModule, Device, IValue, Kind, Tensor};

use crate::error::{Result, SpnError};
use crate::layers::{lrelu, Conv};

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// A frozen network mapping a `[B, 3, 2H, 2W]` image in `[-1, 1]` to `L` feature maps.
pub trait PretextExtractor: Send {
    fn forward(&self, upsampled: &Tensor) -> Result<Vec<Tensor>>;

    /// Per-level channel counts; its length is the number of pyramid levels.
    fn channel_dims(&self) -> &[i64];

    fn tag(&self) -> String;

    /// Named parameters, for freeze audits.
    fn parameters(&self) -> Vec<(String, Tensor)>;

    fn levels(&self) -> usize {
        self.channel_dims().len()
    }
}

#[derive(Debug)]
pub struct TargetPyramid {
    pub levels: Vec<Tensor>,
    pub source_tag: String,
}

fn sorted_vars(vs: &nn::VarStore) -> Vec<(String, Tensor)> {
    let mut vars: Vec<_> = vs.variables().into_iter().collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

/// Fixed random convolutional stack; every stage halves the resolution and
/// its activation is one output level.
pub struct StubExtractor {
    vs: nn::VarStore,
    stages: Vec<Conv>,
    dims: Vec<i64>,
    seed: u64,
}

impl StubExtractor {
    pub fn new(seed: u64, dims: &[i64]) -> Self {
        let mut vs = nn::VarStore::new(Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let root = vs.root();
        let mut c_in = 3;
        let stages = dims
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(&(&root / format!("stage{i}")), &mut rng, c_in, c, 3, 2, 1, true);
                c_in = c;
                conv
            })
            .collect();
        vs.freeze();
        StubExtractor { vs, stages, dims: dims.to_vec(), seed }
    }

    /// Stage widths `32·2^(l-1)`.
    pub fn with_levels(seed: u64, levels: usize) -> Self {
        let dims: Vec<i64> = (0..levels).map(|l| 32 << l).collect();
        StubExtractor::new(seed, &dims)
    }

    pub fn set_kind(&mut self, kind: Kind) {
        self.vs.set_kind(kind);
    }
}

impl PretextExtractor for StubExtractor {
    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.shallow_clone();
        Ok(self
            .stages
            .iter()
            .map(|conv| {
                h = lrelu(&conv.forward(&h));
                h.shallow_clone()
            })
            .collect())
    }

    fn channel_dims(&self) -> &[i64] {
        &self.dims
    }

    fn tag(&self) -> String {
        format!("stub(seed={})", self.seed)
    }

    fn parameters(&self) -> Vec<(String, Tensor)> {
        sorted_vars(&self.vs)
    }
}

/// Average-pool pyramid of the input itself.
pub struct PoolPyramidExtractor {
    dims: Vec<i64>,
}

impl PoolPyramidExtractor {
    pub fn new(levels: usize) -> Self {
        PoolPyramidExtractor { dims: vec![3; levels] }
    }
}

impl PretextExtractor for PoolPyramidExtractor {
    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok((1..=self.dims.len())
            .map(|l| {
                let k = 1i64 << l;
                x.avg_pool2d([k, k], [k, k], [0, 0], false, true, None)
            })
            .collect())
    }

    fn channel_dims(&self) -> &[i64] {
        &self.dims
    }

    fn tag(&self) -> String {
        "pool".into()
    }

    fn parameters(&self) -> Vec<(String, Tensor)> {
        Vec::new()
    }
}

/// Sobel responses (x and y, per RGB channel) of an average-pool pyramid.
pub struct EdgeExtractor {
    dims: Vec<i64>,
    kernel: Tensor,
}

impl EdgeExtractor {
    pub fn new(levels: usize) -> Self {
        let gx = [-1.0f32, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
        let gy = [-1.0f32, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
        // Grouped conv weight [6, 1, 3, 3]: (gx, gy) for each input channel.
        let mut w = Vec::with_capacity(54);
        for _ in 0..3 {
            w.extend_from_slice(&gx);
            w.extend_from_slice(&gy);
        }
        let kernel = Tensor::from_slice(&w).view([6, 1, 3, 3]) / 8.0;
        EdgeExtractor { dims: vec![6; levels], kernel }
    }
}

impl PretextExtractor for EdgeExtractor {
    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let kernel = self.kernel.to_kind(x.kind());
        Ok((1..=self.dims.len())
            .map(|l| {
                let k = 1i64 << l;
                let pooled = x.avg_pool2d([k, k], [k, k], [0, 0], false, true, None);
                let padded = pooled.replication_pad2d([1, 1, 1, 1]);
                padded.conv2d(&kernel, None::<&Tensor>, [1, 1], [0, 0], [1, 1], 3)
            })
            .collect())
    }

    fn channel_dims(&self) -> &[i64] {
        &self.dims
    }

    fn tag(&self) -> String {
        "edge".into()
    }

    fn parameters(&self) -> Vec<(String, Tensor)> {
        Vec::new()
    }
}

/// Adapter around a TorchScript backbone returning a tuple or list of stage
/// outputs. Inputs are re-normalized to ImageNet statistics and selected stages
/// are resampled bilinearly onto the pyramid grid.
pub struct TorchScriptExtractor {
    module: CModule,
    kind: String,
    stages: Vec<usize>,
    dims: Vec<i64>,
}

fn ivalue_tensors(value: IValue) -> Result<Vec<Tensor>> {
    match value {
        IValue::Tensor(t) => Ok(vec![t]),
        IValue::TensorList(ts) => Ok(ts),
        IValue::Tuple(items) | IValue::GenericList(items) => {
            items.into_iter().map(ivalue_tensors).try_fold(Vec::new(), |mut acc, ts| {
                acc.extend(ts?);
                Ok(acc)
            })
        }
        other => Err(SpnError::Contract(format!("backbone returned unsupported value {other:?}"))),
    }
}

pub(crate) fn imagenet_normalize(x: &Tensor) -> Tensor {
    let mean = Tensor::from_slice(&IMAGENET_MEAN).to_kind(x.kind()).view([1, 3, 1, 1]);
    let std = Tensor::from_slice(&IMAGENET_STD).to_kind(x.kind()).view([1, 3, 1, 1]);
    ((x + 1.0) * 0.5 - mean) / std
}

impl TorchScriptExtractor {
    pub fn load(kind: &str, weights: &Path, stages: &[usize], levels: usize) -> Result<Self> {
        let mut module = CModule::load_on_device(weights, Device::Cpu).map_err(|e| {
            SpnError::Config(format!("cannot load {kind} backbone from {}: {e}", weights.display()))
        })?;
        module.set_eval();
        let stages: Vec<usize> = if stages.is_empty() { (0..levels).collect() } else { stages.to_vec() };
        if stages.len() != levels {
            return Err(SpnError::Config(format!(
                "{} backbone stages selected for {levels} pyramid levels",
                stages.len()
            )));
        }
        let mut extractor = TorchScriptExtractor { module, kind: kind.to_string(), stages, dims: Vec::new() };
        let probe = Tensor::zeros([1, 3, 64, 64], (Kind::Float, Device::Cpu));
        let outs = extractor.raw_outputs(&probe)?;
        extractor.dims = extractor
            .stages
            .iter()
            .map(|&s| {
                outs.get(s).map(|t| t.size()[1]).ok_or_else(|| {
                    SpnError::Contract(format!("backbone has {} outputs, stage {s} requested", outs.len()))
                })
            })
            .collect::<Result<_>>()?;
        Ok(extractor)
    }

    fn raw_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let input = imagenet_normalize(x).to_kind(Kind::Float);
        let out = tch::no_grad(|| self.module.forward_is(&[IValue::Tensor(input)]))
            .map_err(|e| SpnError::Contract(format!("backbone forward failed: {e}")))?;
        ivalue_tensors(out)
    }
}

impl PretextExtractor for TorchScriptExtractor {
    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let outs = self.raw_outputs(x)?;
        let (h, w) = (x.size()[2], x.size()[3]);
        self.stages
            .iter()
            .enumerate()
            .map(|(level, &s)| {
                let t = outs.get(s).ok_or_else(|| SpnError::Contract(format!("missing backbone stage {s}")))?;
                let size = [h >> (level + 1), w >> (level + 1)];
                let t = if t.size()[2..] == size { t.shallow_clone() } else {
                    t.upsample_bilinear2d(size, false, None, None)
                };
                Ok(t.to_kind(x.kind()))
            })
            .collect()
    }

    fn channel_dims(&self) -> &[i64] {
        &self.dims
    }

    fn tag(&self) -> String {
        format!("{}(torchscript)", self.kind)
    }

    fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut params = self.module.named_parameters().unwrap_or_default();
        params.sort_by(|a, b| a.0.cmp(&b.0));
        params
    }
}

/// Builds an extractor by registry name: `classification`, `detection`,
/// `segmentation` (TorchScript backbones, weights required), `edge`, or `stub`.
pub fn register_extractor(
    kind: &str,
    weights: Option<&Path>,
    seed: u64,
    levels: usize,
    stages: &[usize],
) -> Result<Box<dyn PretextExtractor>> {
    match kind {
        "stub" => Ok(Box::new(StubExtractor::with_levels(seed, levels))),
        "edge" => Ok(Box::new(EdgeExtractor::new(levels))),
        "classification" | "detection" | "segmentation" => {
            let weights = weights.ok_or_else(|| {
                SpnError::Config(format!("pretext kind `{kind}` needs `pretext.weights`"))
            })?;
            Ok(Box::new(TorchScriptExtractor::load(kind, weights, stages, levels)?))
        }
        other => Err(SpnError::UnknownExtractor(other.to_string())),
    }
}

/// Upsamples `images` (`[B, 3, H, W]`) ×2 bilinearly, runs the frozen extractor
/// without gradient tracking, and checks the level count and scale contract.
pub fn extract_targets(extractor: &dyn PretextExtractor, images: &Tensor) -> Result<TargetPyramid> {
    let size = images.size();
    if size.len() != 4 || size[1] != 3 {
        return Err(SpnError::Shape(format!("expected [B, 3, H, W] images, got {size:?}")));
    }
    let (h, w) = (size[2], size[3]);
    let upsampled = images.detach().upsample_bilinear2d([2 * h, 2 * w], false, None, None);
    let levels = tch::no_grad(|| extractor.forward(&upsampled))?;
    let expected = extractor.levels();
    if levels.len() != expected {
        return Err(SpnError::Contract(format!(
            "extractor returned {} levels, expected {expected}",
            levels.len()
        )));
    }
    for (l, (t, &c)) in levels.iter().zip(extractor.channel_dims()).enumerate() {
        let want = [size[0], c, h >> l, w >> l];
        if t.size() != want {
            return Err(SpnError::Contract(format!(
                "level {} has shape {:?}, expected {want:?}",
                l + 1,
                t.size()
            )));
        }
    }
    Ok(TargetPyramid {
        levels: levels.into_iter().map(|t| t.detach()).collect(),
        source_tag: extractor.tag(),
    })
}
