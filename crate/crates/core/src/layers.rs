//! Small building blocks shared by the networks.
//!
//! All parameters are initialized from an explicit ChaCha stream instead of the
//! libtorch global generator, so construction is reproducible even when several
//! models are built concurrently.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tch::{nn, Kind, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn lrelu(x: &Tensor) -> Tensor {
    // `prelu` with a fixed slope: fused kernel in both directions.
    x.prelu(&Tensor::from_slice(&[LEAKY_SLOPE]).to_kind(x.kind()))
}

/// Parameter-free instance normalization over the spatial axes of `[B, C, H, W]`
/// (biased variance).
pub fn instance_norm(x: &Tensor, eps: f64) -> Tensor {
    Tensor::instance_norm(x, None::<Tensor>, None::<Tensor>, None::<Tensor>, None::<Tensor>, true, 0.0, eps, false)
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[i64], bound: f64) -> Tensor {
    let n: i64 = dims.iter().product();
    let vals: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
    Tensor::from_slice(&vals).view(dims)
}

pub fn standard_normal(rng: &mut ChaCha8Rng, dims: &[i64]) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n: i64 = dims.iter().product();
    let vals: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_slice(&vals).view(dims)
}

/// Zeroes a parameter in place without recording the write on the tape.
pub fn zero_param(t: &Tensor) {
    tch::no_grad(|| {
        let mut t = t.shallow_clone();
        let _ = t.zero_();
    });
}

#[derive(Debug)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    stride: i64,
    padding: i64,
}

impl Conv {
    /// Square-kernel convolution with uniform `±1/sqrt(fan_in)` initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p: &nn::Path,
        rng: &mut ChaCha8Rng,
        c_in: i64,
        c_out: i64,
        kernel: i64,
        stride: i64,
        padding: i64,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = p.var_copy("weight", &uniform(rng, &[c_out, c_in, kernel, kernel], bound));
        let bias = bias.then(|| p.var_copy("bias", &uniform(rng, &[c_out], bound)));
        Conv { weight, bias, stride, padding }
    }

    /// 3×3, stride 1, same padding.
    pub fn same(p: &nn::Path, rng: &mut ChaCha8Rng, c_in: i64, c_out: i64) -> Self {
        Conv::new(p, rng, c_in, c_out, 3, 1, 1, true)
    }

    pub fn pointwise(p: &nn::Path, rng: &mut ChaCha8Rng, c_in: i64, c_out: i64, bias: bool) -> Self {
        Conv::new(p, rng, c_in, c_out, 1, 1, 0, bias)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.weight, self.bias.as_ref(), [self.stride; 2], [self.padding; 2], [1, 1], 1)
    }

    pub fn out_channels(&self) -> i64 {
        self.weight.size()[0]
    }

    pub fn zero_(&self) {
        zero_param(&self.weight);
        if let Some(b) = &self.bias {
            zero_param(b);
        }
    }
}

#[derive(Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(p: &nn::Path, rng: &mut ChaCha8Rng, c_in: i64, c_out: i64) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        Linear {
            weight: p.var_copy("weight", &uniform(rng, &[c_out, c_in], bound)),
            bias: p.var_copy("bias", &uniform(rng, &[c_out], bound)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.linear(&self.weight, Some(&self.bias))
    }

    pub fn zero_(&self) {
        zero_param(&self.weight);
        zero_param(&self.bias);
    }
}

const SN_TOL: f64 = 1e-10;
const SN_INIT_STEPS: usize = 5000;
const SN_UPDATE_STEPS: usize = 1000;

/// Convolution whose weight is divided by a power-iteration estimate of its
/// largest singular value.
#[derive(Debug)]
pub struct SpectralConv {
    pub weight: Tensor,
    pub bias: Tensor,
    u: Tensor,
    stride: i64,
    padding: i64,
}

fn normalize(v: &Tensor) -> Tensor {
    v / (v.norm() + 1e-12)
}

impl SpectralConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p: &nn::Path,
        rng: &mut ChaCha8Rng,
        c_in: i64,
        c_out: i64,
        kernel: i64,
        stride: i64,
        padding: i64,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = p.var_copy("weight", &uniform(rng, &[c_out, c_in, kernel, kernel], bound));
        let bias = p.var_copy("bias", &uniform(rng, &[c_out], bound));
        let u0 = normalize(&standard_normal(rng, &[c_out]));
        let mut u = p.zeros_no_train("sn_u", &[c_out]);
        tch::no_grad(|| u.copy_(&u0));
        let conv = SpectralConv { weight, bias, u, stride, padding };
        conv.power_iteration(SN_TOL, SN_INIT_STEPS);
        conv
    }

    fn matrix(&self) -> Tensor {
        self.weight.view([self.weight.size()[0], -1])
    }

    /// Refines the stored left singular vector estimate until the singular
    /// value estimate moves by less than `tol` (relative) or `max_steps` pass.
    /// Returns the number of steps taken.
    pub fn power_iteration(&self, tol: f64, max_steps: usize) -> usize {
        tch::no_grad(|| {
            let w = self.matrix().to_kind(Kind::Double);
            let mut u = self.u.to_kind(Kind::Double);
            let mut prev = 0.0;
            let mut steps = 0;
            while steps < max_steps {
                let v = normalize(&w.tr().mv(&u));
                let wv = w.mv(&v);
                let sigma = wv.norm().double_value(&[]);
                u = normalize(&wv);
                steps += 1;
                if (sigma - prev).abs() <= tol * sigma {
                    break;
                }
                prev = sigma;
            }
            let mut stored = self.u.shallow_clone();
            stored.copy_(&u);
            steps
        })
    }

    /// Current estimate of the largest singular value; differentiable in the weight.
    pub fn sigma(&self) -> Tensor {
        let w = self.matrix();
        let (u, v) = tch::no_grad(|| {
            let u = self.u.copy();
            let v = normalize(&w.tr().mv(&u));
            (u, v)
        });
        u.dot(&w.mv(&v))
    }

    pub fn normalized_weight(&self) -> Tensor {
        &self.weight / self.sigma()
    }

    pub fn refresh(&self) {
        self.power_iteration(SN_TOL, SN_UPDATE_STEPS);
    }

    /// `update` refines the singular vector estimate before the forward pass.
    pub fn forward(&self, x: &Tensor, update: bool) -> Tensor {
        if update {
            self.refresh();
        }
        x.conv2d(&self.normalized_weight(), Some(&self.bias), [self.stride; 2], [self.padding; 2], [1, 1], 1)
    }
}

/// Largest singular value by full SVD; used to audit spectral normalization.
pub fn top_singular_value(weight: &Tensor) -> f64 {
    let rows = weight.size()[0] as usize;
    let m = weight.detach().to_kind(Kind::Double).contiguous().view([rows as i64, -1]);
    let cols = m.size()[1] as usize;
    let data: Vec<f64> = Vec::try_from(&m.view([-1])).expect("double tensor");
    let mat = nalgebra::DMatrix::from_row_slice(rows, cols, &data);
    mat.singular_values().max()
}
