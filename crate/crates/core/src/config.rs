//! Run configuration: a flat map of dotted keys with typed values.
//!
//! Values are merged in order defaults ← preset ← config file ← command-line flags.
//! The text form is one `key = value` line per key, which is also valid TOML,
//! and is written verbatim into every checkpoint and report.

use std::collections::BTreeMap;
use std::path::Path;

use toml::Value;

use crate::error::{Result, SpnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Int,
    Float,
    Bool,
    Str,
    IntList,
}

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub kind: ValueKind,
    pub default: &'static str,
    pub help: &'static str,
}

const fn spec(key: &'static str, kind: ValueKind, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, kind, default, help }
}

use ValueKind::*;

pub const KEYS: &[KeySpec] = &[
    spec("data.size", Int, "256", "square image side length"),
    spec("data.center_crop", Bool, "false", "center-crop to a square before resizing"),
    spec("data.flip_masks", Bool, "true", "random mask flips during training"),
    spec("pretext.kind", Str, "stub", "classification | detection | segmentation | edge | stub"),
    spec("pretext.weights", Str, "", "TorchScript backbone for non-stub pretext kinds"),
    spec("pretext.seed", Int, "7", "seed of the stub pretext extractor"),
    spec("pretext.stages", IntList, "", "backbone output indices used as pyramid levels"),
    spec("perceptual.kind", Str, "stub", "stub | vgg19"),
    spec("perceptual.weights", Str, "", "TorchScript perceptual network"),
    spec("perceptual.seed", Int, "11", "seed of the stub perceptual network"),
    spec("fid.kind", Str, "stub", "stub | inception"),
    spec("fid.weights", Str, "", "TorchScript embedding network for FID"),
    spec("fid.seed", Int, "13", "seed of the stub embedding network"),
    spec("prior.channels", IntList, "64,128,256", "prior pyramid widths, finest level first"),
    spec("prior.latent_dim", Int, "256", "latent code length"),
    spec("prior.mode", Str, "deterministic", "deterministic | probabilistic"),
    spec("prior.gv_uses_context", Bool, "false", "feed the top context level into the latent decoder"),
    spec("prior.latent_grid", Int, "16", "side of the spatial grid emitted by the latent decoder"),
    spec("prior.rdb_layers", Int, "4", "dense layers in the residual dense block"),
    spec("prior.rdb_growth", Int, "32", "growth rate of the residual dense block"),
    spec("prior.bottom_blocks", Int, "2", "residual blocks at the coarsest prior level"),
    spec("gen.channels", IntList, "64,128,256", "generator widths, finest level first"),
    spec("gen.bottom_blocks", Int, "8", "SPADE residual blocks at the coarsest level"),
    spec("gen.spade_hidden", Int, "128", "hidden width of each SPADE shared convolution"),
    spec("disc.channels", IntList, "64,128,256,512", "discriminator widths of the tapped layers"),
    spec("adv.loss_form", Str, "paper", "paper | nonsaturating"),
    spec("loss.alpha", Float, "3", "distillation weight on missing regions"),
    spec("loss.delta", Float, "4", "reconstruction weight on missing regions"),
    spec("loss.lambda1", Float, "10", "reconstruction weight"),
    spec("loss.lambda2", Float, "1", "adversarial weight"),
    spec("loss.lambda3", Float, "10", "feature-matching + perceptual weight"),
    spec("loss.lambda4", Float, "1", "diversity weight"),
    spec("loss.lambda5", Float, "0.05", "KL weight"),
    spec("loss.epsilon", Float, "1e-5", "diversity perturbation"),
    spec("train.iters", Int, "150000", "total training iterations"),
    spec("train.batch_size", Int, "8", "batch size"),
    spec("train.lr_initial", Float, "1e-4", "learning rate before decay"),
    spec("train.lr_final", Float, "1e-5", "learning rate after decay"),
    spec("train.decay_fraction", Float, "0.75", "fraction of training after which the rate decays"),
    spec("train.beta1", Float, "0.0", "Adam beta1"),
    spec("train.beta2", Float, "0.9", "Adam beta2"),
    spec("train.grad_clip", Float, "10", "global gradient-norm clip (0 disables)"),
    spec("train.seed", Int, "0", "seed for initialization, batches and latents"),
    spec("train.ckpt_every", Int, "1000", "checkpoint interval in iterations"),
    spec("eval.composited", Bool, "true", "compute metrics on composited outputs"),
    spec("eval.k", Int, "5", "samples per pair for probabilistic models"),
    spec("eval.seed", Int, "0", "seed for mask assignment and latents"),
    spec("serve.port", Int, "8080", "HTTP port"),
    spec("serve.checkpoint", Str, "", "checkpoint directory to load at startup"),
    spec("serve.max_samples", Int, "16", "upper bound on samples per request"),
];

/// Named presets layered over the defaults.
pub fn preset(name: &str) -> Result<&'static [(&'static str, &'static str)]> {
    match name {
        "default" | "" => Ok(&[]),
        // 64x64 synthetic-scale model for CPU training runs.
        "desk" => Ok(&[
            ("data.size", "64"),
            ("prior.channels", "32,64,128"),
            ("prior.latent_dim", "128"),
            ("prior.rdb_growth", "16"),
            ("gen.channels", "16,32,64"),
            ("gen.spade_hidden", "16"),
            ("disc.channels", "32,64,128,256"),
            ("train.iters", "2000"),
            ("train.ckpt_every", "500"),
        ]),
        other => Err(SpnError::Config(format!("unknown preset `{other}`"))),
    }
}

pub fn key_spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == key)
}

fn parse_as(kind: ValueKind, key: &str, raw: &str) -> Result<Value> {
    let bad = || SpnError::Config(format!("invalid value `{raw}` for `{key}`"));
    let raw = raw.trim();
    Ok(match kind {
        Int => Value::Integer(raw.parse().map_err(|_| bad())?),
        Float => Value::Float(raw.parse().map_err(|_| bad())?),
        Bool => Value::Boolean(match raw {
            "true" | "1" | "yes" => true,
            "false" | "0" | "no" => false,
            _ => return Err(bad()),
        }),
        Str => Value::String(raw.trim_matches('"').to_string()),
        IntList => {
            let inner = raw.trim_start_matches('[').trim_end_matches(']');
            let items = inner
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<i64>().map(Value::Integer).map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            Value::Array(items)
        }
    })
}

fn coerce(kind: ValueKind, key: &str, value: Value) -> Result<Value> {
    let bad = |v: &Value| SpnError::Config(format!("value {v} has the wrong type for `{key}`"));
    match (kind, value) {
        (Int, v @ Value::Integer(_)) => Ok(v),
        (Float, v @ Value::Float(_)) => Ok(v),
        (Float, Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Bool, v @ Value::Boolean(_)) => Ok(v),
        (Str, v @ Value::String(_)) => Ok(v),
        (IntList, Value::Array(items)) => {
            if items.iter().all(|v| v.is_integer()) {
                Ok(Value::Array(items))
            } else {
                Err(SpnError::Config(format!("`{key}` must be a list of integers")))
            }
        }
        (IntList, Value::String(s)) => parse_as(IntList, key, &s),
        (_, v) => Err(bad(&v)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = KEYS
            .iter()
            .map(|k| (k.key, parse_as(k.kind, k.key, k.default).expect("valid default")))
            .collect();
        RunConfig { values }
    }
}

impl RunConfig {
    pub fn with_preset(name: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (key, value) in preset(name)? {
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    /// Sets a key from its textual (command-line) form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let spec = key_spec(key).ok_or_else(|| SpnError::Config(format!("unknown key `{key}`")))?;
        self.values.insert(spec.key, parse_as(spec.kind, key, raw)?);
        Ok(())
    }

    pub fn set_value(&mut self, key: &str, value: Value) -> Result<()> {
        let spec = key_spec(key).ok_or_else(|| SpnError::Config(format!("unknown key `{key}`")))?;
        self.values.insert(spec.key, coerce(spec.kind, key, value)?);
        Ok(())
    }

    /// Merges `key = value` text (TOML, dotted keys or nested tables both accepted).
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let table: toml::Table =
            text.parse().map_err(|e| SpnError::Config(format!("config parse error: {e}")))?;
        let mut flat = Vec::new();
        flatten("", Value::Table(table), &mut flat);
        for (key, value) in flat {
            self.set_value(&key, value)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| SpnError::io(path, e))?;
        self.merge_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, value) in &self.values {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value.to_string());
            out.push('\n');
        }
        out
    }

    fn get(&self, key: &str) -> &Value {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key `{key}` is not registered"))
    }

    pub fn int(&self, key: &str) -> i64 {
        self.get(key).as_integer().expect("integer key")
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        usize::try_from(self.int(key))
            .map_err(|_| SpnError::Config(format!("`{key}` must be non-negative")))
    }

    pub fn float(&self, key: &str) -> f64 {
        self.get(key).as_float().expect("float key")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key).as_bool().expect("bool key")
    }

    pub fn str(&self, key: &str) -> &str {
        self.get(key).as_str().expect("string key")
    }

    pub fn int_list(&self, key: &str) -> Vec<i64> {
        self.get(key)
            .as_array()
            .expect("list key")
            .iter()
            .map(|v| v.as_integer().expect("integer item"))
            .collect()
    }
}

fn flatten(prefix: &str, value: Value, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Table(table) => {
            for (k, v) in table {
                let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other)),
    }
}
