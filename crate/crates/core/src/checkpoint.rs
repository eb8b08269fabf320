//! Checkpoint directories.
//!
//! Layout:
//!
//! ```text
//! <dir>/config.toml        effective RunConfig, `key = value` lines
//! <dir>/meta               format version, iteration, kind, distillation dims
//! <dir>/params/prior.bin
//! <dir>/params/gen.bin
//! <dir>/params/disc.bin    training checkpoints only
//! <dir>/optim/gen.bin      training checkpoints only
//! <dir>/optim/disc.bin     training checkpoints only
//! ```
//!
//! `.bin` files hold named tensors sorted by name: magic, version, count, then per
//! entry the name, a kind byte, the shape and little-endian data. Writing the same
//! tensors twice gives identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use tch::{Device, Kind, Tensor};

use crate::error::{Result, SpnError};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SPNT";

pub type NamedTensors = BTreeMap<String, Tensor>;

fn kind_code(kind: Kind) -> Result<u8> {
    match kind {
        Kind::Float => Ok(0),
        Kind::Double => Ok(1),
        Kind::Int64 => Ok(2),
        other => Err(SpnError::Invalid(format!("cannot serialize tensors of kind {other:?}"))),
    }
}

fn code_kind(code: u8) -> Result<(Kind, usize)> {
    match code {
        0 => Ok((Kind::Float, 4)),
        1 => Ok((Kind::Double, 8)),
        2 => Ok((Kind::Int64, 8)),
        other => Err(SpnError::Manifest(format!("unknown tensor kind code {other}"))),
    }
}

pub fn encode_tensors(tensors: &NamedTensors) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let t = t.detach().to_device(Device::Cpu).contiguous();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(kind_code(t.kind())?);
        let shape = t.size();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in &shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        let numel = t.numel();
        match t.kind() {
            Kind::Float => {
                let mut buf = vec![0f32; numel];
                t.copy_data(&mut buf, numel);
                buf.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
            Kind::Double => {
                let mut buf = vec![0f64; numel];
                t.copy_data(&mut buf, numel);
                buf.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
            _ => {
                let mut buf = vec![0i64; numel];
                t.copy_data(&mut buf, numel);
                buf.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
    }
    Ok(out)
}

fn take<const N: usize>(r: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| SpnError::Manifest("truncated tensor file".into()))?;
    Ok(b)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<NamedTensors> {
    let mut r = Cursor::new(bytes);
    if &take::<4>(&mut r)? != MAGIC {
        return Err(SpnError::Manifest("not a tensor file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != FORMAT_VERSION {
        return Err(SpnError::Version { found: version, expected: FORMAT_VERSION });
    }
    let count = u32::from_le_bytes(take(&mut r)?);
    let mut out = NamedTensors::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| SpnError::Manifest("truncated tensor name".into()))?;
        let name = String::from_utf8(name).map_err(|_| SpnError::Manifest("tensor name is not UTF-8".into()))?;
        let (kind, width) = code_kind(take::<1>(&mut r)?[0])?;
        let ndim = u32::from_le_bytes(take(&mut r)?) as usize;
        let shape: Vec<i64> = (0..ndim)
            .map(|_| take::<8>(&mut r).map(|b| u64::from_le_bytes(b) as i64))
            .collect::<Result<_>>()?;
        let numel: usize = shape.iter().product::<i64>() as usize;
        let mut data = vec![0u8; numel * width];
        r.read_exact(&mut data).map_err(|_| SpnError::Manifest(format!("truncated data for `{name}`")))?;
        let t = match kind {
            Kind::Float => {
                let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_slice(&v)
            }
            Kind::Double => {
                let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_slice(&v)
            }
            _ => {
                let v: Vec<i64> = data.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_slice(&v)
            }
        };
        out.insert(name, t.view(shape.as_slice()));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &NamedTensors) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| SpnError::io(parent, e))?;
    }
    fs::write(path, encode_tensors(tensors)?).map_err(|e| SpnError::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<NamedTensors> {
    let bytes = fs::read(path).map_err(|e| SpnError::io(path, e))?;
    decode_tensors(&bytes)
}

/// Copies `source` into `target` after checking that both hold exactly the same
/// names and shapes. `skip` filters target names that may be absent from the
/// source (e.g. distillation heads in an inference export).
pub fn load_into(target: &NamedTensors, source: &NamedTensors, what: &str, skip: impl Fn(&str) -> bool) -> Result<()> {
    for name in source.keys() {
        if !target.contains_key(name) {
            return Err(SpnError::Manifest(format!("{what}: unexpected entry `{name}`")));
        }
    }
    for (name, t) in target {
        let Some(src) = source.get(name) else {
            if skip(name) {
                continue;
            }
            return Err(SpnError::Manifest(format!("{what}: missing entry `{name}`")));
        };
        if src.size() != t.size() {
            return Err(SpnError::Manifest(format!(
                "{what}: `{name}` has shape {:?} in the checkpoint but {:?} in the configured model",
                src.size(),
                t.size()
            )));
        }
        tch::no_grad(|| {
            let mut dst = t.shallow_clone();
            dst.copy_(&src.to_kind(t.kind()));
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointKind {
    Training,
    Inference,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Meta {
    pub version: u32,
    pub iteration: u64,
    pub kind: CheckpointKind,
    pub distill_dims: Vec<i64>,
}

impl Meta {
    pub fn to_text(&self) -> String {
        let dims: Vec<String> = self.distill_dims.iter().map(i64::to_string).collect();
        format!(
            "version = {}\niteration = {}\nkind = {}\ndistill_dims = {}\n",
            self.version,
            self.iteration,
            match self.kind {
                CheckpointKind::Training => "training",
                CheckpointKind::Inference => "inference",
            },
            dims.join(",")
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SpnError::Manifest(format!("malformed meta line `{line}`")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| SpnError::Manifest(format!("meta lacks `{k}`")));
        let bad = |k: &str| SpnError::Manifest(format!("meta field `{k}` is malformed"));
        let version: u32 = get("version")?.parse().map_err(|_| bad("version"))?;
        if version != FORMAT_VERSION {
            return Err(SpnError::Version { found: version, expected: FORMAT_VERSION });
        }
        let kind = match get("kind")?.as_str() {
            "training" => CheckpointKind::Training,
            "inference" => CheckpointKind::Inference,
            _ => return Err(bad("kind")),
        };
        let dims = get("distill_dims")?;
        let distill_dims = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',').map(|d| d.trim().parse().map_err(|_| bad("distill_dims"))).collect::<Result<_>>()?
        };
        Ok(Meta { version, iteration: get("iteration")?.parse().map_err(|_| bad("iteration"))?, kind, distill_dims })
    }
}

pub fn meta_path(dir: &Path) -> PathBuf {
    dir.join("meta")
}

pub fn config_path(dir: &Path) -> PathBuf {
    dir.join("config.toml")
}

pub fn params_path(dir: &Path, part: &str) -> PathBuf {
    dir.join("params").join(format!("{part}.bin"))
}

pub fn optim_path(dir: &Path, part: &str) -> PathBuf {
    dir.join("optim").join(format!("{part}.bin"))
}

pub fn read_meta(dir: &Path) -> Result<Meta> {
    let path = meta_path(dir);
    let text = fs::read_to_string(&path).map_err(|e| SpnError::io(&path, e))?;
    Meta::parse(&text)
}

/// Short identifier of the inference-relevant parameters (prior learner without
/// heads, generator): hex SHA-256 of the two blobs.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for part in ["prior", "gen"] {
        let path = params_path(dir, part);
        let mut tensors = read_tensors(&path)?;
        tensors.retain(|name, _| !name.starts_with(crate::prior::HEADS_PREFIX));
        h.update(encode_tensors(&tensors)?);
    }
    Ok(hex::encode(&h.finalize()[..8]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedTensors {
        let mut m = NamedTensors::new();
        m.insert("b.weight".into(), Tensor::from_slice(&[1.0f32, -2.5, 3.25, 0.0]).view([2, 2]));
        m.insert("a.step".into(), Tensor::from_slice(&[7i64]));
        m.insert("c".into(), Tensor::from_slice(&[0.1f64, 0.2, 0.3]));
        m
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = encode_tensors(&sample()).unwrap();
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(encode_tensors(&back).unwrap(), bytes);
        assert!(back["b.weight"].equal(&sample()["b.weight"]));
        assert_eq!(back["c"].kind(), Kind::Double);
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = encode_tensors(&sample()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_tensors(&bytes), Err(SpnError::Version { found: 9, .. })));
        assert!(matches!(decode_tensors(b"nope"), Err(SpnError::Manifest(_))));
    }

    #[test]
    fn load_into_checks_shapes() {
        let target = sample();
        let mut source = sample();
        source.insert("b.weight".into(), Tensor::zeros([4], (Kind::Float, Device::Cpu)));
        assert!(matches!(load_into(&target, &source, "t", |_| false), Err(SpnError::Manifest(_))));
        source.remove("b.weight");
        assert!(load_into(&target, &source, "t", |_| false).is_err());
        assert!(load_into(&target, &source, "t", |n| n.starts_with("b.")).is_ok());
    }

    #[test]
    fn meta_round_trip() {
        let m = Meta { version: FORMAT_VERSION, iteration: 42, kind: CheckpointKind::Training, distill_dims: vec![32, 64] };
        assert_eq!(Meta::parse(&m.to_text()).unwrap(), m);
        let old = m.to_text().replace("version = 1", "version = 0");
        assert!(matches!(Meta::parse(&old), Err(SpnError::Version { found: 0, .. })));
    }
}
