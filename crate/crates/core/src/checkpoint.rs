//! Portable binary tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TCKT" | version: u32 | count: u32
//! per tensor: name_len: u32 | name: utf-8 | dtype: u8 | rank: u32 | dims: u64 × rank | payload
//! ```
//!
//! dtype 0 is `f32`, 1 is a `u8` mask and 2 is `f64`. Masks are stored as
//! companion tensors named `<param>.mask`; batch-norm running statistics as
//! `bn{l}.running_mean` / `bn{l}.running_var`. Architecture and head layout
//! live in a JSON sidecar next to the binary file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchSpec, HeadSpec, Model, ParamEntry, ParamKind, ParamRegistry, RunningStats};
use crate::pruning::{Mask, MaskEntry};
use crate::tensor::{Element, Precision, Tensor};

pub const MAGIC: &[u8; 4] = b"TCKT";
pub const VERSION: u32 = 1;
pub const MASK_SUFFIX: &str = ".mask";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::U8(_) => 1,
            TensorData::F64(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    fn element_size(tag: u8) -> Option<usize> {
        match tag {
            0 => Some(4),
            1 => Some(1),
            2 => Some(8),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl StoredTensor {
    pub fn from_tensor<F: Element>(name: &str, t: &Tensor<F>) -> Self {
        let data = match F::PRECISION {
            Precision::F32 => TensorData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            Precision::F64 => TensorData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        StoredTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    /// Converts a floating tensor to precision `F`.
    pub fn to_tensor<F: Element>(&self) -> Result<Tensor<F>> {
        let data: Vec<F> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| F::of(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| F::of(x)).collect(),
            TensorData::U8(_) => {
                return Err(Error::InvalidArgument(format!("`{}` is a mask, not a float tensor", self.name)))
            }
        };
        Tensor::new(self.shape.clone(), data)
    }

    /// Payload length must equal the product of the dims.
    pub fn validate(&self) -> Result<()> {
        let want: usize = self.shape.iter().product();
        if self.data.len() != want {
            return Err(Error::shape(
                "checkpoint",
                format!("`{}` holds {} values for shape {:?}", self.name, self.data.len(), self.shape),
            ));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes tensors into the checkpoint byte layout.
pub fn encode(tensors: &[StoredTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, tensors.len() as u32);
    for t in tensors {
        put_u32(&mut out, t.name.len() as u32);
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.data.tag());
        put_u32(&mut out, t.shape.len() as u32);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &t.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: impl FnOnce() -> String) -> Result<&'a [u8]> {
        match self.at.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            _ => Err(Error::Truncated { context: context() }),
        }
    }

    fn u32(&mut self, context: impl FnOnce() -> String) -> Result<u32> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses checkpoint bytes. Bad magic, version mismatch and truncation are
/// reported as distinct errors.
pub fn decode(bytes: &[u8]) -> Result<Vec<StoredTensor>> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4, || "magic".into())?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32(|| "version".into())?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32(|| "tensor count".into())? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let name_len = r.u32(|| format!("name length of tensor #{i}"))? as usize;
        let name = r.take(name_len, || format!("name of tensor #{i}"))?;
        let name = String::from_utf8(name.to_vec())
            .map_err(|_| Error::InvalidArgument(format!("tensor #{i} name is not UTF-8")))?;
        let tag = r.take(1, || format!("dtype of tensor `{name}`"))?[0];
        let size = TensorData::element_size(tag)
            .ok_or_else(|| Error::InvalidArgument(format!("tensor `{name}` has unknown dtype tag {tag}")))?;
        let rank = r.u32(|| format!("rank of tensor `{name}`"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let b = r.take(8, || format!("dims of tensor `{name}`"))?;
            shape.push(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(size))
            .ok_or_else(|| Error::Truncated {
                context: format!("payload of tensor `{name}`"),
            })?;
        let payload = r.take(n, || format!("payload of tensor `{name}`"))?;
        let data = match tag {
            0 => TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => TensorData::U8(payload.to_vec()),
            _ => TensorData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        tensors.push(StoredTensor { name, shape, data });
    }
    Ok(tensors)
}

pub fn write_tensors(path: &Path, tensors: &[StoredTensor]) -> Result<()> {
    for t in tensors {
        t.validate()?;
    }
    fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<StoredTensor>> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn running_stat_names(layer: usize) -> [String; 2] {
    [format!("bn{layer}.running_mean"), format!("bn{layer}.running_var")]
}

/// Parameters, running statistics and (when present) masks as tensors.
pub fn model_tensors<F: Element>(model: &Model<F>, mask: Option<&Mask>) -> Vec<StoredTensor> {
    let mut out: Vec<StoredTensor> = model
        .registry()
        .entries()
        .iter()
        .map(|e| StoredTensor::from_tensor(&e.name, &e.tensor))
        .collect();
    for (i, stats) in model.norm_stats().iter().enumerate() {
        let [mean, var] = running_stat_names(i + 1);
        let c = stats.mean.len();
        out.push(StoredTensor::from_tensor(&mean, &Tensor::new(vec![c], stats.mean.clone()).expect("1-d")));
        out.push(StoredTensor::from_tensor(&var, &Tensor::new(vec![c], stats.var.clone()).expect("1-d")));
    }
    if let Some(mask) = mask {
        out.extend(mask.entries().iter().map(|m| StoredTensor {
            name: format!("{}{MASK_SUFFIX}", m.name),
            shape: m.shape.clone(),
            data: TensorData::U8(m.bits.clone()),
        }));
    }
    out
}

/// Architecture sidecar stored as `<checkpoint>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub arch: ArchSpec,
    pub heads: Vec<HeadSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `model` (and `mask`) plus its architecture sidecar.
pub fn save_checkpoint<F: Element>(
    path: &Path,
    model: &Model<F>,
    mask: Option<&Mask>,
    extra: Option<serde_json::Value>,
) -> Result<()> {
    write_tensors(path, &model_tensors(model, mask))?;
    let meta = ModelMeta {
        arch: model.spec().clone(),
        heads: model.heads().to_vec(),
        extra,
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&side, e))
}

fn kind_of(name: &str) -> Option<(ParamKind, Option<usize>)> {
    let layer = |prefix: &str, suffix: &str| {
        name.strip_prefix(prefix)
            .and_then(|r| r.strip_suffix(suffix))
            .and_then(|l| l.parse::<usize>().ok())
    };
    if let Some(l) = layer("conv", ".weight") {
        return Some((ParamKind::Conv, Some(l)));
    }
    if let Some(l) = layer("bn", ".gamma").or_else(|| layer("bn", ".beta")) {
        return Some((ParamKind::NormAffine, Some(l)));
    }
    if name.starts_with("head.") && name.ends_with(".weight") {
        return Some((ParamKind::Dense, None));
    }
    if name.starts_with("head.") && name.ends_with(".bias") {
        return Some((ParamKind::Bias, None));
    }
    None
}

/// What a checkpoint holds, interpreted without the sidecar.
#[derive(Clone, Debug)]
pub struct LoadedCheckpoint<F> {
    pub registry: ParamRegistry<F>,
    pub norm_stats: Vec<RunningStats<F>>,
    pub mask: Option<Mask>,
}

/// Rebuilds the registry from tensor names: `conv{l}.weight` entries are
/// prunable, batch-norm affine and head parameters are protected.
pub fn load_checkpoint<F: Element>(path: &Path) -> Result<LoadedCheckpoint<F>> {
    interpret(read_tensors(path)?)
}

/// Running mean and variance of one norm layer as they turn up.
type PartialStats<F> = (Option<Vec<F>>, Option<Vec<F>>);

pub fn interpret<F: Element>(tensors: Vec<StoredTensor>) -> Result<LoadedCheckpoint<F>> {
    let depth = tensors
        .iter()
        .filter_map(|t| match kind_of(&t.name) {
            Some((ParamKind::Conv, Some(l))) => Some(l),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    let mut entries = Vec::new();
    let mut mask_entries = Vec::new();
    let mut stats: Vec<PartialStats<F>> = vec![(None, None); depth];
    for t in &tensors {
        if let Some(param) = t.name.strip_suffix(MASK_SUFFIX) {
            let TensorData::U8(bits) = &t.data else {
                return Err(Error::MaskMismatch(format!("`{}` is not an 8-bit tensor", t.name)));
            };
            mask_entries.push((param.to_string(), t.shape.clone(), bits.clone()));
            continue;
        }
        if let Some(rest) = t.name.strip_prefix("bn") {
            if let Some((l, which)) = rest.split_once(".running_") {
                let l: usize = l.parse().map_err(|_| Error::InvalidArgument(format!("bad tensor name `{}`", t.name)))?;
                if l == 0 || l > depth {
                    return Err(Error::InvalidArgument(format!("`{}` has no matching conv layer", t.name)));
                }
                let v = t.to_tensor::<F>()?.into_data();
                match which {
                    "mean" => stats[l - 1].0 = Some(v),
                    "var" => stats[l - 1].1 = Some(v),
                    _ => return Err(Error::InvalidArgument(format!("unknown statistic `{}`", t.name))),
                }
                continue;
            }
        }
        let (kind, layer) =
            kind_of(&t.name).ok_or_else(|| Error::InvalidArgument(format!("unrecognized tensor `{}`", t.name)))?;
        entries.push(ParamEntry {
            layer_id: layer.unwrap_or(depth + 1),
            name: t.name.clone(),
            tensor: t.to_tensor()?,
            prunable: kind == ParamKind::Conv,
            kind,
        });
    }
    let registry = ParamRegistry::new(entries);
    let norm_stats = stats
        .into_iter()
        .enumerate()
        .map(|(i, s)| match s {
            (Some(mean), Some(var)) => Ok(RunningStats { mean, var }),
            _ => Err(Error::InvalidArgument(format!("missing running statistics for layer {}", i + 1))),
        })
        .collect::<Result<Vec<_>>>()?;
    let mask = if mask_entries.is_empty() {
        None
    } else {
        let mut ordered = Vec::new();
        for p in registry.prunable() {
            let (_, shape, bits) = mask_entries
                .iter()
                .find(|(name, ..)| *name == p.name)
                .ok_or_else(|| Error::MaskMismatch(format!("no mask stored for `{}`", p.name)))?;
            ordered.push(MaskEntry {
                layer_id: p.layer_id,
                name: p.name.clone(),
                shape: shape.clone(),
                bits: bits.clone(),
            });
        }
        if ordered.len() != mask_entries.len() {
            return Err(Error::MaskMismatch("masks stored for non-prunable tensors".into()));
        }
        let mask = Mask::from_entries(ordered)?;
        mask.check_matches(&registry)?;
        Some(mask)
    };
    Ok(LoadedCheckpoint {
        registry,
        norm_stats,
        mask,
    })
}

/// Loads a full model using the architecture sidecar.
pub fn load_model<F: Element>(path: &Path) -> Result<(Model<F>, Option<Mask>, ModelMeta)> {
    let side = sidecar_path(path);
    let meta: ModelMeta = serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    let loaded = load_checkpoint::<F>(path)?;
    let model = Model::from_parts(meta.arch.clone(), loaded.registry, loaded.norm_stats, meta.heads.clone())?;
    Ok((model, loaded.mask, meta))
}
