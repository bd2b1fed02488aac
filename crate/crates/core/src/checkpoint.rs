//! Binary model checkpoints.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic        8 bytes  "DMIACKPT"
//! version      u32
//! data_dim     u64
//! param        u8       0 = epsilon, 1 = x0
//! activation   u8       0 = silu, 1 = relu
//! embed_dim    u64
//! sched_kind   u8       0 = linear, 1 = cosine
//! steps        u64      T
//! alphas       (T + 1) x f64
//! n_arrays     u32
//! per array:   name_len u32, name utf-8, ndim u32, dims ndim x u64, values f32
//! ```
//!
//! Arrays are `layer{k}.weight` (shape `[out, in]`) and `layer{k}.bias`
//! (shape `[out]`), in layer order.

use std::path::Path;

use crate::diffusion::{Denoiser, DiffusionModel, Parameterization};
use crate::error::{CheckpointError, Error, Result};
use crate::nn::{Activation, DenseNet, Layer};
use crate::schedule::{NoiseSchedule, ScheduleKind};

pub const MAGIC: &[u8; 8] = b"DMIACKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on any single length field, to fail fast on garbage input.
const MAX_LEN: u64 = 1 << 32;

pub fn to_bytes(model: &DiffusionModel) -> Vec<u8> {
    let net = model.net();
    let schedule = model.schedule();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.data_dim() as u64).to_le_bytes());
    out.push(model.parameterization().to_tag());
    out.push(net.activation().to_tag());
    out.extend_from_slice(&(net.time_embedding().dim() as u64).to_le_bytes());
    out.push(schedule.kind().to_tag());
    out.extend_from_slice(&(schedule.steps() as u64).to_le_bytes());
    for a in schedule.alphas() {
        out.extend_from_slice(&a.to_le_bytes());
    }
    out.extend_from_slice(&(2 * net.layers().len() as u32).to_le_bytes());
    for (k, layer) in net.layers().iter().enumerate() {
        write_array(&mut out, &format!("layer{k}.weight"), &[layer.out_dim, layer.in_dim], &layer.weights);
        write_array(&mut out, &format!("layer{k}.bias"), &[layer.out_dim], &layer.bias);
    }
    out
}

fn write_array(out: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        if v > MAX_LEN {
            return Err(CheckpointError::Malformed(format!("{what} = {v} is implausibly large")));
        }
        Ok(v as usize)
    }
}

fn read_array(r: &mut Reader<'_>, name: &str, dims: &[usize]) -> Result<Vec<f32>, CheckpointError> {
    let name_len = r.u32("array name length")? as usize;
    let found = std::str::from_utf8(r.take(name_len, "array name")?)
        .map_err(|_| CheckpointError::Malformed("array name is not utf-8".into()))?;
    if found != name {
        return Err(CheckpointError::Malformed(format!("expected array {name}, found {found}")));
    }
    let ndim = r.u32("array rank")? as usize;
    if ndim > 8 {
        return Err(CheckpointError::Malformed(format!("{name} has rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.len("array dims")?);
    }
    if shape != dims {
        return Err(CheckpointError::ShapeMismatch {
            name: name.to_string(),
            detail: format!("stored {shape:?}, header implies {dims:?}"),
        });
    }
    let n: usize = dims.iter().product();
    let bytes = r.take(n * 4, "array values")?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Parses a checkpoint. Layer widths come from the stored array shapes; the
/// header fixes the input and output widths they must chain between.
pub fn from_bytes(bytes: &[u8]) -> Result<DiffusionModel> {
    let mut r = Reader { buf: bytes };
    if r.take(8, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION }.into());
    }
    let data_dim = r.len("data_dim")?;
    let param_tag = r.u8("parameterization")?;
    let parameterization = Parameterization::from_tag(param_tag)
        .ok_or_else(|| CheckpointError::Malformed(format!("parameterization tag {param_tag}")))?;
    let act_tag = r.u8("activation")?;
    let activation = Activation::from_tag(act_tag)
        .ok_or_else(|| CheckpointError::Malformed(format!("activation tag {act_tag}")))?;
    let embed_dim = r.len("time_embed_dim")?;
    let kind_tag = r.u8("schedule kind")?;
    let kind = ScheduleKind::from_tag(kind_tag)
        .ok_or_else(|| CheckpointError::Malformed(format!("schedule tag {kind_tag}")))?;
    let steps = r.len("steps")?;
    let alpha_bytes = r.take((steps + 1) * 8, "alphas")?;
    let alphas: Vec<f64> =
        alpha_bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let schedule = NoiseSchedule::from_alphas(kind, alphas)
        .map_err(|e| CheckpointError::Malformed(format!("schedule: {e}")))?;

    let n_arrays = r.u32("array count")? as usize;
    if n_arrays == 0 || !n_arrays.is_multiple_of(2) {
        return Err(CheckpointError::Malformed(format!("{n_arrays} parameter arrays")).into());
    }
    let n_layers = n_arrays / 2;
    let mut layers = Vec::with_capacity(n_layers);
    let mut in_dim = data_dim + embed_dim;
    for k in 0..n_layers {
        let wname = format!("layer{k}.weight");
        let peek_shape = peek_dims(&r, &wname)?;
        let out_dim = match peek_shape.as_slice() {
            [o, i] if *i == in_dim => *o,
            other => {
                return Err(CheckpointError::ShapeMismatch {
                    name: wname,
                    detail: format!("stored {other:?}, expected [_, {in_dim}]"),
                }
                .into())
            }
        };
        if k + 1 == n_layers && out_dim != data_dim {
            return Err(CheckpointError::ShapeMismatch {
                name: wname,
                detail: format!("output width {out_dim} != data_dim {data_dim}"),
            }
            .into());
        }
        let weights = read_array(&mut r, &wname, &[out_dim, in_dim])?;
        let bias = read_array(&mut r, &format!("layer{k}.bias"), &[out_dim])?;
        layers.push(Layer { in_dim, out_dim, weights, bias });
        in_dim = out_dim;
    }
    if !r.buf.is_empty() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.buf.len())).into());
    }
    let net = DenseNet::from_layers(layers, activation, embed_dim)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    DiffusionModel::new(net, schedule, parameterization)
}

/// Reads the shape of the next array without consuming it.
fn peek_dims(r: &Reader<'_>, name: &str) -> Result<Vec<usize>, CheckpointError> {
    let mut probe = Reader { buf: r.buf };
    let name_len = probe.u32("array name length")? as usize;
    let found = probe.take(name_len, "array name")?;
    if found != name.as_bytes() {
        return Err(CheckpointError::Malformed(format!(
            "expected array {name}, found {}",
            String::from_utf8_lossy(found)
        )));
    }
    let ndim = probe.u32("array rank")? as usize;
    if ndim > 8 {
        return Err(CheckpointError::Malformed(format!("{name} has rank {ndim}")));
    }
    (0..ndim).map(|_| probe.len("array dims")).collect()
}

pub fn save_checkpoint(model: &DiffusionModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DiffusionModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
