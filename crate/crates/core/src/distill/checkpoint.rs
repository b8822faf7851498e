//! Binary checkpoint of a [`DistillState`].
//!
//! ```text
//! b"SLPC" | version: u32 = 1
//! encoder activation: u32 | head activation: u32 | prototype head: u32
//! tau_student, tau_teacher, ema_momentum, center_momentum: f64
//! encoder layers: u32 | head layers: u32 | tensor count: u32
//! shape table: (rows: u32, cols: u32) per tensor
//! payload: every tensor as little-endian f32, row-major
//! ```
//!
//! Tensor order is student encoder (weight, bias per layer), student head,
//! teacher encoder, teacher head, then the center as a 1 x P tensor.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::network::{Activation, Linear, Mlp, Network};
use super::{DistillState, PrototypeHead};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SLPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("checkpoint format error: {0}")]
    Format(String),
}

fn format_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

pub fn encode_checkpoint(state: &DistillState) -> Vec<u8> {
    let mut buf = Vec::new();
    let u32le = |buf: &mut Vec<u8>, v: u32| buf.extend_from_slice(&v.to_le_bytes());
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    u32le(&mut buf, CHECKPOINT_VERSION);
    u32le(&mut buf, state.student.encoder.activation.code());
    u32le(&mut buf, state.student.head.activation.code());
    u32le(&mut buf, state.prototype_head.code());
    for v in [
        state.tau_student,
        state.tau_teacher,
        state.ema_momentum,
        state.center_momentum,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    u32le(&mut buf, state.student.encoder.layers.len() as u32);
    u32le(&mut buf, state.student.head.layers.len() as u32);

    let mut shapes: Vec<(usize, usize)> = Vec::new();
    let mut payload: Vec<&[f64]> = Vec::new();
    for net in [&state.student, &state.teacher] {
        for layer in net.encoder.layers.iter().chain(&net.head.layers) {
            shapes.push((layer.out_dim, layer.in_dim));
            payload.push(&layer.weight);
            shapes.push((1, layer.out_dim));
            payload.push(&layer.bias);
        }
    }
    shapes.push((1, state.center.len()));
    payload.push(&state.center);

    u32le(&mut buf, shapes.len() as u32);
    for (r, c) in &shapes {
        u32le(&mut buf, *r as u32);
        u32le(&mut buf, *c as u32);
    }
    for t in payload {
        for v in t {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos + n;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| format_err("truncated checkpoint"))?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n * 4)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(format_err("non-finite parameter"));
        }
        Ok(values)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DistillState, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(format_err("bad magic bytes, expected \"SLPC\""));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let act = |code: u32| {
        Activation::from_code(code).ok_or_else(|| format_err(format!("unknown activation {code}")))
    };
    let enc_act = act(r.u32()?)?;
    let head_act = act(r.u32()?)?;
    let proto_code = r.u32()?;
    let prototype_head = PrototypeHead::from_code(proto_code)
        .ok_or_else(|| format_err(format!("unknown prototype head {proto_code}")))?;
    let (tau_student, tau_teacher, ema_momentum, center_momentum) =
        (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let enc_layers = r.u32()? as usize;
    let head_layers = r.u32()? as usize;
    let count = r.u32()? as usize;
    if enc_layers == 0 || head_layers == 0 || count != 4 * (enc_layers + head_layers) + 1 {
        return Err(format_err(
            "shape table does not describe two networks and a center",
        ));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        shapes.push((r.u32()? as usize, r.u32()? as usize));
    }
    let mut shape_iter = shapes.into_iter();
    let mut read_mlp = |r: &mut Reader<'_>,
                        layers: usize,
                        activation: Activation|
     -> Result<Mlp, CheckpointError> {
        let mut out = Vec::with_capacity(layers);
        for _ in 0..layers {
            let (rows, cols) = shape_iter.next().unwrap();
            let weight = r.f32s(rows * cols)?;
            let (one, blen) = shape_iter.next().unwrap();
            if one != 1 || blen != rows {
                return Err(format_err("bias shape does not match its weight"));
            }
            let bias = r.f32s(blen)?;
            out.push(Linear {
                in_dim: cols,
                out_dim: rows,
                weight,
                bias,
            });
        }
        if out.windows(2).any(|w| w[0].out_dim != w[1].in_dim) {
            return Err(format_err("consecutive layer widths disagree"));
        }
        Ok(Mlp {
            layers: out,
            activation,
        })
    };
    let mut read_net = |r: &mut Reader<'_>| -> Result<Network, CheckpointError> {
        let encoder = read_mlp(r, enc_layers, enc_act)?;
        let head = read_mlp(r, head_layers, head_act)?;
        if encoder.out_dim() != head.in_dim() {
            return Err(format_err("encoder output does not feed the head"));
        }
        Ok(Network { encoder, head })
    };
    let student = read_net(&mut r)?;
    let teacher = read_net(&mut r)?;
    let (one, p) = shape_iter.next().unwrap();
    if one != 1 || p != student.head.out_dim() || !student.same_shape(&teacher) {
        return Err(format_err("teacher, student and center shapes disagree"));
    }
    let center = r.f32s(p)?;
    if r.pos != bytes.len() {
        return Err(format_err("trailing bytes after payload"));
    }
    Ok(DistillState {
        student,
        teacher,
        center,
        tau_student,
        tau_teacher,
        ema_momentum,
        center_momentum,
        prototype_head,
    })
}

pub fn write_checkpoint(state: &DistillState, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(state)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<DistillState, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
