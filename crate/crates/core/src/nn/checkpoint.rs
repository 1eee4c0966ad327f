//! Binary checkpoint container.
//!
//! Layout: the text line `RBFOOD-CKPT 1`, then a little-endian `u64` record
//! count. Each record is a length-prefixed UTF-8 descriptor followed by a
//! tensor count and that many tensors (`u64` rank, `u64` dims, `u64` value
//! count, then the values as little-endian `f64`).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::nn::layer::{BatchNorm, Conv3x3, Deconv2x, Dense, Dropout, Layer, LayerKind, Mode};
use crate::nn::spectral::PowerIteration;
use crate::nn::stack::LayerStack;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "RBFOOD-CKPT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub descriptor: String,
    pub tensors: Vec<Tensor>,
}

impl Record {
    pub fn new(descriptor: impl Into<String>, tensors: Vec<Tensor>) -> Self {
        Record {
            descriptor: descriptor.into(),
            tensors,
        }
    }

    /// First token of the descriptor.
    pub fn kind(&self) -> &str {
        self.descriptor.split_whitespace().next().unwrap_or("")
    }

    /// `key=value` tokens after the kind.
    pub fn fields(&self) -> BTreeMap<&str, &str> {
        self.descriptor
            .split_whitespace()
            .skip(1)
            .filter_map(|tok| tok.split_once('='))
            .collect()
    }

    pub fn field<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let fields = self.fields();
        let raw = fields
            .get(key)
            .ok_or_else(|| Error::Format(format!("record `{}` lacks `{key}`", self.kind())))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("record `{}`: bad value for `{key}`", self.kind())))
    }
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated input: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    write_u64(w, values.len() as u64)?;
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f64s(r: &mut impl Read, limit: u64) -> Result<Vec<f64>> {
    let n = read_u64(r)?;
    if n > limit {
        return Err(Error::Format(format!("array length {n} exceeds limit {limit}")));
    }
    let mut buf = vec![0u8; n as usize * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated array: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub(crate) fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    write_u64(w, bytes.len() as u64)?;
    w.write_all(bytes)?;
    Ok(())
}

pub(crate) fn read_bytes(r: &mut impl Read, limit: u64) -> Result<Vec<u8>> {
    let n = read_u64(r)?;
    if n > limit {
        return Err(Error::Format(format!("array length {n} exceeds limit {limit}")));
    }
    let mut buf = vec![0u8; n as usize];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated array: {e}")))?;
    Ok(buf)
}

pub(crate) fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_string(r: &mut impl Read) -> Result<String> {
    let n = read_u64(r)?;
    if n > 1 << 20 {
        return Err(Error::Format(format!("string length {n} too large")));
    }
    let mut buf = vec![0u8; n as usize];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated string: {e}")))?;
    String::from_utf8(buf).map_err(|_| Error::Format("descriptor is not UTF-8".into()))
}

pub(crate) fn read_magic(r: &mut impl Read, magic: &str) -> Result<()> {
    let mut buf = vec![0u8; magic.len() + 1];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("missing `{magic}` header")))?;
    if &buf[..magic.len()] != magic.as_bytes() || buf[magic.len()] != b'\n' {
        return Err(Error::Format(format!("expected `{magic}` header")));
    }
    Ok(())
}

const MAX_TENSOR_VALUES: u64 = 1 << 28;

pub fn write_checkpoint(w: &mut impl Write, records: &[Record]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC.as_bytes())?;
    w.write_all(b"\n")?;
    write_u64(w, records.len() as u64)?;
    for rec in records {
        write_string(w, &rec.descriptor)?;
        write_u64(w, rec.tensors.len() as u64)?;
        for t in &rec.tensors {
            write_u64(w, t.shape().len() as u64)?;
            for &d in t.shape() {
                write_u64(w, d as u64)?;
            }
            write_f64s(w, t.data())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Vec<Record>> {
    read_magic(r, CHECKPOINT_MAGIC)?;
    let count = read_u64(r)?;
    let mut records = Vec::new();
    for _ in 0..count {
        let descriptor = read_string(r)?;
        let nt = read_u64(r)?;
        if nt > 1024 {
            return Err(Error::Format(format!("record with {nt} tensors")));
        }
        let mut tensors = Vec::new();
        for _ in 0..nt {
            let rank = read_u64(r)?;
            if rank > 8 {
                return Err(Error::Format(format!("tensor rank {rank}")));
            }
            let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = read_f64s(r, MAX_TENSOR_VALUES)?;
            tensors.push(Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?);
        }
        records.push(Record { descriptor, tensors });
    }
    Ok(records)
}

fn join_dims(d: &[usize]) -> String {
    d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.parse().map_err(|_| Error::Format(format!("bad dims `{s}`"))))
        .collect()
}

fn take<T>(it: &mut std::vec::IntoIter<T>, what: &str) -> Result<T> {
    it.next().ok_or_else(|| Error::Format(format!("missing {what}")))
}

impl LayerStack {
    /// Header record followed by one record per layer.
    pub fn to_records(&self) -> Vec<Record> {
        let mode = match self.mode() {
            Mode::Train => "train",
            Mode::Eval => "eval",
        };
        let mut out = vec![Record::new(
            format!(
                "stack input={} layers={} mode={mode}",
                join_dims(self.input_shape()),
                self.layers().len()
            ),
            Vec::new(),
        )];
        for layer in self.layers() {
            let kind = layer.kind().name();
            let rec = match layer {
                Layer::Dense(Dense { weight, bias, spectral, scale }) => {
                    let mut tensors = vec![weight.clone(), bias.clone()];
                    if let Some(s) = spectral {
                        tensors.push(Tensor::from_vec(s.u.clone()));
                        tensors.push(Tensor::from_vec(s.v.clone()));
                    }
                    Record::new(
                        format!("layer kind={kind} spectral={} scale={scale:e}", spectral.is_some() as u8),
                        tensors,
                    )
                }
                Layer::Conv3x3(Conv3x3 { weight, bias, spectral })
                | Layer::Deconv2x(Deconv2x { weight, bias, spectral }) => {
                    let mut tensors = vec![weight.clone(), bias.clone()];
                    if let Some(s) = spectral {
                        tensors.push(Tensor::from_vec(s.u.clone()));
                        tensors.push(Tensor::from_vec(s.v.clone()));
                    }
                    Record::new(format!("layer kind={kind} spectral={}", spectral.is_some() as u8), tensors)
                }
                Layer::BatchNorm(bn) => Record::new(
                    format!("layer kind={kind} momentum={:e} eps={:e}", bn.momentum, bn.eps),
                    vec![
                        bn.gamma.clone(),
                        bn.beta.clone(),
                        Tensor::from_vec(bn.running_mean.clone()),
                        Tensor::from_vec(bn.running_var.clone()),
                    ],
                ),
                Layer::Dropout(d) => Record::new(format!("layer kind={kind} rate={:e}", d.rate), Vec::new()),
                Layer::Relu => Record::new(format!("layer kind={kind}"), Vec::new()),
            };
            out.push(rec);
        }
        out
    }

    /// Rebuilds a stack from records produced by [`LayerStack::to_records`],
    /// consuming them from the front of `records`.
    pub fn from_records(records: &mut std::collections::VecDeque<Record>) -> Result<Self> {
        let head = records.pop_front().ok_or_else(|| Error::Format("missing stack record".into()))?;
        if head.kind() != "stack" {
            return Err(Error::Format(format!("expected stack record, found `{}`", head.kind())));
        }
        let input = parse_dims(&head.field::<String>("input")?)?;
        let n: usize = head.field("layers")?;
        let mode = match head.field::<String>("mode")?.as_str() {
            "train" => Mode::Train,
            "eval" => Mode::Eval,
            other => return Err(Error::Format(format!("unknown mode `{other}`"))),
        };
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let rec = records.pop_front().ok_or_else(|| Error::Format("missing layer record".into()))?;
            if rec.kind() != "layer" {
                return Err(Error::Format(format!("expected layer record, found `{}`", rec.kind())));
            }
            let kind_name: String = rec.field("kind")?;
            let kind = LayerKind::from_name(&kind_name)
                .ok_or_else(|| Error::Format(format!("unknown layer kind `{kind_name}`")))?;
            let layer = match kind {
                LayerKind::Dense | LayerKind::Conv3x3 | LayerKind::Deconv2x => {
                    let spectral: u8 = rec.field("spectral")?;
                    let scale: f64 = if kind == LayerKind::Dense { rec.field("scale")? } else { 1.0 };
                    let mut it = rec.tensors.into_iter();
                    let weight = take(&mut it, "weight")?;
                    let bias = take(&mut it, "bias")?;
                    let spectral = if spectral == 1 {
                        Some(PowerIteration {
                            u: take(&mut it, "spectral u")?.into_data(),
                            v: take(&mut it, "spectral v")?.into_data(),
                        })
                    } else {
                        None
                    };
                    match kind {
                        LayerKind::Dense => Layer::Dense(Dense {
                            weight,
                            bias,
                            spectral,
                            scale,
                        }),
                        LayerKind::Conv3x3 => Layer::Conv3x3(Conv3x3 { weight, bias, spectral }),
                        _ => Layer::Deconv2x(Deconv2x { weight, bias, spectral }),
                    }
                }
                LayerKind::BatchNorm => {
                    let momentum = rec.field("momentum")?;
                    let eps = rec.field("eps")?;
                    let mut it = rec.tensors.into_iter();
                    Layer::BatchNorm(BatchNorm {
                        gamma: take(&mut it, "gamma")?,
                        beta: take(&mut it, "beta")?,
                        running_mean: take(&mut it, "running mean")?.into_data(),
                        running_var: take(&mut it, "running var")?.into_data(),
                        momentum,
                        eps,
                    })
                }
                LayerKind::Dropout => Layer::Dropout(Dropout { rate: rec.field("rate")? }),
                LayerKind::Relu => Layer::Relu,
            };
            layers.push(layer);
        }
        let mut stack = LayerStack::new(input, layers).map_err(|e| Error::Format(e.to_string()))?;
        stack.set_mode(mode);
        Ok(stack)
    }
}
