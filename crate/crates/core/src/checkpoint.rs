//! Binary records for quantized tensors (`BQT1`) and model checkpoints
//! (`BNN1`). All integers and floats are little-endian.
//!
//! `BQT1`: magic, `m` (u8), three scheme bytes, group count (u32), per group
//! `qmin`, `qmax` (f64) and `start`, `end` (u64), then one code byte per
//! weight. Scheme bytes are granularity (0 global, 1 per group), range mode
//! (0 symmetric, 1 asymmetric) and representation in the low nibble (0 two's
//! complement, 1 unsigned) with rounding in the high nibble (0 truncate,
//! 1 round to nearest).
//!
//! `BNN1`: magic, layer count (u32), per layer `in`, `out` (u32), then the
//! parameters layer by layer, row-major weights then biases (f64), then a
//! flag byte and, if it is 1, a `BQT1` record of the same parameters.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fixedpoint::{Granularity, IntegerRepr, QuantParams, QuantScheme, QuantizedTensor, RangeMode, Rounding};
use crate::smallnet::{Architecture, Model};
use crate::trainer::TrainedModel;

pub const TENSOR_MAGIC: &[u8; 4] = b"BQT1";
pub const MODEL_MAGIC: &[u8; 4] = b"BNN1";

fn scheme_bytes(s: &QuantScheme) -> [u8; 3] {
    let g = match s.granularity() {
        Granularity::Global => 0,
        Granularity::PerGroup => 1,
    };
    let r = match s.range_mode() {
        RangeMode::Symmetric => 0,
        RangeMode::Asymmetric => 1,
    };
    let repr = match s.integer_repr() {
        IntegerRepr::SignedTwosComplement => 0,
        IntegerRepr::Unsigned => 1,
    };
    let round = match s.rounding() {
        Rounding::Truncate => 0,
        Rounding::RoundNearest => 1,
    };
    [g, r, repr | (round << 4)]
}

fn scheme_from(m: u8, b: [u8; 3]) -> Result<QuantScheme> {
    let bad = |what: &str, v: u8| Error::format("BQT1", format!("unknown {what} byte {v}"));
    let g = match b[0] {
        0 => Granularity::Global,
        1 => Granularity::PerGroup,
        v => return Err(bad("granularity", v)),
    };
    let r = match b[1] {
        0 => RangeMode::Symmetric,
        1 => RangeMode::Asymmetric,
        v => return Err(bad("range mode", v)),
    };
    let repr = match b[2] & 0x0f {
        0 => IntegerRepr::SignedTwosComplement,
        1 => IntegerRepr::Unsigned,
        v => return Err(bad("representation", v)),
    };
    let round = match b[2] >> 4 {
        0 => Rounding::Truncate,
        1 => Rounding::RoundNearest,
        v => return Err(bad("rounding", v)),
    };
    QuantScheme::new(m, g, r, repr, round)
}

/// Bounds-checked little-endian reader.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], format: &'static str) -> Self {
        Self { buf, pos: 0, format }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(self.format, format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::format(self.format, format!("bad magic {got:?}")));
        }
        Ok(())
    }

    fn usize64(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::format(self.format, format!("index {v} too large")))
    }
}

pub fn encode_tensor_into(q: &QuantizedTensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(q.scheme().precision());
    out.extend_from_slice(&scheme_bytes(q.scheme()));
    out.extend_from_slice(&(q.groups().len() as u32).to_le_bytes());
    for (r, p) in q.groups().iter().zip(q.params()) {
        out.extend_from_slice(&p.qmin.to_le_bytes());
        out.extend_from_slice(&p.qmax.to_le_bytes());
        out.extend_from_slice(&(r.start as u64).to_le_bytes());
        out.extend_from_slice(&(r.end as u64).to_le_bytes());
    }
    out.extend_from_slice(q.codes());
}

pub fn encode_tensor(q: &QuantizedTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 32 * q.groups().len() + q.len());
    encode_tensor_into(q, &mut out);
    out
}

fn decode_tensor_from(c: &mut Cursor<'_>) -> Result<QuantizedTensor> {
    c.magic(TENSOR_MAGIC)?;
    let m = c.u8()?;
    let sb = c.take(3)?;
    let scheme = scheme_from(m, [sb[0], sb[1], sb[2]])?;
    let ngroups = c.u32()? as usize;
    let mut params = Vec::new();
    let mut groups = Vec::new();
    for _ in 0..ngroups {
        let qmin = c.f64()?;
        let qmax = c.f64()?;
        let start = c.usize64()?;
        let end = c.usize64()?;
        params.push(QuantParams { qmin, qmax });
        groups.push(start..end);
    }
    let len = groups.last().map_or(0, |r| r.end);
    let codes = c.take(len)?.to_vec();
    QuantizedTensor::from_parts(codes, params, scheme, groups)
}

/// Decode a complete `BQT1` record; trailing bytes are an error.
pub fn decode_tensor(bytes: &[u8]) -> Result<QuantizedTensor> {
    let mut c = Cursor::new(bytes, "BQT1");
    let q = decode_tensor_from(&mut c)?;
    if c.pos != bytes.len() {
        return Err(Error::format("BQT1", format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(q)
}

pub fn encode_model(model: &Model, quantized: Option<&QuantizedTensor>) -> Vec<u8> {
    let arch = model.arch();
    let mut out = Vec::with_capacity(16 + 8 * model.params().len() + quantized.map_or(0, |q| q.len() + 64));
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(arch.num_layers() as u32).to_le_bytes());
    for l in 0..arch.num_layers() {
        let (i, o) = arch.layer_shape(l);
        out.extend_from_slice(&(i as u32).to_le_bytes());
        out.extend_from_slice(&(o as u32).to_le_bytes());
    }
    for v in model.params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match quantized {
        Some(q) => {
            out.push(1);
            encode_tensor_into(q, &mut out);
        }
        None => out.push(0),
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<TrainedModel> {
    let mut c = Cursor::new(bytes, "BNN1");
    c.magic(MODEL_MAGIC)?;
    let layers = c.u32()? as usize;
    if layers == 0 {
        return Err(Error::format("BNN1", "zero layers"));
    }
    let mut dims = Vec::with_capacity(layers + 1);
    for l in 0..layers {
        let i = c.u32()? as usize;
        let o = c.u32()? as usize;
        if l == 0 {
            dims.push(i);
        } else if dims[l] != i {
            return Err(Error::format(
                "BNN1",
                format!(
                    "layer {l} takes {i} inputs but the previous layer has {} outputs",
                    dims[l]
                ),
            ));
        }
        dims.push(o);
    }
    let arch = Architecture::new(dims)?;
    let n = arch.num_params();
    let raw = c.take(
        n.checked_mul(8)
            .ok_or_else(|| Error::format("BNN1", "parameter count overflow"))?,
    )?;
    let params: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let quantized = match c.u8()? {
        0 => None,
        1 => {
            let q = decode_tensor_from(&mut c)?;
            if q.groups() != arch.groups().as_slice() {
                return Err(Error::format("BNN1", "quantized groups do not match the layer layout"));
            }
            Some(q)
        }
        v => return Err(Error::format("BNN1", format!("unknown quantization flag {v}"))),
    };
    if c.pos != bytes.len() {
        return Err(Error::format("BNN1", format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(TrainedModel {
        model: Model::from_params(arch, params)?,
        quantized,
    })
}

pub fn save_model(path: impl AsRef<Path>, trained: &TrainedModel) -> Result<()> {
    fs::write(path, encode_model(&trained.model, trained.quantized.as_ref()))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::fit_and_quantize;

    fn schemes() -> Vec<QuantScheme> {
        let mut out = Vec::new();
        for g in [Granularity::Global, Granularity::PerGroup] {
            for (r, repr) in [
                (RangeMode::Symmetric, IntegerRepr::SignedTwosComplement),
                (RangeMode::Asymmetric, IntegerRepr::SignedTwosComplement),
                (RangeMode::Asymmetric, IntegerRepr::Unsigned),
            ] {
                for round in [Rounding::Truncate, Rounding::RoundNearest] {
                    out.push(QuantScheme::new(4, g, r, repr, round).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn tensor_round_trip() {
        let w: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        for s in schemes() {
            let q = fit_and_quantize(&w, &[0..20, 20..50], &s).unwrap();
            let bytes = encode_tensor(&q);
            assert_eq!(&bytes[..4], b"BQT1");
            assert_eq!(bytes.len(), 4 + 1 + 3 + 4 + 2 * 32 + 50);
            assert_eq!(decode_tensor(&bytes).unwrap(), q);
        }
    }

    #[test]
    fn model_round_trip() {
        let arch = Architecture::new(vec![5, 4, 3]).unwrap();
        let model = Model::init(arch, 9);
        let q = fit_and_quantize(model.params(), &model.groups(), &QuantScheme::rquant(8).unwrap()).unwrap();
        for quant in [None, Some(&q)] {
            let bytes = encode_model(&model, quant);
            let back = decode_model(&bytes).unwrap();
            assert_eq!(back.model, model);
            assert_eq!(back.quantized.as_ref(), quant);
        }
    }

    #[test]
    fn corrupt_records_rejected() {
        let arch = Architecture::new(vec![3, 2]).unwrap();
        let model = Model::init(arch, 1);
        let bytes = encode_model(&model, None);
        assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_model(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode_model(&bad).is_err());
    }
}
