//! Binary parameter file: magic `DWCKPT1\0`, u32 tensor count, then per
//! tensor a u32 name length, UTF-8 name, u32 rank, u32 dims and float32
//! little-endian data.

use std::fs;
use std::path::Path;

use super::params::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DWCKPT1\0";

pub fn encode_params(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.total_numel() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Option<&'b [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<ParamSet> {
    let truncated = || Error::format(path, "truncated checkpoint");
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let count = r.u32().ok_or_else(truncated)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let nlen = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(nlen).ok_or_else(truncated)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().ok_or_else(truncated)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r
            .take(n.checked_mul(4).ok_or_else(truncated)?)
            .ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(params)
}

pub fn save_params(params: &ParamSet, path: &Path) -> Result<()> {
    fs::write(path, encode_params(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert(
            "enc.w",
            Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.25, 0.0, 3.0, -0.125]).unwrap(),
        )
        .unwrap();
        ps.insert("codebook", Tensor::new(vec![1], vec![7.0]).unwrap())
            .unwrap();
        ps
    }

    #[test]
    fn truncated_file_is_format_error() {
        let bytes = encode_params(&sample());
        let err = decode_params(&bytes[..bytes.len() - 3], Path::new("x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode_params(&sample());
        bytes[0] = b'X';
        assert!(matches!(
            decode_params(&bytes, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn order_and_names_survive() {
        let ps = decode_params(&encode_params(&sample()), Path::new("x")).unwrap();
        let names: Vec<_> = ps.iter().map(|(_, n, _)| n.to_string()).collect();
        assert_eq!(names, ["enc.w", "codebook"]);
    }

    proptest! {
        #[test]
        fn f32_values_round_trip_bit_exact(vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let mut ps = ParamSet::new();
            let data: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
            ps.insert("t", Tensor::new(vec![data.len()], data).unwrap()).unwrap();
            let bytes = encode_params(&ps);
            let back = decode_params(&bytes, Path::new("x")).unwrap();
            prop_assert_eq!(encode_params(&back), bytes);
            let restored: Vec<f32> = back.by_name("t").unwrap().data.iter().map(|&v| v as f32).collect();
            prop_assert_eq!(restored.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), vals.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
