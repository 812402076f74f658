//! `UNW1` parameter checkpoints.
//!
//! Layout: magic `UNW1`, then one record per parameter until end of file:
//! `u32` name length, UTF-8 name bytes, `u32` rank, `rank` x `u32` dims,
//! `prod(dims)` x `f32` payload. All integers and floats are little-endian.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"UNW1";

pub fn encode<T: Scalar>(params: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing UNW1 magic".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let payload = r.take(count * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, params: &[(String, Tensor<T>)]) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            raw in proptest::collection::vec(proptest::collection::vec(any::<u32>(), 1..20), 1..5)
        ) {
            let params: Vec<(String, Tensor<f32>)> = raw
                .iter()
                .enumerate()
                .map(|(i, bits)| {
                    let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
                    (format!("layer{i}.w"), Tensor::new(vec![1, data.len()], data).unwrap())
                })
                .collect();
            let back: Vec<(String, Tensor<f32>)> = decode(&encode(&params)).unwrap();
            prop_assert_eq!(back.len(), params.len());
            for ((n1, t1), (n2, t2)) in params.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(decode::<f32>(b"UNW0"), Err(Error::Format(_))));
        let mut bytes = encode(&[("w".to_string(), Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap())]);
        bytes.pop();
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Format(_))));
    }
}
