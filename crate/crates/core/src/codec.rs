//! Binary encodings for checkpoints (`SERC`) and feature sequences (`SERF`).
//!
//! Both formats are little-endian with a 4-byte magic and a `u32` version.
//!
//! ```text
//! SERC: "SERC" u32 version=1 u32 count
//!       count x { u16 name_len, name (UTF-8), u8 rank, u32 dims[rank], f32 data[prod(dims)] }
//! SERF: "SERF" u32 version=1 u32 T u32 D f32 data[T*D]
//! ```
//! Checkpoint tensors are written in name order.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{data_err, Error, Result};
use crate::nn::ParameterSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SERC";
pub const FEATURE_MAGIC: &[u8; 4] = b"SERF";
pub const VERSION: u32 = 1;

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let avail = self.buf.len() - self.pos;
        if avail < n {
            return Err(format_err(
                self.pos,
                format!("expected {n} {what} bytes, found {avail}"),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != magic {
            return Err(format_err(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(m),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let at = self.pos;
        let version = self.u32("version")?;
        if version != VERSION {
            return Err(format_err(at, format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn floats(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| format_err(self.pos, "tensor size overflows"))?;
        let raw = self.take(bytes, "data")?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(format_err(
                self.pos,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_floats(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(set: &ParameterSet<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (name, t) in set.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| data_err!("tensor name '{}' longer than 65535 bytes", name))?;
        let rank = u8::try_from(t.rank()).map_err(|_| data_err!("tensor '{}' has rank > 255", name))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| data_err!("tensor '{}' axis too large", name))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        put_floats(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterSet<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(CHECKPOINT_MAGIC)?;
    let count = r.u32("tensor count")?;
    let mut set = ParameterSet::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.pos;
        let name = core::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| format_err(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let at = r.pos;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        if rank == 0 || shape.contains(&0) {
            return Err(format_err(at, format!("tensor '{name}' has empty shape {shape:?}")));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format_err(at, "tensor size overflows"))?;
        let data = r.floats(n)?;
        let tensor = Tensor::new(&shape, data)?;
        if set.insert(name.clone(), tensor).is_some() {
            return Err(format_err(at, format!("duplicate tensor '{name}'")));
        }
    }
    r.finish()?;
    Ok(set)
}

/// Encodes a `T x D` matrix.
pub fn encode_features(data: &Tensor<f32>) -> Result<Vec<u8>> {
    if data.rank() != 2 {
        return Err(data_err!("feature matrix must be T x D, got {:?}", data.shape()));
    }
    let mut out = Vec::with_capacity(16 + data.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(data.shape()[0] as u32).to_le_bytes());
    out.extend_from_slice(&(data.shape()[1] as u32).to_le_bytes());
    put_floats(&mut out, data.data());
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(FEATURE_MAGIC)?;
    let t = r.u32("frame count")? as usize;
    let d = r.u32("feature dimension")? as usize;
    if t == 0 {
        return Err(data_err!("feature file has T = 0 frames"));
    }
    if d == 0 {
        return Err(data_err!("feature file has D = 0"));
    }
    let n = t
        .checked_mul(d)
        .ok_or_else(|| format_err(12, "T x D overflows"))?;
    let data = r.floats(n)?;
    r.finish()?;
    Tensor::new(&[t, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn features_round_trip_and_errors() {
        let m = Tensor::new(&[3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let bytes = encode_features(&m).unwrap();
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(decode_features(&bytes).unwrap(), m);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        match decode_features(&bad).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            e => panic!("unexpected {e:?}"),
        }

        let truncated = &bytes[..bytes.len() - 8];
        let err = decode_features(truncated).unwrap_err();
        assert!(alloc::format!("{err}").contains("expected 24 data bytes, found 16"), "{err}");
        assert!(matches!(err, Error::Format { offset: 16, .. }));

        let mut empty = bytes[..16].to_vec();
        empty[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_features(&empty), Err(Error::Data(_))));

        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_features(&v2), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut set = ParameterSet::new();
        set.insert("b.bias".into(), Tensor::new(&[2], vec![1.5, -0.0]).unwrap());
        set.insert("a.weight".into(), Tensor::new(&[1, 2, 3], vec![f32::MIN_POSITIVE, 1e30, -3.0, 0.0, 7.0, 8.0]).unwrap());
        let bytes = encode_checkpoint(&set).unwrap();
        assert_eq!(&bytes[..4], b"SERC");
        // first tensor in name order
        assert_eq!(&bytes[14..22], b"a.weight");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_features(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn features_round_trip_bit_exact(t in 1usize..8, d in 1usize..6, seed in any::<u64>()) {
            let mut state = seed;
            let m = Tensor::from_fn(&[t, d], |_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits((state >> 33) as u32 & 0x7f7f_ffff)
            });
            let back = decode_features(&encode_features(&m).unwrap()).unwrap();
            let same = back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }

        #[test]
        fn checkpoint_round_trip_bit_exact(values in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..20)) {
            let mut set = ParameterSet::new();
            set.insert("x".into(), Tensor::new(&[values.len()], values.clone()).unwrap());
            set.insert("y.z".into(), Tensor::new(&[1, values.len()], values).unwrap());
            let back = decode_checkpoint(&encode_checkpoint(&set).unwrap()).unwrap();
            for (name, t) in set.iter() {
                let b = back.get(name).unwrap();
                prop_assert_eq!(b.shape(), t.shape());
                prop_assert!(b.data().iter().zip(t.data()).all(|(a, c)| a.to_bits() == c.to_bits()));
            }
        }
    }
}
