//! Binary tensor files.
//!
//! Layout: magic `TNSR`, version byte `1`, dtype byte (`1` = f32, `2` = f64),
//! rank byte, `rank` little-endian u64 dims, then the row-major little-endian
//! payload.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;

pub fn encode<S: Scalar>(tensor: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * tensor.rank() + tensor.len() * S::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(S::DTYPE.code());
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes a tensor, converting the stored element type to `S` if needed.
///
/// `origin` only labels errors.
pub fn decode<S: Scalar>(bytes: &[u8], origin: &Path) -> Result<Tensor<S>> {
    let bad = |field: &str, detail: String| Error::format(origin, field, detail);
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(bad("magic", "missing TNSR header".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad("version", format!("unsupported version {}", bytes[4])));
    }
    let dtype =
        DType::from_code(bytes[5]).ok_or_else(|| bad("dtype", format!("code {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    let header = 7 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("dims", "truncated dimension list".into()));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[7 + 8 * i..15 + 8 * i]);
            u64::from_le_bytes(b) as usize
        })
        .collect();
    let count: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != count * dtype.size() {
        return Err(bad(
            "payload",
            format!("expected {} bytes, found {}", count * dtype.size(), payload.len()),
        ));
    }
    let data: Vec<S> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| S::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| S::from_f64_lossy(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(shape, data)
}

pub fn write<S: Scalar>(path: impl AsRef<Path>, tensor: &Tensor<S>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new([2, 1], vec![1.0, -1.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], b"TNSR");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[7..15], &2u64.to_le_bytes());
        assert_eq!(&bytes[23..27], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 7 + 16 + 8);
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = Tensor::<f64>::zeros([3]);
        let bytes = encode(&t);
        let err = decode::<f64>(&bytes[..bytes.len() - 1], Path::new("x.tnsr")).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
        assert!(decode::<f64>(b"NOPE1234", Path::new("x")).is_err());
    }

    #[test]
    fn f32_file_widens_to_f64() {
        let t = Tensor::<f32>::new([2], vec![0.5, 3.25]).unwrap();
        let wide: Tensor<f64> = decode(&encode(&t), Path::new("-")).unwrap();
        assert_eq!(wide.data(), &[0.5, 3.25]);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(dims in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back: Tensor<f64> = decode(&encode(&t), Path::new("-")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
