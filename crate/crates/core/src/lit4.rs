//! LIT4 binary tensor container.
//!
//! Layout (all little-endian):
//!
//! | bytes | field                          |
//! |-------|--------------------------------|
//! | 4     | magic `b"LIT4"`                |
//! | 4     | version `u32` (= 1)            |
//! | 32    | dims `n, c, h, w` as four `u64`|
//! | 4     | dtype tag `u32` (1 f32, 2 f64) |
//! | ...   | `n·c·h·w` scalars              |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

pub const MAGIC: &[u8; 4] = b"LIT4";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 44;

pub fn encode<T: Scalar>(t: &Tensor4<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in t.shape().dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&T::DTYPE_TAG.to_le_bytes());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

/// Decodes a container; the stored dtype must match `T`.
pub fn decode<T: Scalar>(bytes: &[u8], origin: &Path) -> Result<Tensor4<T>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(origin, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(origin, "bad magic"));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::format(origin, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = usize::try_from(u64_at(bytes, 8 + 8 * i)).map_err(|_| Error::format(origin, "dimension overflow"))?;
    }
    let tag = u32_at(bytes, 40);
    if tag != T::DTYPE_TAG {
        return Err(Error::format(origin, format!("dtype tag {tag}, expected {}", T::DTYPE_TAG)));
    }
    let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
    let expected = shape
        .len()
        .checked_mul(T::BYTES)
        .ok_or_else(|| Error::format(origin, "payload size overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::format(origin, format!("payload is {} bytes, expected {expected}", payload.len())));
    }
    let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor4::from_vec(shape, data)
}

pub fn write<T: Scalar>(path: &Path, t: &Tensor4<T>) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Scalar>(path: &Path) -> Result<Tensor4<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor4::<f32>::from_vec(Shape4::new(1, 2, 1, 1), vec![1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"LIT4");
        assert_eq!(u32_at(&b, 4), 1);
        assert_eq!(u64_at(&b, 16), 2);
        assert_eq!(u32_at(&b, 40), 1);
        assert_eq!(b.len(), HEADER_LEN + 8);
        assert_eq!(&b[44..48], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_wrong_dtype_and_truncation() {
        let t = Tensor4::<f64>::zeros(Shape4::new(1, 1, 2, 2));
        let b = encode(&t);
        assert!(decode::<f32>(&b, Path::new("x")).is_err());
        assert!(decode::<f64>(&b[..b.len() - 1], Path::new("x")).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode::<f64>(&bad, Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(n in 0usize..3, c in 0usize..4, h in 0usize..5, w in 0usize..5, seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor4::<f32>::random_uniform(Shape4::new(n, c, h, w), -10.0, 10.0, &mut rng);
            let back: Tensor4<f32> = decode(&encode(&t), Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
