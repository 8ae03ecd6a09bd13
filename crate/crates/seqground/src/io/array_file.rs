//! Binary tensor file format.
//!
//! Layout (all integers little-endian, no padding, no checksum):
//!
//! ```text
//! magic   4 bytes  "SQGA"
//! version u8       1
//! dtype   u8       1 = f32, 2 = f64
//! rank    u8
//! dims    rank x u32
//! data    row-major scalars
//! ```
//!
//! Readers may widen f32 data into f64 arrays; narrowing is refused.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ShapeBuilder};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"SQGA";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

/// Serialize a rank-2 array to `path`.
pub fn write_array_file<S: Scalar>(path: &Path, array: &Array2<S>) -> Result<()> {
    let dims = [array.nrows(), array.ncols()];
    let mut bytes =
        Vec::with_capacity(4 + 3 + 4 * dims.len() + array.len() * S::BYTE_WIDTH);
    bytes.extend_from_slice(MAGIC);
    bytes.push(VERSION);
    bytes.push(S::DTYPE);
    bytes.push(dims.len() as u8);
    for &d in &dims {
        let d = u32::try_from(d).map_err(|_| {
            Error::Validation(format!("array dimension {d} exceeds u32 range"))
        })?;
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for v in array.iter() {
        v.write_le(&mut bytes);
    }
    super::write_atomic(path, &bytes)
}

/// Deserialize a rank-2 array from `path`.
///
/// Rank-1 files are accepted as single-row matrices. f32 payloads widen
/// losslessly into f64 arrays when `S = f64`.
pub fn read_array_file<S: Scalar>(path: &Path) -> Result<Array2<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: String| Error::format(path, reason);

    if bytes.len() < 7 {
        return Err(fail(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = bytes[4];
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let dtype = bytes[5];
    let rank = bytes[6] as usize;
    if rank == 0 || rank > 2 {
        return Err(fail(format!("unsupported rank {rank}")));
    }
    let header_len = 7 + 4 * rank;
    if bytes.len() < header_len {
        return Err(fail("truncated dimension header".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for k in 0..rank {
        let off = 7 + 4 * k;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(fail(format!("dimension {k} is zero")));
        }
        dims.push(d);
    }
    let (rows, cols) = match dims.as_slice() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!(),
    };
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| fail("dimension product overflows".into()))?;

    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => return Err(fail(format!("unknown dtype code {other}"))),
    };
    let expect = header_len + count * width;
    if bytes.len() != expect {
        return Err(fail(format!(
            "payload length mismatch: expected {expect} bytes, found {}",
            bytes.len()
        )));
    }
    if dtype != S::DTYPE && !(dtype == DTYPE_F32 && S::DTYPE == DTYPE_F64) {
        return Err(fail(format!(
            "dtype mismatch: file holds code {dtype}, reader wants code {} (only f32→f64 widening is supported)",
            S::DTYPE
        )));
    }

    let mut data = Vec::with_capacity(count);
    let payload = &bytes[header_len..];
    if dtype == DTYPE_F32 && S::DTYPE == DTYPE_F64 {
        for chunk in payload.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            data.push(S::from_real(v as f64));
        }
    } else {
        for chunk in payload.chunks_exact(width) {
            data.push(S::read_le(chunk));
        }
    }
    Array2::from_shape_vec((rows, cols).strides((cols, 1)), data)
        .map_err(|e| fail(format!("shape error: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_byte_exact_f32() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.sqga");
        let a = arr2(&[[1.0f32, -2.5, 3.25], [0.0, f32::MIN_POSITIVE, 7.0]]);
        write_array_file(&path, &a).unwrap();
        let bytes1 = fs::read(&path).unwrap();
        let b: Array2<f32> = read_array_file(&path).unwrap();
        assert_eq!(a, b);
        write_array_file(&path, &b).unwrap();
        let bytes2 = fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn round_trip_f64() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.sqga");
        let a = arr2(&[[1.0f64 / 3.0, -2.5e-300], [1.0e300, 0.0]]);
        write_array_file(&path, &a).unwrap();
        let b: Array2<f64> = read_array_file(&path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn header_bytes_are_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.sqga");
        let a = arr2(&[[1.0f32, 2.0]]);
        write_array_file(&path, &a).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"SQGA");
        assert_eq!(bytes[4], 1); // version
        assert_eq!(bytes[5], 1); // dtype f32
        assert_eq!(bytes[6], 2); // rank
        assert_eq!(&bytes[7..11], &1u32.to_le_bytes());
        assert_eq!(&bytes[11..15], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 15 + 8);
    }

    #[test]
    fn widening_f32_to_f64_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.sqga");
        let a = arr2(&[[0.1f32, -7.75, 1.0e-20]]);
        write_array_file(&path, &a).unwrap();
        let b: Array2<f64> = read_array_file(&path).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(*x as f64, *y);
        }
    }

    #[test]
    fn narrowing_f64_to_f32_is_refused() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.sqga");
        let a = arr2(&[[1.0f64, 2.0]]);
        write_array_file(&path, &a).unwrap();
        let err = read_array_file::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("dtype mismatch"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.sqga");
        let a = arr2(&[[1.0f32, 2.0], [3.0, 4.0]]);
        write_array_file(&path, &a).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        let err = read_array_file::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.sqga");
        fs::write(&path, b"NOPE\x01\x01\x01\x01\x00\x00\x00").unwrap();
        let err = read_array_file::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.sqga");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SQGA");
        bytes.push(1);
        bytes.push(1);
        bytes.push(2);
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = read_array_file::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("is zero"), "{err}");
    }

    #[test]
    fn rank_one_reads_as_single_row() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.sqga");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SQGA");
        bytes.push(1);
        bytes.push(1);
        bytes.push(1);
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, &bytes).unwrap();
        let a: Array2<f32> = read_array_file(&path).unwrap();
        assert_eq!(a, arr2(&[[1.0, 2.0, 3.0]]));
    }

    proptest::proptest! {
        #[test]
        fn round_trip_arbitrary(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-10.0f32..10.0));
            let dir = tempdir().unwrap();
            let path = dir.path().join("p.sqga");
            write_array_file(&path, &a).unwrap();
            let b: Array2<f32> = read_array_file(&path).unwrap();
            proptest::prop_assert_eq!(a, b);
        }
    }
}
