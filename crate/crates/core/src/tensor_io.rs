//! Binary tensor files.
//!
//! Layout: magic `HEAD`, format version `u32`, dtype code `u8`
//! (0 = 32-bit float), rank `u32`, `rank` dims as `u32`, then the row-major
//! payload. All integers and floats little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const MAGIC: &[u8; 4] = b"HEAD";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode_f32(dims: &[usize], values: &[f32]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), values.len());
    let mut out = Vec::with_capacity(13 + 4 * dims.len() + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a buffer into `(dims, values)`. `origin` only labels errors.
pub fn decode_f32(bytes: &[u8], origin: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bad = |reason: &str| Error::TensorFormat {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut cursor = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(bad("truncated"));
        }
        let (head, tail) = cursor.split_at(n);
        cursor = tail;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let dtype = take(1)?[0];
    if dtype != DTYPE_F32 {
        return Err(bad(&format!("unsupported dtype code {dtype}")));
    }
    let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
    }
    let count: usize = dims.iter().product();
    let payload = take(count * 4)?;
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !take(1).is_err() {
        return Err(bad("trailing bytes"));
    }
    Ok((dims, values))
}

pub fn write_grid(path: &Path, grid: &Grid) -> Result<()> {
    let values: Vec<f32> = grid.as_slice().iter().map(|&v| v as f32).collect();
    let bytes = encode_f32(&[grid.height(), grid.width()], &values);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, values) = decode_f32(&bytes, path)?;
    if dims.len() != 2 {
        return Err(Error::TensorFormat {
            path: path.to_path_buf(),
            reason: format!("expected rank 2, found rank {}", dims.len()),
        });
    }
    Ok(Grid::from_vec(
        dims[0],
        dims[1],
        values.into_iter().map(f64::from).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode_f32(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, -0.5]);
        assert_eq!(&bytes[..4], b"HEAD");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8], 0);
        assert_eq!(&bytes[9..13], &[2, 0, 0, 0]);
        assert_eq!(&bytes[13..17], &[2, 0, 0, 0]);
        assert_eq!(&bytes[17..21], &[3, 0, 0, 0]);
        assert_eq!(&bytes[21..25], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 21 + 24);
    }

    #[test]
    fn rejects_corruption() {
        let p = Path::new("mem");
        let good = encode_f32(&[1, 2], &[1.0, 2.0]);
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode_f32(&bad_magic, p).is_err());
        assert!(decode_f32(&good[..good.len() - 1], p).is_err());
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(decode_f32(&trailing, p).is_err());
        let mut dtype = good;
        dtype[8] = 3;
        assert!(decode_f32(&dtype, p).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/g.bin");
        let g = Grid::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.1).quantized();
        write_grid(&path, &g).unwrap();
        assert_eq!(read_grid(&path).unwrap(), g);
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(dims in proptest::collection::vec(0usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let values: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 97) & 0x7f7f_ffff)).collect();
            let bytes = encode_f32(&dims, &values);
            let (d, v) = decode_f32(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(d, dims);
            prop_assert_eq!(
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                values.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
