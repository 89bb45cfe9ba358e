//! Binary tensor files.
//!
//! One container format is used for feature matrices, reduced features and
//! checkpoint tensors. Little-endian throughout:
//!
//! ```text
//! magic   4 bytes  "KSIT"
//! version u32      1
//! dtype   u32      0 = f32, 1 = f64
//! rows    u64
//! cols    u64
//! payload rows*cols values, row-major
//! ```
//!
//! Round-trips are bit-exact: values are written and read as raw IEEE bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{KsiError, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"KSIT";
pub const TENSOR_VERSION: u32 = 1;

const DTYPE_F32: u32 = 0;
const DTYPE_F64: u32 = 1;

#[derive(Debug, Clone)]
pub enum Tensor {
    F32(Array2<f32>),
    F64(Array2<f64>),
}

impl Tensor {
    pub fn rows(&self) -> usize {
        match self {
            Tensor::F32(a) => a.nrows(),
            Tensor::F64(a) => a.nrows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Tensor::F32(a) => a.ncols(),
            Tensor::F64(a) => a.ncols(),
        }
    }
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn write_header(w: &mut impl Write, dtype: u32, rows: u64, cols: u64) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&dtype.to_le_bytes())?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    Ok(())
}

pub fn write_tensor_f32(path: &Path, data: &Array2<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| KsiError::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| KsiError::io(path_str(path), e);
    write_header(&mut w, DTYPE_F32, data.nrows() as u64, data.ncols() as u64).map_err(io_err)?;
    for v in data.iter() {
        w.write_all(&v.to_bits().to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn write_tensor_f64(path: &Path, data: &Array2<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| KsiError::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| KsiError::io(path_str(path), e);
    write_header(&mut w, DTYPE_F64, data.nrows() as u64, data.ncols() as u64).map_err(io_err)?;
    for v in data.iter() {
        w.write_all(&v.to_bits().to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| KsiError::format(path_str(path), format!("truncated {what}")))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| KsiError::io(path_str(path), e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, path, "header")?;
    if &magic != TENSOR_MAGIC {
        return Err(KsiError::format(
            path_str(path),
            format!("magic mismatch: expected KSIT, found {:?}", magic),
        ));
    }
    let mut u32buf = [0u8; 4];
    read_exact_or(&mut r, &mut u32buf, path, "header")?;
    let version = u32::from_le_bytes(u32buf);
    if version != TENSOR_VERSION {
        return Err(KsiError::format(
            path_str(path),
            format!("unsupported version {version}"),
        ));
    }
    read_exact_or(&mut r, &mut u32buf, path, "header")?;
    let dtype = u32::from_le_bytes(u32buf);
    let mut u64buf = [0u8; 8];
    read_exact_or(&mut r, &mut u64buf, path, "header")?;
    let rows = u64::from_le_bytes(u64buf) as usize;
    read_exact_or(&mut r, &mut u64buf, path, "header")?;
    let cols = u64::from_le_bytes(u64buf) as usize;

    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| KsiError::format(path_str(path), "dimension overflow".to_string()))?;

    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => {
            return Err(KsiError::format(
                path_str(path),
                format!("unknown dtype code {other}"),
            ))
        }
    };

    let mut payload = vec![0u8; count * elem];
    read_exact_or(&mut r, &mut payload, path, "payload")?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| KsiError::io(path_str(path), e))? != 0 {
        return Err(KsiError::format(
            path_str(path),
            "trailing bytes after payload".to_string(),
        ));
    }

    match dtype {
        DTYPE_F32 => {
            let values: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            let arr = Array2::from_shape_vec((rows, cols), values)
                .map_err(|e| KsiError::format(path_str(path), e.to_string()))?;
            Ok(Tensor::F32(arr))
        }
        DTYPE_F64 => {
            let values: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| {
                    f64::from_bits(u64::from_le_bytes([
                        c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                    ]))
                })
                .collect();
            let arr = Array2::from_shape_vec((rows, cols), values)
                .map_err(|e| KsiError::format(path_str(path), e.to_string()))?;
            Ok(Tensor::F64(arr))
        }
        _ => unreachable!(),
    }
}

pub fn read_tensor_f32(path: &Path) -> Result<Array2<f32>> {
    match read_tensor(path)? {
        Tensor::F32(a) => Ok(a),
        Tensor::F64(_) => Err(KsiError::format(
            path_str(path),
            "expected f32 tensor, found f64".to_string(),
        )),
    }
}

pub fn read_tensor_f64(path: &Path) -> Result<Array2<f64>> {
    match read_tensor(path)? {
        Tensor::F64(a) => Ok(a),
        Tensor::F32(_) => Err(KsiError::format(
            path_str(path),
            "expected f64 tensor, found f32".to_string(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::tempdir;

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.kst");
        let a = array![[1.0f32, 0.0], [0.0, 1.0]];
        write_tensor_f32(&path, &a).unwrap();
        let b = read_tensor_f32(&path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn f64_round_trip_preserves_bits() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.kst");
        // Values chosen to exercise signs, subnormals and rounding tails.
        let a = array![
            [std::f64::consts::PI, -0.0],
            [f64::MIN_POSITIVE, 1.0 + f64::EPSILON]
        ];
        write_tensor_f64(&path, &a).unwrap();
        let b = read_tensor_f64(&path).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn magic_mismatch_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.kst");
        std::fs::write(&path, b"NOPE............................").unwrap();
        let err = read_tensor(&path).unwrap_err();
        assert!(err.to_string().contains("magic mismatch"), "{err}");
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.kst");
        let a = Array2::<f64>::zeros((4, 4));
        write_tensor_f64(&path, &a).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_tensor(&path).unwrap_err();
        assert!(err.to_string().contains("truncated payload"), "{err}");
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trail.kst");
        let a = Array2::<f32>::zeros((2, 2));
        write_tensor_f32(&path, &a).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_tensor(&path).is_err());
    }

    #[test]
    fn dtype_is_checked() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.kst");
        write_tensor_f32(&path, &Array2::<f32>::zeros((1, 1))).unwrap();
        assert!(read_tensor_f64(&path).is_err());
    }
}
