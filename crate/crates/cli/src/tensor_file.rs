//! `GAWT` weight files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic  "GAWT"        4 bytes
//! version u16          currently 1
//! ndim    u16
//! dims    u64 × ndim
//! payload f32 × ∏dims  row-major
//! ```

use std::fs;
use std::path::Path;

use geoscale::tensor::Matrix;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"GAWT";
pub const VERSION: u16 = 1;

/// An n-dimensional `f32` array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> std::result::Result<Self, String> {
        let expected = element_count(&dims).ok_or("dimension product overflows")?;
        if expected != data.len() as u64 {
            return Err(format!(
                "payload has {} values but dims {:?} need {expected}",
                data.len(),
                dims
            ));
        }
        Ok(Self { dims, data })
    }

    /// Narrows a matrix to `f32`.
    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: m.data().iter().map(|&x| x as f32).collect(),
        }
    }

    /// Widens a 2-D tensor to an `f64` matrix.
    pub fn to_matrix(&self) -> std::result::Result<Matrix, String> {
        let [rows, cols] = self.dims[..] else {
            return Err(format!("expected a 2-D tensor, got {} dims", self.dims.len()));
        };
        let data = self.data.iter().map(|&x| f64::from(x)).collect();
        Matrix::new(rows as usize, cols as usize, data).map_err(|e| e.to_string())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u16).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic (expected GAWT)".into());
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let ndim = u16::from_le_bytes(r.array()?) as usize;
        let dims = (0..ndim)
            .map(|_| r.array().map(u64::from_le_bytes))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let count = element_count(&dims).ok_or("dimension product overflows")?;
        let payload = bytes.len() - r.pos;
        if count.checked_mul(4) != Some(payload as u64) {
            return Err(format!(
                "payload is {payload} bytes but dims {dims:?} need {}",
                count.saturating_mul(4)
            ));
        }
        let data = r.bytes[r.pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| CliError::Format {
            path: path.display().to_string(),
            msg,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }
}

/// Reads a 2-D tensor file straight into a matrix.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    TensorFile::read(path)?.to_matrix().map_err(|msg| CliError::Format {
        path: path.display().to_string(),
        msg,
    })
}

fn element_count(dims: &[u64]) -> Option<u64> {
    dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| format!("truncated header at byte {}", self.pos))?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("slice has length N"))
    }
}
