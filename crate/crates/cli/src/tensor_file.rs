//! Single-tensor binary files.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "KVSL"
//! 4       4         version, u32 LE (= 1)
//! 8       1         dtype, u8 (0 = f32, 1 = f64)
//! 9       1         ndim, u8
//! 10      2         reserved, zero
//! 12      8 * ndim  dims, u64 LE each
//! ...               payload, row-major LE scalars, exactly prod(dims) of them
//! ```

use std::fs;
use std::path::Path;

use kvmerge::numerics::Matrix;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"KVSL";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic {0:?}, expected \"KVSL\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}, expected {VERSION}")]
    BadVersion(u32),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("reserved header bytes must be zero")]
    BadReserved,
    #[error("file is {found} bytes, expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("dims overflow the addressable size")]
    TooLarge,
    #[error("expected a {expected}-D tensor, found {found}-D")]
    Rank { expected: usize, found: usize },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self, TensorError> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(TensorError::BadDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    /// Widened copy; exact for both dtypes.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

fn element_count(dims: &[u64]) -> Result<usize, TensorError> {
    dims.iter().try_fold(1usize, |acc, &d| {
        usize::try_from(d)
            .ok()
            .and_then(|d| acc.checked_mul(d))
            .ok_or(TensorError::TooLarge)
    })
}

impl TensorFile {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self, TensorError> {
        if dims.len() > u8::MAX as usize {
            return Err(TensorError::TooLarge);
        }
        let n = element_count(&dims)?;
        if n != data.len() {
            return Err(TensorError::LengthMismatch { expected: n, found: data.len() });
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &Matrix<f64>, dtype: DType) -> Self {
        let dims = vec![m.rows() as u64, m.cols() as u64];
        let data = match dtype {
            DType::F64 => TensorData::F64(m.as_slice().to_vec()),
            DType::F32 => TensorData::F32(m.as_slice().iter().map(|&x| x as f32).collect()),
        };
        Self { dims, data }
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    /// The tensor as a matrix; needs `ndim == 2`.
    pub fn to_matrix(&self) -> Result<Matrix<f64>, TensorError> {
        if self.dims.len() != 2 {
            return Err(TensorError::Rank { expected: 2, found: self.dims.len() });
        }
        let (r, c) = (self.dims[0] as usize, self.dims[1] as usize);
        Matrix::new(r, c, self.data.to_f64()).map_err(|_| TensorError::LengthMismatch {
            expected: r * c,
            found: self.data.len(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dt = self.dtype();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.dims.len() + dt.size() * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(dt.code());
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&[0, 0]);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < HEADER_LEN {
            return Err(TensorError::LengthMismatch { expected: HEADER_LEN, found: bytes.len() });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(TensorError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
        if version != VERSION {
            return Err(TensorError::BadVersion(version));
        }
        let dtype = DType::from_code(bytes[8])?;
        let ndim = bytes[9] as usize;
        if bytes[10] != 0 || bytes[11] != 0 {
            return Err(TensorError::BadReserved);
        }
        let dims_end = HEADER_LEN + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(TensorError::LengthMismatch { expected: dims_end, found: bytes.len() });
        }
        let dims: Vec<u64> = bytes[HEADER_LEN..dims_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        let n = element_count(&dims)?;
        let expected = n
            .checked_mul(dtype.size())
            .and_then(|p| p.checked_add(dims_end))
            .ok_or(TensorError::TooLarge)?;
        if bytes.len() != expected {
            return Err(TensorError::LengthMismatch { expected, found: bytes.len() });
        }
        let payload = &bytes[dims_end..];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                    .collect(),
            ),
        };
        Ok(Self { dims, data })
    }

    pub fn read(path: &Path) -> Result<Self, TensorError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), TensorError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}
