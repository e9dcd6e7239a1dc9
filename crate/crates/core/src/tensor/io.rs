//! The `HFGT` tensor file format.
//!
//! Layout: magic `HFGT`, version byte `0x01`, dtype byte (`0x01` float64,
//! `0x02` uint16), ndim byte, `ndim` little-endian u32 dims, then the
//! row-major little-endian payload.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"HFGT";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F64: u8 = 0x01;
pub const DTYPE_U16: u8 = 0x02;

#[derive(Debug, thiserror::Error)]
pub enum HfgtError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic bytes {0:02x?}, expected \"HFGT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported HFGT version {0:#04x}")]
    Version(u8),
    #[error("unknown HFGT dtype {0:#04x}")]
    DType(u8),
    #[error("truncated HFGT record: {0}")]
    Truncated(&'static str),
    #[error("HFGT payload has {got} values, dims {dims:?} need {want}")]
    Length { dims: Vec<usize>, want: usize, got: usize },
    #[error("expected {want} data, found {got}")]
    WrongDType { want: &'static str, got: &'static str },
}

#[derive(Clone, Debug, PartialEq)]
pub enum HfgtData {
    F64(Vec<f64>),
    U16(Vec<u16>),
}

impl HfgtData {
    fn len(&self) -> usize {
        match self {
            HfgtData::F64(v) => v.len(),
            HfgtData::U16(v) => v.len(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            HfgtData::F64(_) => "float64",
            HfgtData::U16(_) => "uint16",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HfgtTensor {
    pub dims: Vec<usize>,
    pub data: HfgtData,
}

impl HfgtTensor {
    pub fn f64(dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        HfgtTensor {
            dims: dims.to_vec(),
            data: HfgtData::F64(data),
        }
    }

    pub fn u16(dims: &[usize], data: Vec<u16>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        HfgtTensor {
            dims: dims.to_vec(),
            data: HfgtData::U16(data),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::f64(t.shape(), t.to_vec())
    }

    pub fn into_f64(self) -> Result<(Vec<usize>, Vec<f64>), HfgtError> {
        match self.data {
            HfgtData::F64(v) => Ok((self.dims, v)),
            other => Err(HfgtError::WrongDType {
                want: "float64",
                got: other.name(),
            }),
        }
    }

    pub fn into_u16(self) -> Result<(Vec<usize>, Vec<u16>), HfgtError> {
        match self.data {
            HfgtData::U16(v) => Ok((self.dims, v)),
            other => Err(HfgtError::WrongDType {
                want: "uint16",
                got: other.name(),
            }),
        }
    }

    pub fn encoded_len(&self) -> usize {
        let width = match self.data {
            HfgtData::F64(_) => 8,
            HfgtData::U16(_) => 2,
        };
        7 + 4 * self.dims.len() + width * self.data.len()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let dtype = match self.data {
            HfgtData::F64(_) => DTYPE_F64,
            HfgtData::U16(_) => DTYPE_U16,
        };
        let ndim = u8::try_from(self.dims.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "more than 255 dims"))?;
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION, dtype, ndim])?;
        for &d in &self.dims {
            let d = u32::try_from(d)
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "dimension exceeds u32"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.encoded_len());
        match &self.data {
            HfgtData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            HfgtData::U16(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Decodes one record from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize), HfgtError> {
        let header = bytes.get(..7).ok_or(HfgtError::Truncated("header"))?;
        let magic: [u8; 4] = header[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(HfgtError::BadMagic(magic));
        }
        if header[4] != VERSION {
            return Err(HfgtError::Version(header[4]));
        }
        let dtype = header[5];
        let ndim = header[6] as usize;
        let dim_bytes = bytes.get(7..7 + 4 * ndim).ok_or(HfgtError::Truncated("dims"))?;
        let dims: Vec<usize> = dim_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let n: usize = dims.iter().product();
        let start = 7 + 4 * ndim;
        let (data, width) = match dtype {
            DTYPE_F64 => {
                let raw = bytes.get(start..start + 8 * n).ok_or(HfgtError::Truncated("payload"))?;
                let v = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                (HfgtData::F64(v), 8)
            }
            DTYPE_U16 => {
                let raw = bytes.get(start..start + 2 * n).ok_or(HfgtError::Truncated("payload"))?;
                let v = raw
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
                    .collect();
                (HfgtData::U16(v), 2)
            }
            other => return Err(HfgtError::DType(other)),
        };
        if data.len() != n {
            return Err(HfgtError::Length {
                dims,
                want: n,
                got: data.len(),
            });
        }
        Ok((HfgtTensor { dims, data }, start + width * n))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, HfgtError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|source| HfgtError::Io {
            path: PathBuf::from("<reader>"),
            source,
        })?;
        Ok(Self::decode(&bytes)?.0)
    }

    pub fn save(&self, path: &Path) -> Result<(), HfgtError> {
        fs::write(path, self.to_bytes()).map_err(|source| HfgtError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, HfgtError> {
        let bytes = fs::read(path).map_err(|source| HfgtError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::decode(&bytes)?.0)
    }
}
