use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FT01";
/// Maximum number of elements a tensor may declare (2^48).
pub const MAX_ELEMENTS: u64 = 1 << 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::U8),
            _ => Err(Error::UnknownDtype { code }),
        }
    }

    pub fn size(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
        }
    }
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::U8(_) => Dtype::U8,
        }
    }
}

/// Dense row-major tensor, outermost dimension first.
#[derive(Debug, Clone)]
pub struct FeatureTensor {
    dims: Vec<u64>,
    data: TensorData,
}

/// Bitwise equality: two f32 tensors are equal only if every element has the
/// same bit pattern (so NaN payloads and signed zeros are distinguished).
impl PartialEq for FeatureTensor {
    fn eq(&self, other: &Self) -> bool {
        if self.dims != other.dims {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            _ => false,
        }
    }
}

fn element_count(dims: &[u64]) -> Result<u64> {
    if dims.is_empty() {
        return Err(Error::ZeroNdim);
    }
    let mut product: u64 = 1;
    for &d in dims {
        product = match product.checked_mul(d) {
            Some(p) if p <= MAX_ELEMENTS => p,
            _ => {
                return Err(Error::DimsOverflow {
                    dims: dims.to_vec(),
                })
            }
        };
    }
    Ok(product)
}

impl FeatureTensor {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let expected = element_count(&dims)?;
        if expected != data.len() as u64 {
            return Err(Error::ShapeMismatch {
                dims,
                expected,
                found: data.len() as u64,
            });
        }
        Ok(Self { dims, data })
    }

    pub fn from_f32(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::new(
            dims.iter().map(|&d| d as u64).collect(),
            TensorData::F32(data),
        )
    }

    pub fn from_u8(dims: &[usize], data: Vec<u8>) -> Result<Self> {
        Self::new(
            dims.iter().map(|&d| d as u64).collect(),
            TensorData::U8(data),
        )
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    /// Dims as `usize`; on 64-bit hosts this never truncates because of the
    /// 2^48 element cap.
    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::WrongDtype {
                expected: "f32",
                found: other.dtype().name(),
            }),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::WrongDtype {
                expected: "f32",
                found: other.dtype().name(),
            }),
        }
    }

    pub fn encoded_len(&self) -> usize {
        4 + 4 + 8 * self.dims.len() + 1 + self.data.len() * self.dtype().size() as usize
    }

    /// Serializes to the FT01 layout: magic, u32 ndim, u64 dims, u8 dtype,
    /// raw payload. Little-endian, no padding.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(self.dtype().code());
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Parses an FT01 stream. Allocation is bounded by the bytes actually
    /// present, so a hostile header cannot force a huge allocation.
    pub fn decode<R: Read>(mut reader: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_field(&mut reader, &mut magic, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let mut word = [0u8; 4];
        read_field(&mut reader, &mut word, "ndim")?;
        let ndim = u32::from_le_bytes(word);
        if ndim == 0 {
            return Err(Error::ZeroNdim);
        }
        let mut dims = Vec::with_capacity(ndim.min(16) as usize);
        let mut product: u64 = 1;
        for _ in 0..ndim {
            let mut buf = [0u8; 8];
            read_field(&mut reader, &mut buf, "dims")?;
            let d = u64::from_le_bytes(buf);
            dims.push(d);
            product = match product.checked_mul(d) {
                Some(p) if p <= MAX_ELEMENTS => p,
                _ => return Err(Error::DimsOverflow { dims }),
            };
        }
        let mut code = [0u8; 1];
        read_field(&mut reader, &mut code, "dtype")?;
        let dtype = Dtype::from_code(code[0])?;

        let payload_len = product * dtype.size();
        let mut payload = Vec::with_capacity(payload_len.min(1 << 20) as usize);
        let got = (&mut reader)
            .take(payload_len)
            .read_to_end(&mut payload)
            .map_err(|e| Error::io("<stream>", e))? as u64;
        if got != payload_len {
            return Err(Error::Truncated {
                field: "payload",
                expected: payload_len,
                found: got,
            });
        }
        let mut rest = Vec::new();
        let trailing = reader
            .take(1 << 16)
            .read_to_end(&mut rest)
            .map_err(|e| Error::io("<stream>", e))?;
        if trailing > 0 {
            return Err(Error::TrailingBytes {
                count: trailing as u64,
            });
        }

        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            Dtype::U8 => TensorData::U8(payload),
        };
        Ok(Self { dims, data })
    }
}

fn read_field<R: Read>(reader: &mut R, buf: &mut [u8], field: &'static str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Truncated {
                    field,
                    expected: buf.len() as u64,
                    found: filled as u64,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io("<stream>", e)),
        }
    }
    Ok(())
}

pub fn write_tensor(t: &FeatureTensor, path: impl AsRef<Path>) -> Result<()> {
    super::write_atomic(path.as_ref(), &t.encode())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<FeatureTensor> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    FeatureTensor::decode(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}
