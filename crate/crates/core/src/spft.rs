//! The SPFT tensor container.
//!
//! Layout: magic `b"SPFT"`, one dtype byte, one rank byte, `rank` little-endian
//! `u64` dimensions, then the row-major payload in the declared dtype
//! (little-endian).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autograd::Mat;
use crate::error::{validation, Error, Result};

pub const MAGIC: &[u8; 4] = b"SPFT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub dtype: DType,
    pub dims: Vec<usize>,
}

impl Header {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    fn encoded_len(&self) -> usize {
        6 + 8 * self.dims.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub header: Header,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn dims(&self) -> &[usize] {
        &self.header.dims
    }

    pub fn into_matrix(self) -> Result<Mat> {
        if self.header.dims.len() != 2 {
            return Err(validation(format!(
                "expected a rank-2 tensor, found rank {}",
                self.header.dims.len()
            )));
        }
        let (r, c) = (self.header.dims[0], self.header.dims[1]);
        Mat::from_shape_vec((r, c), self.data).map_err(|e| validation(e.to_string()))
    }
}

fn read_header_from(r: &mut impl Read) -> std::io::Result<std::result::Result<Header, String>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Ok(Err(format!("bad magic {magic:?}")));
    }
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    let Some(dtype) = DType::from_code(b[0]) else {
        return Ok(Err(format!("unknown dtype code {}", b[0])));
    };
    let rank = b[1] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        r.read_exact(&mut d)?;
        dims.push(u64::from_le_bytes(d) as usize);
    }
    Ok(Ok(Header { dtype, dims }))
}

/// Read only the header; the payload is left on disk.
pub fn read_header(path: &Path) -> Result<Header> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    read_header_from(&mut r)
        .map_err(|e| Error::io(path, e))?
        .map_err(|m| validation(format!("{}: {m}", path.display())))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Validation(m) => validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = bytes;
    let header = read_header_from(&mut cursor)
        .map_err(|_| validation("truncated header"))?
        .map_err(validation)?;
    let payload = &bytes[header.encoded_len()..];
    let n = header.numel();
    let need = n * header.dtype.size();
    if payload.len() != need {
        return Err(validation(format!(
            "payload is {} bytes, header {:?} requires {need}",
            payload.len(),
            header.dims
        )));
    }
    let data = match header.dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(Tensor { header, data })
}

pub fn encode(dims: &[usize], data: &[f64], dtype: DType) -> Result<Vec<u8>> {
    let n: usize = dims.iter().product();
    if n != data.len() {
        return Err(validation(format!(
            "dims {dims:?} hold {n} values but {} were supplied",
            data.len()
        )));
    }
    if dims.len() > u8::MAX as usize {
        return Err(validation("rank exceeds 255"));
    }
    let mut out = Vec::with_capacity(6 + 8 * dims.len() + n * dtype.size());
    out.extend_from_slice(MAGIC);
    out.push(dtype as u8);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => data
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        DType::F64 => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn write(path: &Path, dims: &[usize], data: &[f64], dtype: DType) -> Result<()> {
    let bytes = encode(dims, data, dtype)?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_matrix(path: &Path, m: &Mat, dtype: DType) -> Result<()> {
    let data: Vec<f64> = m.iter().copied().collect();
    write(path, &[m.nrows(), m.ncols()], &data, dtype)
}

pub fn read_matrix(path: &Path) -> Result<Mat> {
    read(path)?.into_matrix()
}
