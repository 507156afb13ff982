//! MAVT tensor blobs: `"MAVT"`, u16 version, u8 dtype, u8 rank, rank × u64 dims,
//! then the little-endian payload. All integers little-endian.

use std::io::{Read, Write};

use super::FormatError;
use crate::image::Image;

pub const BLOB_MAGIC: [u8; 4] = *b"MAVT";
pub const BLOB_VERSION: u16 = 1;
const HEADER_FIXED: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    U8 = 1,
    U32 = 2,
    I64 = 3,
    F32 = 4,
    F64 = 5,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U32 | DType::F32 => 4,
            DType::I64 | DType::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Result<Self, FormatError> {
        Ok(match code {
            1 => DType::U8,
            2 => DType::U32,
            3 => DType::I64,
            4 => DType::F32,
            5 => DType::F64,
            c => return Err(FormatError::UnknownDType(c)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    U8(Vec<u8>),
    U32(Vec<u32>),
    I64(Vec<i64>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl BlobData {
    pub fn dtype(&self) -> DType {
        match self {
            BlobData::U8(_) => DType::U8,
            BlobData::U32(_) => DType::U32,
            BlobData::I64(_) => DType::I64,
            BlobData::F32(_) => DType::F32,
            BlobData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            BlobData::U8(v) => v.len(),
            BlobData::U32(v) => v.len(),
            BlobData::I64(v) => v.len(),
            BlobData::F32(v) => v.len(),
            BlobData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense tensor with rank ≥ 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    dims: Vec<u64>,
    data: BlobData,
}

fn element_count(dims: &[u64]) -> Result<usize, FormatError> {
    dims.iter()
        .try_fold(1usize, |acc, &d| usize::try_from(d).ok().and_then(|d| acc.checked_mul(d)))
        .ok_or(FormatError::Overflow)
}

impl TensorBlob {
    pub fn new(dims: Vec<u64>, data: BlobData) -> Result<Self, FormatError> {
        if dims.is_empty() || dims.len() > u8::MAX as usize {
            return Err(FormatError::BadRank(dims.len()));
        }
        let n = element_count(&dims)?;
        if n != data.len() {
            return Err(FormatError::ElementCount { expected: n, got: data.len() });
        }
        Ok(Self { dims, data })
    }

    pub fn f64(dims: &[usize], data: Vec<f64>) -> Result<Self, FormatError> {
        Self::new(dims.iter().map(|&d| d as u64).collect(), BlobData::F64(data))
    }

    pub fn f32(dims: &[usize], data: Vec<f32>) -> Result<Self, FormatError> {
        Self::new(dims.iter().map(|&d| d as u64).collect(), BlobData::F32(data))
    }

    pub fn u32(dims: &[usize], data: Vec<u32>) -> Result<Self, FormatError> {
        Self::new(dims.iter().map(|&d| d as u64).collect(), BlobData::U32(data))
    }

    pub fn u8(dims: &[usize], data: Vec<u8>) -> Result<Self, FormatError> {
        Self::new(dims.iter().map(|&d| d as u64).collect(), BlobData::U8(data))
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn data(&self) -> &BlobData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn into_data(self) -> BlobData {
        self.data
    }

    /// Stores an image as `[height, width, channels]` f32.
    pub fn from_image_f32(img: &Image) -> Self {
        Self::f32(&[img.height, img.width, img.channels], img.data.iter().map(|&v| v as f32).collect()).expect("image shape is consistent")
    }

    pub fn from_image_f64(img: &Image) -> Self {
        Self::f64(&[img.height, img.width, img.channels], img.data.clone()).expect("image shape is consistent")
    }

    pub fn to_image(&self) -> Result<Image, FormatError> {
        let [h, w, c] = self.dims[..] else {
            return Err(FormatError::Invalid(format!("image blobs have rank 3, got dims {:?}", self.dims)));
        };
        let data = match &self.data {
            BlobData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            BlobData::F64(v) => v.clone(),
            BlobData::U8(v) => v.iter().map(|&x| x as f64 / 255.0).collect(),
            _ => return Err(FormatError::Invalid("image blobs must be float or u8".into())),
        };
        Ok(Image { height: h as usize, width: w as usize, channels: c as usize, data })
    }

    /// Checks the dims against an expected shape; `None` entries match anything.
    pub fn expect_dims(&self, name: &str, expected: &[Option<usize>]) -> Result<(), FormatError> {
        let ok = self.dims.len() == expected.len() && self.dims.iter().zip(expected).all(|(&d, e)| e.is_none_or(|e| d == e as u64));
        if !ok {
            return Err(FormatError::Invalid(format!("{name}: unexpected dims {:?}", self.dims)));
        }
        Ok(())
    }

    pub fn as_f64(&self, name: &str) -> Result<&[f64], FormatError> {
        match &self.data {
            BlobData::F64(v) => Ok(v),
            _ => Err(FormatError::Invalid(format!("{name}: expected f64, got {:?}", self.dtype()))),
        }
    }

    pub fn as_u32(&self, name: &str) -> Result<&[u32], FormatError> {
        match &self.data {
            BlobData::U32(v) => Ok(v),
            _ => Err(FormatError::Invalid(format!("{name}: expected u32, got {:?}", self.dtype()))),
        }
    }

    pub fn as_u8(&self, name: &str) -> Result<&[u8], FormatError> {
        match &self.data {
            BlobData::U8(v) => Ok(v),
            _ => Err(FormatError::Invalid(format!("{name}: expected u8, got {:?}", self.dtype()))),
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_FIXED + 8 * self.dims.len() + self.data.len() * self.dtype().size()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&BLOB_MAGIC);
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.push(self.dtype() as u8);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            BlobData::U8(v) => out.extend_from_slice(v),
            BlobData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), FormatError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Parses one blob from the front of `bytes` and returns it with the number
    /// of bytes consumed.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize), FormatError> {
        let take = |at: usize, n: usize| bytes.get(at..at.saturating_add(n)).ok_or(FormatError::Truncated { needed: at.saturating_add(n), got: bytes.len() });
        if take(0, 4)? != BLOB_MAGIC {
            return Err(FormatError::BadMagic { expected: "MAVT" });
        }
        let version = u16::from_le_bytes(take(4, 2)?.try_into().unwrap());
        if version != BLOB_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let dtype = DType::from_code(take(6, 1)?[0])?;
        let rank = take(7, 1)?[0] as usize;
        if rank == 0 {
            return Err(FormatError::BadRank(0));
        }
        let dims: Vec<u64> = (0..rank).map(|i| Ok(u64::from_le_bytes(take(HEADER_FIXED + 8 * i, 8)?.try_into().unwrap()))).collect::<Result<_, FormatError>>()?;
        let n = element_count(&dims)?;
        let start = HEADER_FIXED + 8 * rank;
        let len = n.checked_mul(dtype.size()).filter(|l| l.checked_add(start).is_some()).ok_or(FormatError::Overflow)?;
        let payload = take(start, len)?;
        let data = match dtype {
            DType::U8 => BlobData::U8(payload.to_vec()),
            DType::U32 => BlobData::U32(payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::I64 => BlobData::I64(payload.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F32 => BlobData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => BlobData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok((Self { dims, data }, start + len))
    }

    /// Parses a buffer holding exactly one blob.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let (blob, used) = Self::parse(bytes)?;
        if used != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - used));
        }
        Ok(blob)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, FormatError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
