//! Bit-exact storage of raw frame stacks and preprocessed cubes.
//!
//! The on-disk container is deliberately minimal so that any language can
//! read it back: an 8-byte magic, a little-endian header describing dtype
//! and shape, and the raw little-endian payload. No compression, no image
//! codec, no timestamps — identical blobs produce byte-identical files.
//!
//! Layout:
//!
//! ```text
//! offset  size        field
//! 0       8           magic "MSPADTNS"
//! 8       4           format version (u32 LE, currently 1)
//! 12      1           dtype tag (0 = u8, 1 = u16, 2 = f32)
//! 13      1           rank
//! 14      4 * rank    dims (u32 LE each)
//! ...     n           payload, row-major, little-endian
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"MSPADTNS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected {MAGIC:?}, found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported container version {0} (supported: {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("truncated container: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("data length {len} does not match shape {shape:?} (product {product})")]
    LengthMismatch {
        len: usize,
        shape: Vec<usize>,
        product: usize,
    },
}

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    U8,
    U16,
    F32,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::U8 => 0,
            Dtype::U16 => 1,
            Dtype::F32 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, TensorIoError> {
        match tag {
            0 => Ok(Dtype::U8),
            1 => Ok(Dtype::U16),
            2 => Ok(Dtype::F32),
            t => Err(TensorIoError::UnknownDtype(t)),
        }
    }

    pub fn elem_size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
            Dtype::F32 => 4,
        }
    }
}

/// Row-major contiguous tensor values.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::U8(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::U8(_) => Dtype::U8,
            TensorData::U16(_) => Dtype::U16,
            TensorData::F32(_) => Dtype::F32,
        }
    }
}

/// A dtype-tagged, shaped, row-major tensor.
///
/// Shapes are ordered (frames, height, width) for raw stacks and
/// (channels, height, width) for cubes.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorBlob {
    /// Builds a blob, checking the shape/data-length invariant.
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, TensorIoError> {
        if shape.is_empty() {
            return Err(TensorIoError::InvalidShape {
                shape,
                reason: "rank 0".into(),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorIoError::InvalidShape {
                shape,
                reason: "zero-sized dimension".into(),
            });
        }
        let product: usize = shape.iter().product();
        if data.len() != product {
            return Err(TensorIoError::LengthMismatch {
                len: data.len(),
                shape,
                product,
            });
        }
        Ok(TensorBlob { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    /// Serializes to the container byte layout.
    pub fn encode(&self) -> Vec<u8> {
        let payload_len = self.data.len() * self.dtype().elem_size();
        let mut out = Vec::with_capacity(14 + 4 * self.shape.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.dtype().tag());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::U16(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses the container byte layout.
    pub fn decode(bytes: &[u8]) -> Result<Self, TensorIoError> {
        if bytes.len() < 14 {
            return Err(TensorIoError::Truncated {
                expected: 14,
                found: bytes.len(),
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(TensorIoError::BadMagic {
                found: bytes[..8].to_vec(),
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(TensorIoError::UnsupportedVersion(version));
        }
        let dtype = Dtype::from_tag(bytes[12])?;
        let rank = bytes[13] as usize;
        let header_len = 14 + 4 * rank;
        if bytes.len() < header_len {
            return Err(TensorIoError::Truncated {
                expected: header_len,
                found: bytes.len(),
            });
        }
        let shape: Vec<usize> = (0..rank)
            .map(|i| {
                let off = 14 + 4 * i;
                u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
            })
            .collect();
        let n: usize = shape.iter().product();
        let expected = header_len + n * dtype.elem_size();
        if bytes.len() != expected {
            return Err(TensorIoError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let payload = &bytes[header_len..];
        let data = match dtype {
            Dtype::U8 => TensorData::U8(payload.to_vec()),
            Dtype::U16 => TensorData::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            Dtype::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        };
        TensorBlob::new(shape, data)
    }
}

pub fn write_blob(path: &Path, blob: &TensorBlob) -> Result<(), TensorIoError> {
    fs::write(path, blob.encode()).map_err(|source| TensorIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_blob(path: &Path) -> Result<TensorBlob, TensorIoError> {
    let bytes = fs::read(path).map_err(|source| TensorIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    TensorBlob::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_value_round_trip() {
        let blob = TensorBlob::new(vec![1, 1, 1], TensorData::U16(vec![4095])).unwrap();
        let back = TensorBlob::decode(&blob.encode()).unwrap();
        assert_eq!(back, blob);
        assert_eq!(back.data(), &TensorData::U16(vec![4095]));
    }

    #[test]
    fn payload_size_matches_header_contract() {
        let n = 7 * 1026 * 1282;
        let blob = TensorBlob::new(vec![7, 1026, 1282], TensorData::U16(vec![0; n])).unwrap();
        let bytes = blob.encode();
        assert_eq!(bytes.len(), 14 + 4 * 3 + n * 2);
        let back = TensorBlob::decode(&bytes).unwrap();
        assert_eq!(back.shape(), &[7, 1026, 1282]);
        assert_eq!(back, blob);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let blob = TensorBlob::new(vec![2], TensorData::U8(vec![1, 2])).unwrap();
        let mut bytes = blob.encode();
        bytes[0] = b'X';
        assert!(matches!(
            TensorBlob::decode(&bytes),
            Err(TensorIoError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let blob = TensorBlob::new(vec![4], TensorData::F32(vec![0.5; 4])).unwrap();
        let bytes = blob.encode();
        assert!(matches!(
            TensorBlob::decode(&bytes[..bytes.len() - 1]),
            Err(TensorIoError::Truncated { .. })
        ));
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let blob = TensorBlob::new(vec![1], TensorData::U8(vec![9])).unwrap();
        let mut bytes = blob.encode();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            TensorBlob::decode(&bytes),
            Err(TensorIoError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn zero_dim_shape_is_rejected() {
        assert!(TensorBlob::new(vec![3, 0], TensorData::U8(vec![])).is_err());
        assert!(TensorBlob::new(vec![], TensorData::U8(vec![])).is_err());
        assert!(TensorBlob::new(vec![3], TensorData::U8(vec![1])).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tns");
        let blob = TensorBlob::new(vec![2, 3], TensorData::F32(vec![0., 1., 2., 3., 4., 5.]))
            .unwrap();
        write_blob(&path, &blob).unwrap();
        assert_eq!(read_blob(&path).unwrap(), blob);
    }

    fn arb_blob() -> impl Strategy<Value = TensorBlob> {
        let shape = proptest::collection::vec(1usize..6, 1..4);
        shape.prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            let data = prop_oneof![
                proptest::collection::vec(any::<u8>(), n).prop_map(TensorData::U8),
                proptest::collection::vec(any::<u16>(), n).prop_map(TensorData::U16),
                proptest::collection::vec(any::<f32>(), n).prop_map(TensorData::F32),
            ];
            data.prop_map(move |data| TensorBlob::new(shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn round_trip_identity(blob in arb_blob()) {
            let bytes = blob.encode();
            let back = TensorBlob::decode(&bytes).unwrap();
            // NaN payloads must survive bit-exactly, so compare encodings.
            prop_assert_eq!(back.encode(), bytes);
            prop_assert_eq!(back.shape(), blob.shape());
            prop_assert_eq!(back.dtype(), blob.dtype());
        }

        #[test]
        fn encoding_is_deterministic(blob in arb_blob()) {
            prop_assert_eq!(blob.encode(), blob.clone().encode());
        }
    }
}
