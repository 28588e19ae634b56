//! Float blob container shared by model weights and saved saliency maps.
//!
//! Layout: 8-byte magic `CAMFORGE`, little-endian `u32` version, then raw
//! little-endian `f32` values with no padding.

use std::io::Write;

pub const MAGIC: &[u8; 8] = b"CAMFORGE";
pub const BLOB_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BlobError {
    #[error("blob is {0} bytes, shorter than the {HEADER_LEN}-byte header")]
    TooShort(usize),
    #[error("bad magic header {0:?}")]
    BadMagic([u8; 8]),
    #[error("unsupported blob version {0}")]
    Version(u32),
    #[error("payload of {0} bytes is not a whole number of f32 values")]
    Ragged(usize),
}

pub fn encode(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write(mut w: impl Write, values: &[f32]) -> std::io::Result<()> {
    w.write_all(&encode(values))
}

pub fn decode(bytes: &[u8]) -> Result<Vec<f32>, BlobError> {
    if bytes.len() < HEADER_LEN {
        return Err(BlobError::TooShort(bytes.len()));
    }
    let magic: [u8; 8] = bytes[..8].try_into().expect("8-byte slice");
    if &magic != MAGIC {
        return Err(BlobError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4-byte slice"));
    if version != BLOB_VERSION {
        return Err(BlobError::Version(version));
    }
    let payload = &bytes[HEADER_LEN..];
    if !payload.len().is_multiple_of(4) {
        return Err(BlobError::Ragged(payload.len()));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[1.0, -2.5]);
        assert_eq!(&bytes[..8], b"CAMFORGE");
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 20);
    }

    #[test]
    fn corrupt_headers() {
        assert_eq!(decode(b"CAMF"), Err(BlobError::TooShort(4)));
        let mut bytes = encode(&[1.0]);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(BlobError::BadMagic(_))));
        let mut bytes = encode(&[1.0]);
        bytes[8] = 2;
        assert_eq!(decode(&bytes), Err(BlobError::Version(2)));
        let bytes = encode(&[1.0]);
        assert_eq!(decode(&bytes[..15]), Err(BlobError::Ragged(3)));
    }

    proptest! {
        #[test]
        fn roundtrip_bits(values in proptest::collection::vec(any::<f32>(), 0..64)) {
            let back = decode(&encode(&values)).unwrap();
            let a: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
