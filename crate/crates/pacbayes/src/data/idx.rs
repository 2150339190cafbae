//! IDX tensor format, as used by the MNIST distribution.
//!
//! Layout: a big-endian magic number (`0x00000803` for 3-d image tensors,
//! `0x00000801` for 1-d label vectors), one big-endian u32 per dimension,
//! then the payload as unsigned bytes in row-major order.

use crate::error::{Error, Result};

const MAGIC_IMAGES: u32 = 0x0000_0803;
const MAGIC_LABELS: u32 = 0x0000_0801;

/// A parsed unsigned-byte tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an IDX byte stream into a tensor.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(Error::Length(format!(
            "IDX header needs 4 bytes, got {}",
            bytes.len()
        )));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let ndims = match magic {
        MAGIC_IMAGES => 3,
        MAGIC_LABELS => 1,
        other => {
            return Err(Error::Format(format!(
                "bad IDX magic number {other:#010x} (expected {MAGIC_IMAGES:#010x} or {MAGIC_LABELS:#010x})"
            )))
        }
    };
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(Error::Length(format!(
            "IDX header declares {ndims} dimensions but only {} bytes present",
            bytes.len()
        )));
    }
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        let off = 4 + 4 * i;
        dims.push(
            u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
                as usize,
        );
    }
    let payload: usize = dims
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| {
            Error::Format(format!(
                "IDX dimensions {dims:?} overflow the address space"
            ))
        })?;
    let expected = header_len + payload;
    if bytes.len() < expected {
        return Err(Error::Length(format!(
            "IDX payload truncated: dims {dims:?} need {payload} bytes, found {}",
            bytes.len() - header_len
        )));
    }
    Ok(IdxTensor {
        dims,
        data: bytes[header_len..expected].to_vec(),
    })
}

/// Serializes a tensor back to IDX bytes; inverse of [`parse_idx`].
pub fn encode_idx(tensor: &IdxTensor) -> Result<Vec<u8>> {
    let magic = match tensor.dims.len() {
        3 => MAGIC_IMAGES,
        1 => MAGIC_LABELS,
        n => {
            return Err(Error::Format(format!(
                "IDX encoding supports 1 or 3 dims, got {n}"
            )))
        }
    };
    let payload: usize = tensor.dims.iter().product();
    if payload != tensor.data.len() {
        return Err(Error::Shape(format!(
            "dims {:?} imply {payload} bytes, data has {}",
            tensor.dims,
            tensor.data.len()
        )));
    }
    let mut out = Vec::with_capacity(4 + 4 * tensor.dims.len() + payload);
    out.extend_from_slice(&magic.to_be_bytes());
    for d in &tensor.dims {
        out.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    out.extend_from_slice(&tensor.data);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_image_header() {
        // Magic 0x00000803, dims (2, 28, 28), payload of 1568 bytes.
        let mut bytes = vec![0x00, 0x00, 0x08, 0x03];
        for d in [2u32, 28, 28] {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend(std::iter::repeat_n(7u8, 2 * 28 * 28));
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims, vec![2, 28, 28]);
        assert_eq!(t.data.len(), 1568);
    }

    #[test]
    fn parses_label_vector() {
        let mut bytes = vec![0x00, 0x00, 0x08, 0x01];
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&[5, 0, 9]);
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims, vec![3]);
        assert_eq!(t.data, vec![5, 0, 9]);
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = [0x00, 0x00, 0x08, 0x02, 0, 0, 0, 1, 42];
        match parse_idx(&bytes) {
            Err(crate::Error::Format(_)) => {}
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut bytes = vec![0x00, 0x00, 0x08, 0x01];
        bytes.extend_from_slice(&10u32.to_be_bytes());
        bytes.extend_from_slice(&[1, 2, 3]);
        match parse_idx(&bytes) {
            Err(crate::Error::Length(_)) => {}
            other => panic!("expected a length error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_ignored() {
        let mut bytes = vec![0x00, 0x00, 0x08, 0x01];
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[1, 2, 99]);
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.data, vec![1, 2]);
    }

    proptest! {
        #[test]
        fn encode_parse_roundtrip_labels(data in proptest::collection::vec(any::<u8>(), 0..200)) {
            let t = IdxTensor { dims: vec![data.len()], data };
            let bytes = encode_idx(&t).unwrap();
            prop_assert_eq!(parse_idx(&bytes).unwrap(), t);
        }

        #[test]
        fn encode_parse_roundtrip_images(n in 0usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let len = n * h * w;
            let data: Vec<u8> = (0..len).map(|i| ((i as u64).wrapping_mul(seed) >> 3) as u8).collect();
            let t = IdxTensor { dims: vec![n, h, w], data };
            let bytes = encode_idx(&t).unwrap();
            prop_assert_eq!(parse_idx(&bytes).unwrap(), t);
        }
    }
}
