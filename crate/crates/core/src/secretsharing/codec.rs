//! Byte encodings of shares.
//!
//! A serialized share is a little-endian header
//! `group_id[16] | party_id: u16 | rank: u16 | dims: u32 * rank`
//! followed by the payload as little-endian 64-bit words in row-major order.
//! Openings on the wire carry only the words; both sides know the shape.

use super::{GroupId, ShareTensor, SharingError};
use crate::fixedpoint::RingTensor;

pub fn encode_words(words: &[u64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(words.len() * 8);
    for w in words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn decode_words(bytes: &[u8]) -> Result<Vec<u64>, SharingError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(SharingError::Malformed(format!(
            "{} bytes is not a whole number of words",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn encode_share(share: &ShareTensor) -> Result<Vec<u8>, SharingError> {
    let shape = share.shape();
    let party = u16::try_from(share.party_id)
        .map_err(|_| SharingError::Malformed("party id exceeds u16".into()))?;
    let rank =
        u16::try_from(shape.len()).map_err(|_| SharingError::Malformed("rank exceeds u16".into()))?;
    let mut out = Vec::with_capacity(20 + 4 * shape.len() + 8 * share.payload.len());
    out.extend_from_slice(&share.group_id.0);
    out.extend_from_slice(&party.to_le_bytes());
    out.extend_from_slice(&rank.to_le_bytes());
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| SharingError::Malformed("dim exceeds u32".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&encode_words(share.payload.data()));
    Ok(out)
}

/// Decodes one share from the front of `bytes`; returns it with the number of
/// bytes consumed.
pub fn decode_share(bytes: &[u8]) -> Result<(ShareTensor, usize), SharingError> {
    let short = || SharingError::Malformed("truncated share header".into());
    if bytes.len() < 20 {
        return Err(short());
    }
    let mut group = [0u8; 16];
    group.copy_from_slice(&bytes[..16]);
    let party_id = u16::from_le_bytes([bytes[16], bytes[17]]) as usize;
    let rank = u16::from_le_bytes([bytes[18], bytes[19]]) as usize;
    let mut pos = 20;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = bytes.get(pos..pos + 4).ok_or_else(short)?;
        shape.push(u32::from_le_bytes(raw.try_into().expect("4 bytes")) as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let body = bytes
        .get(pos..pos + 8 * n)
        .ok_or_else(|| SharingError::Malformed("truncated share payload".into()))?;
    let payload = RingTensor::new(shape, decode_words(body)?)
        .map_err(|e| SharingError::Malformed(e.to_string()))?;
    Ok((
        ShareTensor {
            party_id,
            group_id: GroupId(group),
            payload,
        },
        pos + 8 * n,
    ))
}
