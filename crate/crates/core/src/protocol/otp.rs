use thiserror::Error;

use crate::octets::Octets;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("operand lengths differ: {left} vs {right}")]
pub struct LengthMismatch {
    pub left: usize,
    pub right: usize,
}

/// One-time-pad combination of two equal-length byte strings.
///
/// The operation is its own inverse: `otp_xor(&otp_xor(k1, k2)?, k2)? == k1`.
pub fn otp_xor(a: &[u8], b: &[u8]) -> Result<Vec<u8>, LengthMismatch> {
    if a.len() != b.len() {
        return Err(LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x ^ y).collect())
}

pub fn otp_xor_octets(a: &Octets, b: &Octets) -> Result<Octets, LengthMismatch> {
    otp_xor(a.as_bytes(), b.as_bytes()).map(Octets::new)
}
