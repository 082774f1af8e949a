use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::DenseMatrix;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a digest. Rendered as 16 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub u64);

impl Digest {
    pub fn to_hex(self) -> String {
        format!("{:016x}", self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 16 {
            return None;
        }
        u64::from_str_radix(s, 16).ok().map(Digest)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom(format!("bad digest {s:?}")))
    }
}

/// Streaming FNV-1a hasher.
#[derive(Debug, Clone, Copy)]
pub struct Hasher {
    state: u64,
}

impl Default for Hasher {
    fn default() -> Self {
        Self { state: FNV_OFFSET }
    }
}

impl Hasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.state ^= b as u64;
            self.state = self.state.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn write_f64s(&mut self, values: &[f64]) {
        for v in values {
            self.write_bytes(&v.to_le_bytes());
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write_bytes(&v.to_le_bytes());
    }

    pub fn finish(&self) -> Digest {
        Digest(self.state)
    }
}

/// FNV-1a over the little-endian binary64 bytes of the entries, row-major.
pub fn digest(m: &DenseMatrix) -> Digest {
    let mut h = Hasher::new();
    h.write_f64s(m.data());
    h.finish()
}

pub fn digest_bytes(bytes: &[u8]) -> Digest {
    let mut h = Hasher::new();
    h.write_bytes(bytes);
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn empty_input_is_offset_basis() {
        assert_eq!(digest_bytes(&[]).0, 0xcbf29ce484222325);
        assert_eq!(digest(&DenseMatrix::zeros(0, 3)).0, 0xcbf29ce484222325);
    }

    #[test]
    fn known_fnv1a_vector() {
        // FNV-1a 64 of "a".
        assert_eq!(digest_bytes(b"a").0, 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn deterministic() {
        let m = DenseMatrix::from_rows(&[&[1.5, -2.0], &[0.25, 3.0]]);
        assert_eq!(digest(&m), digest(&m));
    }

    #[test]
    fn low_mantissa_bit_flip_changes_digest() {
        let m = DenseMatrix::from_rows(&[&[1.5, -2.0], &[0.25, 3.0]]);
        let mut flipped = m.clone();
        let bits = flipped.get(1, 0).to_bits() ^ 1;
        flipped.set(1, 0, f64::from_bits(bits));
        assert_ne!(m.data(), flipped.data());
        assert_ne!(digest(&m), digest(&flipped));
    }

    #[test]
    fn hex_round_trip() {
        let d = Digest(0x00ab_cdef_0123_4567);
        assert_eq!(d.to_hex(), "00abcdef01234567");
        assert_eq!(Digest::from_hex(&d.to_hex()), Some(d));
        assert_eq!(Digest::from_hex("xyz"), None);
    }

    #[test]
    fn no_collisions_over_ten_thousand_matrices() {
        let mut seen = HashSet::new();
        for step in 0..10_000u64 {
            let key = super::super::StreamKey::new(1, step, 0, super::super::StreamRole::DenseZ);
            let m = super::super::sample_gaussian(key, 3, 3).unwrap();
            assert!(seen.insert(digest(&m)), "collision at {step}");
        }
    }
}
