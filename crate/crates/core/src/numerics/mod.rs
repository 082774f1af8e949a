//! Dense matrices, keyed Gaussian streams, and FNV-1a digests shared by
//! both execution paths and the verifier.

mod digest;
mod matrix;
mod stream;

pub use digest::{digest, digest_bytes, Digest, Hasher};
pub(crate) use matrix::{add_scaled_product_unchecked, canonical_dot, check_factors};
pub use matrix::{DenseMatrix, WriteCounter};
pub use stream::{sample_gaussian, sample_indices, LayerId, StreamKey, StreamRole};
