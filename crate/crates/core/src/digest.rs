//! Content hashes and seed derivation.
//!
//! Every digest is SHA-256 rendered as lowercase hex. Seeds for retraining
//! are derived from `(pipeline_seed, subgraph_id, request_digest)` so that an
//! independent rerun can reproduce them without access to the original run.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Identifier used for the global layer when deriving seeds.
pub const GLOBAL_LAYER_ID: u64 = u64::MAX;

/// Incremental SHA-256 over typed values.
#[derive(Default, Clone)]
pub struct Hasher(Sha256);

impl Hasher {
    pub fn new(domain: &str) -> Self {
        let mut h = Hasher(Sha256::new());
        h.str(domain);
        h
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.update(v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vals: &[f64]) -> &mut Self {
        self.0.update((vals.len() as u64).to_le_bytes());
        for v in vals {
            self.0.update(v.to_bits().to_le_bytes());
        }
        self
    }

    pub fn finish_bytes(self) -> [u8; 32] {
        self.0.finalize().into()
    }

    pub fn finish(self) -> String {
        hex::encode(self.finish_bytes())
    }
}

/// Digest of any serializable value via its canonical JSON encoding.
pub fn json_digest<T: Serialize>(domain: &str, value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("in-memory JSON serialization");
    let mut h = Hasher::new(domain);
    h.bytes(&bytes);
    h.finish()
}

/// Seed for a training job.
pub fn derive_seed(pipeline_seed: u64, subgraph_id: u64, request_digest: &str) -> u64 {
    let mut h = Hasher::new("callosum/seed");
    h.u64(pipeline_seed).u64(subgraph_id).str(request_digest);
    let out = h.finish_bytes();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_depend_on_every_input() {
        let base = derive_seed(1, 2, "abc");
        assert_eq!(base, derive_seed(1, 2, "abc"));
        assert_ne!(base, derive_seed(0, 2, "abc"));
        assert_ne!(base, derive_seed(1, 3, "abc"));
        assert_ne!(base, derive_seed(1, 2, "abd"));
    }

    #[test]
    fn length_prefix_separates_fields() {
        let mut a = Hasher::new("t");
        a.str("ab").str("c");
        let mut b = Hasher::new("t");
        b.str("a").str("bc");
        assert_ne!(a.finish(), b.finish());
    }
}
