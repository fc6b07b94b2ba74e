//! Deterministic text+numeric embedding standing in for a language-model backbone.
//!
//! Tokens (whitespace separated, `|` separators dropped) and numeric slots are
//! signed-hashed into `dim` buckets; the sum is L2-normalised. The hash is a
//! seeded FNV-1a with a splitmix finaliser, stable across platforms and releases.

#[derive(Clone, Debug, PartialEq)]
pub struct StubEmbedding {
    pub dim: usize,
    pub seed: u64,
    /// Weight of one token occurrence relative to a unit numeric slot.
    pub text_weight: f64,
}

impl Default for StubEmbedding {
    fn default() -> Self {
        StubEmbedding { dim: 256, seed: 0, text_weight: 0.05 }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) fn hash_bytes(seed: u64, tag: u8, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ mix(seed);
    for &b in std::iter::once(&tag).chain(bytes) {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    mix(h)
}

impl StubEmbedding {
    /// Bucket and sign of a token.
    pub fn token_slot(&self, token: &str) -> (usize, f64) {
        self.slot(hash_bytes(self.seed, b't', token.as_bytes()))
    }

    /// Bucket and sign of numeric feature `index`.
    pub fn numeric_slot(&self, index: usize) -> (usize, f64) {
        self.slot(hash_bytes(self.seed, b'n', &(index as u64).to_le_bytes()))
    }

    fn slot(&self, h: u64) -> (usize, f64) {
        let bucket = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }

    /// Hashed sum before normalisation.
    pub fn embed_raw(&self, text: &str, features: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for token in tokens(text) {
            let (b, s) = self.token_slot(token);
            acc[b] += s * self.text_weight;
        }
        for (i, &v) in features.iter().enumerate() {
            if v != 0.0 {
                let (b, s) = self.numeric_slot(i);
                acc[b] += s * v;
            }
        }
        acc
    }
}

pub fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().filter(|t| *t != "|")
}

/// Unit-norm embedding of a history text plus numeric slots. An input that
/// hashes to the zero vector is returned unnormalised.
pub fn stub_embed(text: &str, features: &[f64], spec: &StubEmbedding) -> Vec<f64> {
    let mut v = spec.embed_raw(text, features);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Term-frequency hashing of text only (no normalisation), used by the
/// text-feature baselines.
pub fn hashed_term_frequencies(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let spec = StubEmbedding { dim, seed, text_weight: 1.0 };
    spec.embed_raw(text, &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_zero() {
        let v = stub_embed("", &[0.0; 10], &StubEmbedding::default());
        assert_eq!(v.len(), 256);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let spec = StubEmbedding::default();
        let a = stub_embed("WINDOW 7d | heart_001 | mean=1.00", &[1.0, -2.0, 0.5], &spec);
        let b = stub_embed("WINDOW 7d | heart_001 | mean=1.00", &[1.0, -2.0, 0.5], &spec);
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        let other = stub_embed("WINDOW 7d | heart_001 | mean=1.00", &[1.0, -2.0, 0.5], &StubEmbedding { seed: 1, ..spec });
        assert_ne!(a, other);
    }

    #[test]
    fn one_token_change_touches_at_most_one_bucket_each() {
        let spec = StubEmbedding::default();
        let a = spec.embed_raw("alpha beta gamma", &[]);
        let b = spec.embed_raw("alpha beta delta", &[]);
        let differing: Vec<usize> = (0..spec.dim).filter(|&i| a[i] != b[i]).collect();
        let (gb, _) = spec.token_slot("gamma");
        let (db, _) = spec.token_slot("delta");
        assert!(differing.iter().all(|&i| i == gb || i == db));
        // appending one token moves exactly one bucket
        let c = spec.embed_raw("alpha beta gamma delta", &[]);
        assert_eq!((0..spec.dim).filter(|&i| a[i] != c[i]).count(), 1);
    }

    #[test]
    fn separators_are_not_tokens() {
        assert_eq!(tokens("a | b").collect::<Vec<_>>(), vec!["a", "b"]);
    }
}
