use std::collections::BTreeSet;
use std::hash::Hasher;

use fnv::FnvHasher;

use super::tokenizer::content_terms;
use super::Embedder;
use crate::error::BackendError;

/// Feature-hashed binary bag-of-words vector, L2-normalized.
///
/// Each distinct lowercased word sets one signed coordinate. Empty text (or
/// text without words) maps to the zero vector.
pub fn hash_embed(text: &str, dimension: usize) -> Vec<f32> {
    assert!(dimension > 0, "embedding dimension must be positive");
    let mut v = vec![0f32; dimension];
    let terms: BTreeSet<String> = content_terms(text).collect();
    for term in &terms {
        let mut h = FnvHasher::default();
        h.write(term.as_bytes());
        let h = h.finish();
        let slot = (h % dimension as u64) as usize;
        let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
        v[slot] += sign;
    }
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x = (*x as f64 / norm) as f32;
        }
    }
    v
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Result<Self, crate::Error> {
        if dimension == 0 {
            return Err(crate::Error::invalid("embedding dimension must be positive"));
        }
        Ok(HashEmbedder { dimension })
    }
}

impl Embedder for HashEmbedder {
    fn name(&self) -> &str {
        "hash-bow"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, BackendError> {
        Ok(texts.iter().map(|t| hash_embed(t, self.dimension)).collect())
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_zero_vector() {
        let v = hash_embed("", 32);
        assert_eq!(v.len(), 32);
        assert!(v.iter().all(|x| *x == 0.0));
        assert!(hash_embed(" !? ", 8).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn deterministic_and_normalized() {
        let a = hash_embed("I walk my dog in the park", 64);
        let b = hash_embed("I walk my dog in the park", 64);
        assert_eq!(a, b);
        let norm: f64 = dot(&a, &a);
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn overlap_scores_higher() {
        let q = hash_embed("dog park morning", 256);
        let near = hash_embed("I walk my dog", 256);
        let far = hash_embed("quantum physics", 256);
        // one shared word out of 3 and 4: 1/sqrt(12)
        assert!((dot(&q, &near) - 1.0 / 12f64.sqrt()).abs() < 1e-6);
        assert!(dot(&q, &near) > dot(&q, &far));
    }

    fn collision_free(words: &[String], dim: usize) -> bool {
        let mut slots = BTreeSet::new();
        words.iter().all(|w| {
            let mut h = FnvHasher::default();
            h.write(w.as_bytes());
            slots.insert(h.finish() % dim as u64)
        })
    }

    proptest! {
        #[test]
        fn shared_token_never_decreases_similarity(
            a in proptest::collection::btree_set("[a-z]{3,8}", 1..6),
            b in proptest::collection::btree_set("[a-z]{3,8}", 1..6),
            shared in "[a-z]{9,10}",
        ) {
            let dim = 4096;
            let mut vocab: Vec<String> = a.union(&b).cloned().collect();
            vocab.push(shared.clone());
            prop_assume!(collision_free(&vocab, dim));
            let ta = a.iter().cloned().collect::<Vec<_>>().join(" ");
            let tb = b.iter().cloned().collect::<Vec<_>>().join(" ");
            let before = dot(&hash_embed(&ta, dim), &hash_embed(&tb, dim));
            let after = dot(
                &hash_embed(&format!("{ta} {shared}"), dim),
                &hash_embed(&format!("{tb} {shared}"), dim),
            );
            prop_assert!(after + 1e-6 >= before, "{before} -> {after}");
        }
    }
}
