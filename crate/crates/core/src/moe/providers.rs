//! Deterministic synthetic feature providers standing in for external
//! image / identity encoders. Each provider maps an opaque sample handle to
//! a fixed-length feature vector.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scalar::Scalar;

/// Opaque handle to one raw training sample.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SampleHandle {
    pub prompt: Vec<u32>,
    pub target: Vec<u32>,
}

pub trait FeatureProvider<F>: Send + Sync {
    fn id(&self) -> &str;
    /// Feature vector length; fixed per provider.
    fn dim(&self) -> usize;
    fn features(&self, handle: &SampleHandle) -> Vec<F>;
}

/// Histogram of prompt tokens falling in `[token_lo, token_hi)`, normalized
/// by prompt length. Samples with identical attribute token multisets map to
/// identical vectors.
pub struct AttributeHistogramProvider {
    id: String,
    token_lo: u32,
    token_hi: u32,
}

impl AttributeHistogramProvider {
    pub fn new(id: impl Into<String>, token_lo: u32, token_hi: u32) -> Self {
        assert!(token_hi > token_lo);
        AttributeHistogramProvider { id: id.into(), token_lo, token_hi }
    }
}

impl<F: Scalar> FeatureProvider<F> for AttributeHistogramProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        (self.token_hi - self.token_lo) as usize
    }

    fn features(&self, handle: &SampleHandle) -> Vec<F> {
        let mut counts = vec![F::zero(); (self.token_hi - self.token_lo) as usize];
        for &t in &handle.prompt {
            if t >= self.token_lo && t < self.token_hi {
                counts[(t - self.token_lo) as usize] += F::one();
            }
        }
        let norm = F::c(handle.prompt.len().max(1) as f64);
        for c in counts.iter_mut() {
            *c /= norm;
        }
        counts
    }
}

/// Pseudo-random unit-scale projection seeded by a content hash of the
/// sample, so equal samples get equal vectors.
pub struct HashProjectionProvider {
    id: String,
    dim: usize,
    salt: u64,
}

impl HashProjectionProvider {
    pub fn new(id: impl Into<String>, dim: usize, salt: u64) -> Self {
        HashProjectionProvider { id: id.into(), dim, salt }
    }

    fn content_hash(&self, handle: &SampleHandle) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325 ^ self.salt;
        let mut eat = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x100000001b3);
        };
        eat(handle.prompt.len() as u64);
        for &t in &handle.prompt {
            eat(t as u64 + 1);
        }
        eat(0xffff);
        for &t in &handle.target {
            eat(t as u64 + 1);
        }
        h
    }
}

impl<F: Scalar> FeatureProvider<F> for HashProjectionProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, handle: &SampleHandle) -> Vec<F> {
        let mut stream = Stream::new(self.content_hash(handle), 0);
        (0..self.dim).map(|_| stream.normal::<F>()).collect()
    }
}

/// Named provider lookup used by feature experts.
pub struct ProviderRegistry<F> {
    providers: HashMap<String, Box<dyn FeatureProvider<F>>>,
}

impl<F: Scalar> Default for ProviderRegistry<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ProviderRegistry<F> {
    pub fn new() -> Self {
        ProviderRegistry { providers: HashMap::new() }
    }

    pub fn register(&mut self, provider: Box<dyn FeatureProvider<F>>) {
        self.providers.insert(provider.id().to_string(), provider);
    }

    pub fn get(&self, id: &str) -> Result<&dyn FeatureProvider<F>> {
        self.providers
            .get(id)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::Config(format!("unknown feature provider '{id}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_depends_only_on_attribute_multiset() {
        let p = AttributeHistogramProvider::new("hist", 4, 8);
        let a = SampleHandle { prompt: vec![4, 7, 5], target: vec![0, 1] };
        let b = SampleHandle { prompt: vec![7, 5, 4], target: vec![9, 9] };
        let fa: Vec<f64> = p.features(&a);
        let fb: Vec<f64> = p.features(&b);
        assert_eq!(fa, fb);
        assert!((fa.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hash_projection_deterministic_and_content_sensitive() {
        let p = HashProjectionProvider::new("hash", 16, 7);
        let a = SampleHandle { prompt: vec![1, 2], target: vec![3] };
        let fa: Vec<f64> = p.features(&a);
        assert_eq!(fa, <HashProjectionProvider as FeatureProvider<f64>>::features(&p, &a));
        let b = SampleHandle { prompt: vec![1, 2], target: vec![4] };
        let fb: Vec<f64> = p.features(&b);
        assert_ne!(fa, fb);
        assert_eq!(fa.len(), 16);
    }

    #[test]
    fn registry_rejects_unknown_id() {
        let reg: ProviderRegistry<f64> = ProviderRegistry::new();
        assert!(matches!(reg.get("nope"), Err(Error::Config(_))));
    }
}
