//! Explicit sequence distributions for enumerable worlds: exact posteriors
//! given partially masked contexts, sampling, and total-variation distance.
//! Absorbing masking makes the clean-token posterior independent of the
//! noise level given the observed context, so the oracle never needs `t`.

use std::collections::HashMap;

use crate::diffusion::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::losses::PosteriorPrediction;
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ExplicitDist<F> {
    vocab: Vocabulary,
    len: usize,
    entries: Vec<(Vec<u32>, F)>,
}

impl<F: Scalar> ExplicitDist<F> {
    pub fn new(vocab: Vocabulary, entries: Vec<(Vec<u32>, F)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Domain("empty support".into()));
        }
        let len = entries[0].0.len();
        let mut total = F::zero();
        for (seq, p) in &entries {
            if seq.len() != len {
                return Err(Error::Shape("support sequences of unequal length".into()));
            }
            if seq.iter().any(|&t| t as usize >= vocab.size()) {
                return Err(Error::Value("support contains mask or out-of-range token".into()));
            }
            if *p < F::zero() {
                return Err(Error::Value("negative probability".into()));
            }
            total += *p;
        }
        if (total - F::one()).abs() > F::c(1e-9) {
            return Err(Error::Value(format!("support probabilities sum to {total}")));
        }
        Ok(ExplicitDist { vocab, len, entries })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn support(&self) -> &[(Vec<u32>, F)] {
        &self.entries
    }

    pub fn prob_of(&self, seq: &[u32]) -> F {
        self.entries
            .iter()
            .find(|(s, _)| s == seq)
            .map(|(_, p)| *p)
            .unwrap_or(F::zero())
    }

    /// Exact per-position posterior over clean tokens given the unmasked
    /// positions of `x_t`; one-hot rows at observed positions.
    pub fn posterior(&self, x_t: &TokenSequence) -> Result<PosteriorPrediction<F>> {
        if x_t.len() != self.len {
            return Err(Error::Shape(format!("context length {} vs support {}", x_t.len(), self.len)));
        }
        let mask = self.vocab.mask_id();
        let n = self.vocab.size();
        let mut probs = Tensor::zeros(self.len, n);
        let mut z = F::zero();
        for (seq, p) in &self.entries {
            let consistent = seq
                .iter()
                .zip(x_t.tokens())
                .all(|(&s, &o)| o == mask || s == o);
            if !consistent {
                continue;
            }
            z += *p;
            for (i, &s) in seq.iter().enumerate() {
                *probs.at_mut(i, s as usize) += *p;
            }
        }
        if z <= F::zero() {
            return Err(Error::Value("context inconsistent with the support".into()));
        }
        probs.scale_assign(F::one() / z);
        PosteriorPrediction::with_observed(probs, x_t, &self.vocab)
    }

    pub fn sample(&self, stream: &mut Stream) -> Vec<u32> {
        let weights: Vec<F> = self.entries.iter().map(|(_, p)| *p).collect();
        self.entries[stream.categorical(&weights)].0.clone()
    }

    pub fn entropy(&self) -> F {
        -self
            .entries
            .iter()
            .filter(|(_, p)| *p > F::zero())
            .map(|(_, p)| *p * p.ln())
            .sum::<F>()
    }

    /// Total variation distance between this distribution and an empirical
    /// sample of sequences.
    pub fn tv_distance(&self, samples: &[Vec<u32>]) -> F {
        let mut counts: HashMap<&[u32], usize> = HashMap::new();
        for s in samples {
            *counts.entry(s.as_slice()).or_default() += 1;
        }
        let n = F::c(samples.len() as f64);
        let mut tv = F::zero();
        for (seq, p) in &self.entries {
            let emp = F::c(counts.remove(seq.as_slice()).unwrap_or(0) as f64) / n;
            tv += (*p - emp).abs();
        }
        // Mass on sequences outside the support.
        for (_, c) in counts {
            tv += F::c(c as f64) / n;
        }
        tv / F::c(2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_seq() -> ExplicitDist<f64> {
        let vocab = Vocabulary::new(2).unwrap();
        // A = 0, B = 1; {AB: 0.7, BA: 0.3}.
        ExplicitDist::new(vocab, vec![(vec![0, 1], 0.7), (vec![1, 0], 0.3)]).unwrap()
    }

    #[test]
    fn posterior_from_all_mask_is_marginal() {
        let d = two_seq();
        let vocab = *d.vocab();
        let x_t = TokenSequence::all_mask(2, &vocab);
        let post = d.posterior(&x_t).unwrap();
        assert!((post.probs.at(0, 0) - 0.7).abs() < 1e-12);
        assert!((post.probs.at(1, 1) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn posterior_conditions_on_observed() {
        let d = two_seq();
        let vocab = *d.vocab();
        let x_t = TokenSequence::new(vec![0, vocab.mask_id()], &vocab).unwrap();
        let post = d.posterior(&x_t).unwrap();
        // Seeing A at position 0 forces B at position 1.
        assert!((post.probs.at(1, 1) - 1.0).abs() < 1e-12);
        assert!((post.probs.at(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tv_distance_of_exact_counts_is_zero() {
        let d = two_seq();
        let samples: Vec<Vec<u32>> = std::iter::repeat_n(vec![0u32, 1], 7)
            .chain(std::iter::repeat_n(vec![1u32, 0], 3))
            .collect();
        assert!(d.tv_distance(&samples) < 1e-12);
        // Off-support mass counts fully.
        let bad = vec![vec![0u32, 0]; 10];
        assert!((d.tv_distance(&bad) - 1.0).abs() < 1e-12);
    }
}
