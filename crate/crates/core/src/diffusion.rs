//! Absorbing-state continuous-time Markov chain over token sequences.
//!
//! A vocabulary of `N` data tokens is extended with one absorbing MASK token
//! (index `N`). The forward generator sends every data token to MASK at unit
//! rate and never leaves MASK, so the time-`sigma_bar` kernel has the closed
//! form `exp(-sigma_bar)` on the diagonal and `1 - exp(-sigma_bar)` into the
//! mask column. [`kernel_matrix`] recomputes the same kernel with a generic
//! scaling-and-squaring matrix exponential and serves as the independent
//! oracle for the closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Alphabet of `size` data tokens plus the absorbing mask at index `size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Domain("vocabulary needs at least one data token".into()));
        }
        Ok(Vocabulary { size })
    }

    /// Number of non-mask tokens.
    pub fn size(&self) -> usize {
        self.size
    }

    /// The absorbing token sits at the last index.
    pub fn mask_id(&self) -> u32 {
        self.size as u32
    }

    /// Total alphabet including the mask.
    pub fn alphabet(&self) -> usize {
        self.size + 1
    }

    pub fn contains(&self, token: u32) -> bool {
        (token as usize) < self.alphabet()
    }
}

/// Fixed-length token sequence over a [`Vocabulary`], mask allowed.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, vocab: &Vocabulary) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Domain("sequence length must be at least 1".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| !vocab.contains(t)) {
            return Err(Error::Value(format!("token {t} outside alphabet of {}", vocab.alphabet())));
        }
        Ok(TokenSequence { tokens })
    }

    pub fn all_mask(len: usize, vocab: &Vocabulary) -> Self {
        TokenSequence { tokens: vec![vocab.mask_id(); len] }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut [u32] {
        &mut self.tokens
    }

    pub fn masked_positions(&self, vocab: &Vocabulary) -> Vec<usize> {
        let m = vocab.mask_id();
        self.tokens.iter().enumerate().filter(|(_, &t)| t == m).map(|(i, _)| i).collect()
    }

    pub fn has_mask(&self, vocab: &Vocabulary) -> bool {
        self.tokens.contains(&vocab.mask_id())
    }
}

/// Noise schedule on normalized time `t in [0, 1]`.
///
/// Only the log-linear family is provided: `sigma_bar(t)` interpolates
/// geometrically between `sigma_bar_min` at `t -> 0+` and `sigma_bar_max` at
/// `t = 1`, with the boundary convention `sigma_bar(0) = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_bar_min: f64,
    pub sigma_bar_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        // sigma_bar_max = 7 puts the mask probability at ~0.999 for t = 1.
        NoiseSchedule { sigma_bar_min: 1e-3, sigma_bar_max: 7.0 }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_bar_min: f64, sigma_bar_max: f64) -> Result<Self> {
        if !(sigma_bar_min > 0.0 && sigma_bar_max > sigma_bar_min) {
            return Err(Error::Domain(format!(
                "need 0 < sigma_bar_min < sigma_bar_max, got ({sigma_bar_min}, {sigma_bar_max})"
            )));
        }
        Ok(NoiseSchedule { sigma_bar_min, sigma_bar_max })
    }

    /// Cumulative noise `sigma_bar(t)`; zero at the `t = 0` boundary.
    pub fn cumulative_noise<F: Scalar>(&self, t: F) -> Result<F> {
        let tf = t.to_f64_lossy();
        if !(0.0..=1.0).contains(&tf) {
            return Err(Error::Domain(format!("time {tf} outside [0, 1]")));
        }
        if tf == 0.0 {
            return Ok(F::zero());
        }
        let log_min = self.sigma_bar_min.ln();
        let log_max = self.sigma_bar_max.ln();
        Ok(F::c((log_min + (log_max - log_min) * tf).exp()))
    }

    /// Instantaneous rate `sigma(t) = d sigma_bar / dt` for `t in (0, 1]`.
    pub fn rate<F: Scalar>(&self, t: F) -> Result<F> {
        let tf = t.to_f64_lossy();
        if !(tf > 0.0 && tf <= 1.0) {
            return Err(Error::Domain(format!("rate needs t in (0, 1], got {tf}")));
        }
        let ratio = (self.sigma_bar_max / self.sigma_bar_min).ln();
        Ok(F::c(self.cumulative_noise::<f64>(tf)? * ratio))
    }
}

/// The `(N+1) x (N+1)` absorbing generator: data rows carry `-1` on the
/// diagonal and `+1` into the mask column; the mask row is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorMatrix<F> {
    entries: Tensor<F>,
}

impl<F: Scalar> GeneratorMatrix<F> {
    pub fn absorbing(vocab: &Vocabulary) -> Self {
        let n = vocab.size();
        let mut q = Tensor::zeros(n + 1, n + 1);
        for i in 0..n {
            *q.at_mut(i, i) = -F::one();
            *q.at_mut(i, n) = F::one();
        }
        GeneratorMatrix { entries: q }
    }

    pub fn entries(&self) -> &Tensor<F> {
        &self.entries
    }

    /// Time-scaled generator `Q_t = sigma_t * Q`.
    pub fn scaled(&self, sigma_t: F) -> Tensor<F> {
        self.entries.map(|x| x * sigma_t)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.entries.rows;
        for i in 0..n {
            let sum: F = self.entries.row(i).iter().copied().sum();
            if sum.abs() > F::c(1e-12) {
                return Err(Error::Value(format!("generator row {i} sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// Probability that a token has not yet been absorbed after noise
/// `sigma_bar`, i.e. `exp(-sigma_bar)`.
pub fn survival_prob<F: Scalar>(sigma_bar: F) -> Result<F> {
    if sigma_bar < F::zero() {
        return Err(Error::Domain(format!("negative cumulative noise {sigma_bar}")));
    }
    Ok((-sigma_bar).exp())
}

/// `exp(sigma_bar * Q)` by scaling and squaring with a Taylor core.
///
/// This is the deliberate slow route kept independent of the closed form so
/// the two can cross-check each other.
pub fn kernel_matrix<F: Scalar>(sigma_bar: F, vocab: &Vocabulary) -> Result<Tensor<F>> {
    if sigma_bar < F::zero() {
        return Err(Error::Domain(format!("negative cumulative noise {sigma_bar}")));
    }
    let q = GeneratorMatrix::<F>::absorbing(vocab);
    let a = q.entries().map(|x| x * sigma_bar);
    Ok(expm(&a))
}

/// Closed-form absorbing kernel: `exp(-sigma_bar)` survive, rest to mask.
pub fn kernel_closed_form<F: Scalar>(sigma_bar: F, vocab: &Vocabulary) -> Result<Tensor<F>> {
    let surv = survival_prob(sigma_bar)?;
    let n = vocab.size();
    let mut k = Tensor::zeros(n + 1, n + 1);
    for i in 0..n {
        *k.at_mut(i, i) = surv;
        *k.at_mut(i, n) = F::one() - surv;
    }
    *k.at_mut(n, n) = F::one();
    Ok(k)
}

/// Matrix exponential of a square matrix by scaling-and-squaring.
pub fn expm<F: Scalar>(a: &Tensor<F>) -> Tensor<F> {
    assert_eq!(a.rows, a.cols, "expm needs a square matrix");
    let n = a.rows;

    // Infinity norm decides the number of halvings.
    let norm = (0..n)
        .map(|i| a.row(i).iter().fold(F::zero(), |s, &x| s + x.abs()))
        .fold(F::zero(), |m, x| m.max(x));
    let mut squarings = 0u32;
    let mut scale = F::one();
    while norm * scale > F::c(0.5) {
        scale = scale * F::c(0.5);
        squarings += 1;
    }
    let scaled = a.map(|x| x * scale);

    // Taylor series of the scaled matrix; 24 terms reach machine precision
    // for inputs with norm <= 1/2.
    let mut result = Tensor::zeros(n, n);
    for i in 0..n {
        *result.at_mut(i, i) = F::one();
    }
    let mut term = result.clone();
    for k in 1..=24 {
        term = term.matmul(&scaled);
        term.scale_assign(F::one() / F::c(k as f64));
        result.add_assign(&term);
    }
    for _ in 0..squarings {
        result = result.matmul(&result);
    }
    result
}

/// Forward corruption at time `t`: independently masks each position with
/// probability `1 - exp(-sigma_bar(t))` using one random stream per position.
pub fn forward_sample(
    seq: &TokenSequence,
    t: f64,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<(TokenSequence, Vec<usize>)> {
    if seq.has_mask(vocab) {
        return Err(Error::Precondition("input to forward_sample already contains mask tokens".into()));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!("forward_sample needs t in (0, 1], got {t}")));
    }
    let sigma_bar: f64 = schedule.cumulative_noise(t)?;
    let mask_prob = 1.0 - survival_prob(sigma_bar)?;
    let mut out = seq.clone();
    let mut masked = Vec::new();
    for (i, tok) in out.tokens_mut().iter_mut().enumerate() {
        let u: f64 = Stream::new(seed, i as u64).uniform();
        if u < mask_prob {
            *tok = vocab.mask_id();
            masked.push(i);
        }
    }
    Ok((out, masked))
}

/// Per-position reverse transition rates induced by a score table.
///
/// Masked positions get `rate(i, y) = sigma_t * score[i, y]` toward each
/// candidate `y` and the negative row sum on the diagonal; unmasked positions
/// carry zero rates.
pub fn reverse_rate_entries<F: Scalar>(
    score: &crate::losses::ScoreTable<F>,
    sigma_t: F,
    x_t: &TokenSequence,
    vocab: &Vocabulary,
) -> Result<Vec<ReverseRates<F>>> {
    let n = vocab.size();
    if score.scores.rows != x_t.len() || score.scores.cols != n {
        return Err(Error::Shape(format!(
            "score table {}x{} does not match sequence length {} and vocab {}",
            score.scores.rows,
            score.scores.cols,
            x_t.len(),
            n
        )));
    }
    let mut out = Vec::with_capacity(x_t.len());
    for (i, &tok) in x_t.tokens().iter().enumerate() {
        if tok != vocab.mask_id() {
            out.push(ReverseRates { rates: vec![F::zero(); n], diagonal: F::zero() });
            continue;
        }
        let mut rates = Vec::with_capacity(n);
        let mut total = F::zero();
        for y in 0..n {
            let s = score.scores.at(i, y);
            if s <= F::zero() {
                return Err(Error::Value(format!(
                    "non-positive score {s} at masked position {i}, candidate {y}"
                )));
            }
            let r = sigma_t * s;
            total += r;
            rates.push(r);
        }
        out.push(ReverseRates { rates, diagonal: -total });
    }
    Ok(out)
}

/// Reverse rates for one position: one entry per candidate token plus the
/// diagonal (negative row sum).
#[derive(Clone, Debug)]
pub struct ReverseRates<F> {
    pub rates: Vec<F>,
    pub diagonal: F,
}
