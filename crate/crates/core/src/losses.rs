//! Training objectives: masked cross-entropy, score entropy, their dual
//! combination, the grouped router balance penalty and next-token prediction.
//!
//! The score side works on the concrete score `q_t(x^{i<-y}) / q_t(x_t)`. A
//! posterior network that predicts `p(x0 | x_t)` induces that score through
//! the absorbing-state identity implemented in [`posterior_to_score`]; the
//! `PaperLiteral` mode keeps the looser Bayes reading around for ablations.

use serde::{Deserialize, Serialize};

use crate::diffusion::{survival_prob, NoiseSchedule, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{log_sum_exp, Tensor};

/// Per-position categorical prediction of the clean token, `d x N` rows over
/// non-mask tokens. Rows at unmasked positions are by convention the one-hot
/// of the observed token.
#[derive(Clone, Debug)]
pub struct PosteriorPrediction<F> {
    pub probs: Tensor<F>,
}

impl<F: Scalar> PosteriorPrediction<F> {
    pub fn new(probs: Tensor<F>) -> Self {
        PosteriorPrediction { probs }
    }

    /// One-hot rows at unmasked positions, given rows elsewhere.
    pub fn with_observed(probs: Tensor<F>, x_t: &TokenSequence, vocab: &Vocabulary) -> Result<Self> {
        let mut probs = probs;
        if probs.rows != x_t.len() || probs.cols != vocab.size() {
            return Err(Error::Shape(format!(
                "posterior {}x{} does not match sequence {} / vocab {}",
                probs.rows,
                probs.cols,
                x_t.len(),
                vocab.size()
            )));
        }
        for (i, &tok) in x_t.tokens().iter().enumerate() {
            if tok != vocab.mask_id() {
                let row = probs.row_mut(i);
                row.fill(F::zero());
                row[tok as usize] = F::one();
            }
        }
        Ok(PosteriorPrediction { probs })
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.probs.rows {
            let row = self.probs.row(i);
            if row.iter().any(|&p| p < F::zero()) {
                return Err(Error::Value(format!("negative probability in posterior row {i}")));
            }
            let sum: F = row.iter().copied().sum();
            if (sum - F::one()).abs() > F::c(1e-6) {
                return Err(Error::Value(format!("posterior row {i} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.probs.rows
    }
}

/// Concrete-score estimates, `d x N`; positive at masked positions.
#[derive(Clone, Debug)]
pub struct ScoreTable<F> {
    pub scores: Tensor<F>,
}

impl<F: Scalar> ScoreTable<F> {
    pub fn new(scores: Tensor<F>) -> Self {
        ScoreTable { scores }
    }
}

/// How to read the posterior -> score relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// True absorbing-state identity,
    /// `score = p(x0 | x_t) * exp(-sb) / (1 - exp(-sb))`.
    Exact,
    /// Literal Bayes substitution with `q_t(x_t | x0) = 1 - exp(-sb)`,
    /// i.e. `score = p(x0 | x_t) / (1 - exp(-sb))`.
    PaperLiteral,
}

impl Default for ScoreMode {
    fn default() -> Self {
        ScoreMode::Exact
    }
}

/// Normalizer `K(a) = a (ln a - 1)` making each score-entropy term
/// nonnegative; extended continuously with `K(0) = 0`.
pub fn k_fn<F: Scalar>(a: F) -> Result<F> {
    if a < F::zero() {
        return Err(Error::Domain(format!("k_fn needs a >= 0, got {a}")));
    }
    if a == F::zero() {
        return Ok(F::zero());
    }
    Ok(a * (a.ln() - F::one()))
}

/// Derive the concrete score from a posterior prediction at noise `sigma_bar`.
///
/// Rows at unmasked positions are passed through scaled like the rest; only
/// masked rows carry meaning downstream.
pub fn posterior_to_score<F: Scalar>(
    posterior: &PosteriorPrediction<F>,
    sigma_bar: F,
    mode: ScoreMode,
) -> Result<ScoreTable<F>> {
    if sigma_bar <= F::zero() {
        return Err(Error::Singular(format!(
            "score conversion undefined at sigma_bar = {sigma_bar}: no mass on mask"
        )));
    }
    let surv = survival_prob(sigma_bar)?;
    let mask_mass = F::one() - surv;
    let factor = match mode {
        ScoreMode::Exact => surv / mask_mass,
        ScoreMode::PaperLiteral => F::one() / mask_mass,
    };
    Ok(ScoreTable::new(posterior.probs.map(|p| p * factor)))
}

/// One candidate term of the score-entropy objective,
/// `s - r ln s + K(r)`; `r = 0` degenerates to plain `s`.
pub fn score_entropy_term<F: Scalar>(s: F, r: F) -> Result<F> {
    if r < F::zero() {
        return Err(Error::Domain(format!("target ratio must be >= 0, got {r}")));
    }
    if r == F::zero() {
        return Ok(s);
    }
    if s <= F::zero() {
        return Err(Error::Value(format!("score must be positive where the ratio is {r}, got {s}")));
    }
    Ok(s - r * s.ln() + k_fn(r)?)
}

/// Diffusion-weighted denoising score entropy for one corrupted sample.
///
/// Masked positions accumulate
/// `sigma_t * (sum_y score[i, y] - r ln score[i, a] + K(r))` with
/// `r = exp(-sb) / (1 - exp(-sb))` and `a` the clean token; unmasked
/// positions contribute nothing.
pub fn score_entropy_loss<F: Scalar>(
    score: &ScoreTable<F>,
    x0: &TokenSequence,
    x_t: &TokenSequence,
    sigma_bar: F,
    sigma_t: F,
    vocab: &Vocabulary,
) -> Result<F> {
    let n = vocab.size();
    if x0.len() != x_t.len() {
        return Err(Error::Shape(format!("x0 length {} vs x_t length {}", x0.len(), x_t.len())));
    }
    if score.scores.rows != x_t.len() || score.scores.cols != n {
        return Err(Error::Shape(format!(
            "score table {}x{} vs sequence {} / vocab {}",
            score.scores.rows,
            score.scores.cols,
            x_t.len(),
            n
        )));
    }
    let surv = survival_prob(sigma_bar)?;
    let ratio = surv / (F::one() - surv);
    let mut total = F::zero();
    for (i, (&clean, &noisy)) in x0.tokens().iter().zip(x_t.tokens()).enumerate() {
        if noisy != vocab.mask_id() {
            continue;
        }
        let a = clean as usize;
        let mut acc = F::zero();
        for y in 0..n {
            let s = score.scores.at(i, y);
            let r = if y == a { ratio } else { F::zero() };
            acc += score_entropy_term(s, r)?;
        }
        total += sigma_t * acc;
    }
    Ok(total)
}

/// Weighted masked cross-entropy `weight * sum_{i in mask} -ln p[i, x0_i]`.
pub fn masked_ce_loss<F: Scalar>(
    posterior: &PosteriorPrediction<F>,
    x0: &TokenSequence,
    mask_set: &[usize],
    weight: F,
) -> Result<F> {
    let mut total = F::zero();
    for &i in mask_set {
        if i >= x0.len() || i >= posterior.seq_len() {
            return Err(Error::Shape(format!("mask position {i} outside sequence")));
        }
        let p = posterior.probs.at(i, x0.tokens()[i] as usize);
        if p <= F::zero() {
            return Err(Error::Overflow {
                position: i,
                what: format!("posterior mass {p} on the clean token"),
            });
        }
        total -= p.ln();
    }
    Ok(weight * total)
}

/// The dual masked/score objective; returns `(total, masked, score)` so the
/// components can be logged separately.
pub fn d3diff_loss<F: Scalar>(
    posterior: &PosteriorPrediction<F>,
    x0: &TokenSequence,
    x_t: &TokenSequence,
    t: F,
    schedule: &NoiseSchedule,
    alpha: F,
    mode: ScoreMode,
    vocab: &Vocabulary,
) -> Result<(F, F, F)> {
    if alpha < F::zero() {
        return Err(Error::Domain(format!("alpha must be >= 0, got {alpha}")));
    }
    let mask_set = x_t.masked_positions(vocab);
    let masked = masked_ce_loss(posterior, x0, &mask_set, F::one())?;
    let score_term = if alpha == F::zero() {
        F::zero()
    } else {
        let sigma_bar = schedule.cumulative_noise(t)?;
        let sigma_t = schedule.rate(t)?;
        let score = posterior_to_score(posterior, sigma_bar, mode)?;
        score_entropy_loss(&score, x0, x_t, sigma_bar, sigma_t, vocab)?
    };
    Ok((masked + alpha * score_term, masked, score_term))
}

/// Which task group a token or sequence routes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    T2i,
    Mmu,
}

impl Group {
    pub fn label(&self) -> &'static str {
        match self {
            Group::T2i => "t2i",
            Group::Mmu => "mmu",
        }
    }
}

/// Routing statistics for one expert group (one layer's worth).
///
/// `f[i]` is the routed-slot fraction of expert `i` (sums to the top-K when
/// every token routes K distinct experts); `p[i]` the mean gate probability.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RouterStats<F> {
    pub group: Group,
    pub f: Vec<F>,
    pub p: Vec<F>,
    pub token_count: usize,
}

impl<F: Scalar> RouterStats<F> {
    pub fn load_product(&self) -> F {
        self.f.iter().zip(&self.p).map(|(&f, &p)| f * p).sum()
    }
}

/// Grouped balance penalty: per group, the mean over that group's layer
/// stats of `sum_i f_i p_i`, scaled by the group's lambda.
pub fn balance_loss<F: Scalar>(stats: &[RouterStats<F>], lambda_t2i: F, lambda_mmu: F) -> Result<F> {
    if lambda_t2i < F::zero() || lambda_mmu < F::zero() {
        return Err(Error::Domain("balance lambdas must be >= 0".into()));
    }
    let mut total = F::zero();
    for group in [Group::T2i, Group::Mmu] {
        let lambda = match group {
            Group::T2i => lambda_t2i,
            Group::Mmu => lambda_mmu,
        };
        let members: Vec<&RouterStats<F>> = stats.iter().filter(|s| s.group == group).collect();
        if members.is_empty() {
            continue;
        }
        let sum: F = members.iter().map(|s| s.load_product()).sum();
        total += lambda * sum / F::c(members.len() as f64);
    }
    Ok(total)
}

/// Mean next-token cross-entropy over the given logits rows.
pub fn ntp_loss<F: Scalar>(logits: &Tensor<F>, targets: &[u32]) -> Result<F> {
    if logits.rows != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} targets",
            logits.rows,
            targets.len()
        )));
    }
    if targets.iter().any(|&t| t as usize >= logits.cols) {
        return Err(Error::Shape("target index outside logit width".into()));
    }
    let mut total = F::zero();
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        total += log_sum_exp(row) - row[t as usize];
    }
    Ok(total / F::c(targets.len() as f64))
}

/// Overall objective `L_mmu + L_d3diff + beta * L_balance`.
pub fn total_loss<F: Scalar>(ntp: F, d3diff: F, balance: F, beta_balance: F) -> Result<F> {
    for (name, v) in [("ntp", ntp), ("d3diff", d3diff), ("balance", balance)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("total_loss component {name}")));
        }
    }
    Ok(ntp + d3diff + beta_balance * balance)
}
