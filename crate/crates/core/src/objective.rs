//! Graph-side construction of the training objectives. The math mirrors
//! [`crate::losses`]; the plain functions there serve as value oracles for
//! these differentiable versions.

use crate::diffusion::{survival_prob, Vocabulary};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{k_fn, RouterStats, ScoreMode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-item corruption facts the t2i loss needs.
pub struct CorruptedItem<'a> {
    pub clean: &'a [u32],
    pub noisy: &'a [u32],
    pub sigma_bar: f64,
    pub sigma_t: f64,
}

pub struct D3diffVars {
    pub total: Var,
    pub masked: Var,
    pub score: Var,
    /// Masked positions per batch, for logging.
    pub masked_positions: usize,
}

/// Dual loss over a batch: mean over items of
/// `masked_ce + alpha * score_entropy(posterior-induced score)`.
///
/// `posterior_log_probs` is the `(B*d) x N` log-softmax output of the
/// denoiser, rows grouped per item.
pub fn d3diff_graph<F: Scalar>(
    g: &mut Graph<F>,
    posterior_log_probs: Var,
    items: &[CorruptedItem<'_>],
    vocab: &Vocabulary,
    alpha: f64,
    mode: ScoreMode,
) -> Result<D3diffVars> {
    if alpha < 0.0 {
        return Err(Error::Domain(format!("alpha must be >= 0, got {alpha}")));
    }
    let d = items.first().map(|i| i.clean.len()).unwrap_or(0);
    let lp_shape = g.value(posterior_log_probs).shape();
    if lp_shape.0 != items.len() * d {
        return Err(Error::Shape(format!(
            "posterior rows {} do not match {} items of length {d}",
            lp_shape.0,
            items.len()
        )));
    }
    let mask = vocab.mask_id();

    // Coordinates of (masked row, clean token) plus per-row loss constants.
    let mut coords = Vec::new();
    let mut ce_w = Vec::new(); // weight on -log p: 1 + alpha * sigma_t * r
    let mut sum_w = Vec::new(); // weight on sum_y probs: alpha * sigma_t * factor
    let mut const_term = 0.0f64;
    let mut rows = Vec::new();
    for (b, item) in items.iter().enumerate() {
        let surv = survival_prob(item.sigma_bar)?;
        let r = surv / (1.0 - surv);
        let factor = match mode {
            ScoreMode::Exact => r,
            ScoreMode::PaperLiteral => 1.0 / (1.0 - surv),
        };
        for (i, (&c, &n)) in item.clean.iter().zip(item.noisy).enumerate() {
            if n != mask {
                continue;
            }
            let row = b * d + i;
            coords.push((row, c as usize));
            rows.push(row);
            // score term for this position:
            //   sigma_t * (factor * sum_y p_y - r * (lp + ln factor) + K(r))
            ce_w.push(F::c(1.0 + alpha * item.sigma_t * r));
            sum_w.push(F::c(alpha * item.sigma_t * factor));
            const_term += alpha * item.sigma_t * (-r * factor.ln() + k_fn(r)?);
        }
    }

    let b_norm = F::c(1.0 / items.len().max(1) as f64);
    if coords.is_empty() {
        let z = g.scalar(F::zero());
        return Ok(D3diffVars { total: z, masked: z, score: z, masked_positions: 0 });
    }

    // Masked cross-entropy (unit weight).
    let lp_picked = g.pick(posterior_log_probs, coords.clone());
    let ce_sum = g.sum_all(lp_picked);
    let masked_total = g.neg(ce_sum);
    let masked = g.scale(masked_total, b_norm);

    let (total, score) = if alpha == 0.0 {
        let z = g.scalar(F::zero());
        (masked, z)
    } else {
        // -(1 + a s r) log p summed with per-row weights.
        let wcol = g.constant(Tensor { rows: ce_w.len(), cols: 1, data: ce_w });
        let weighted = g.mul_col(lp_picked, wcol);
        let wsum = g.sum_all(weighted);
        let neg = g.neg(wsum);
        // a s factor * sum_y p_y per masked row.
        let probs = g.exp(posterior_log_probs);
        let row_sums = g.row_sum(probs);
        let masked_sums = g.gather_rows(row_sums, rows);
        let scol = g.constant(Tensor { rows: sum_w.len(), cols: 1, data: sum_w });
        let sweighted = g.mul_col(masked_sums, scol);
        let ssum = g.sum_all(sweighted);
        let partial = g.add(neg, ssum);
        let total_sum = g.add_const(partial, F::c(const_term));
        let total = g.scale(total_sum, b_norm);
        let diff = g.sub(total, masked);
        let score = g.scale(diff, F::c(1.0 / alpha));
        (total, score)
    };
    Ok(D3diffVars { total, masked, score, masked_positions: coords.len() })
}

/// Mean next-token cross-entropy over `(B*M) x V` logits.
pub fn ntp_graph<F: Scalar>(g: &mut Graph<F>, lm_logits: Var, targets: &[u32]) -> Result<Var> {
    let shape = g.value(lm_logits).shape();
    if shape.0 != targets.len() {
        return Err(Error::Shape(format!("{} logit rows vs {} targets", shape.0, targets.len())));
    }
    let lp = g.log_softmax_rows(lm_logits);
    let coords: Vec<(usize, usize)> = targets.iter().enumerate().map(|(i, &t)| (i, t as usize)).collect();
    let picked = g.pick(lp, coords);
    let s = g.sum_all(picked);
    let neg = g.neg(s);
    Ok(g.scale(neg, F::c(1.0 / targets.len().max(1) as f64)))
}

/// Balance penalty for one task's step: mean over layers of `f . P`, scaled
/// by that group's lambda. `f` is detached (counts); gradients flow through
/// the gate probabilities.
pub fn balance_graph<F: Scalar>(
    g: &mut Graph<F>,
    stats: &[RouterStats<F>],
    gate_prob_rows: &[Var],
    lambda: F,
) -> Result<Var> {
    if lambda < F::zero() {
        return Err(Error::Domain("balance lambda must be >= 0".into()));
    }
    if stats.len() != gate_prob_rows.len() {
        return Err(Error::Shape("stats and gate rows disagree on layer count".into()));
    }
    let mut acc = g.scalar(F::zero());
    for (s, &p_row) in stats.iter().zip(gate_prob_rows) {
        let f = g.constant(Tensor::row_vector(s.f.clone()));
        let prod = g.mul(f, p_row);
        let dot = g.sum_all(prod);
        acc = g.add(acc, dot);
    }
    let mean = g.scale(acc, F::one() / F::c(stats.len().max(1) as f64));
    Ok(g.scale(mean, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{NoiseSchedule, TokenSequence};
    use crate::losses::{self, Group, PosteriorPrediction};
    use crate::rng::Stream;

    #[test]
    fn d3diff_graph_matches_plain_loss() {
        let vocab = Vocabulary::new(4).unwrap();
        let sched = NoiseSchedule::default();
        let mut stream = Stream::new(3, 0);
        for mode in [ScoreMode::Exact, ScoreMode::PaperLiteral] {
            for trial in 0..10 {
                let d = 5;
                let clean: Vec<u32> = (0..d).map(|_| stream.below(4) as u32).collect();
                let t = 0.2 + 0.15 * trial as f64 / 2.0;
                let t = t.min(0.95);
                let (noisy, _) = crate::diffusion::forward_sample(
                    &TokenSequence::new(clean.clone(), &vocab).unwrap(),
                    t,
                    &sched,
                    &vocab,
                    trial,
                )
                .unwrap();
                let logits = Tensor::randn(d, 4, 1.0f64, &mut stream);
                let mut g = Graph::new();
                let lv = g.constant(logits.clone());
                let lp = g.log_softmax_rows(lv);
                let sigma_bar: f64 = sched.cumulative_noise(t).unwrap();
                let sigma_t: f64 = sched.rate(t).unwrap();
                let item = CorruptedItem {
                    clean: &clean,
                    noisy: noisy.tokens(),
                    sigma_bar,
                    sigma_t,
                };
                let alpha = 0.01;
                let vars = d3diff_graph(&mut g, lp, &[item], &vocab, alpha, mode).unwrap();

                // Plain-route oracle on the same probabilities.
                let mut probs = logits.clone();
                for r in 0..probs.rows {
                    crate::tensor::softmax_slice(probs.row_mut(r));
                }
                let posterior = PosteriorPrediction::new(probs);
                let x0 = TokenSequence::new(clean.clone(), &vocab).unwrap();
                let (want_total, want_masked, want_score) =
                    losses::d3diff_loss(&posterior, &x0, &noisy, t, &sched, alpha, mode, &vocab).unwrap();
                let got_total = g.value(vars.total).item();
                let got_masked = g.value(vars.masked).item();
                let got_score = g.value(vars.score).item();
                assert!((got_total - want_total).abs() < 1e-9, "{mode:?} total {got_total} vs {want_total}");
                assert!((got_masked - want_masked).abs() < 1e-9);
                if vars.masked_positions > 0 {
                    assert!(
                        (got_score - want_score).abs() < 1e-7,
                        "{mode:?} score {got_score} vs {want_score}"
                    );
                }
            }
        }
    }

    #[test]
    fn ntp_graph_matches_plain_loss() {
        let mut stream = Stream::new(5, 0);
        let logits = Tensor::randn(6, 8, 1.3f64, &mut stream);
        let targets: Vec<u32> = (0..6).map(|_| stream.below(8) as u32).collect();
        let mut g = Graph::new();
        let lv = g.constant(logits.clone());
        let nv = ntp_graph(&mut g, lv, &targets).unwrap();
        let want = losses::ntp_loss(&logits, &targets).unwrap();
        assert!((g.value(nv).item() - want).abs() < 1e-12);
    }

    #[test]
    fn balance_graph_matches_plain_loss() {
        let mut g = Graph::new();
        let stats = vec![
            RouterStats { group: Group::T2i, f: vec![0.5f64, 1.0, 0.5], p: vec![0.2, 0.5, 0.3], token_count: 4 },
            RouterStats { group: Group::T2i, f: vec![1.0f64, 0.5, 0.5], p: vec![0.6, 0.2, 0.2], token_count: 4 },
        ];
        let rows: Vec<Var> = stats
            .iter()
            .map(|s| g.constant(Tensor::row_vector(s.p.clone())))
            .collect();
        let v = balance_graph(&mut g, &stats, &rows, 1.0).unwrap();
        let want = losses::balance_loss(&stats, 1.0, 1.0).unwrap();
        assert!((g.value(v).item() - want).abs() < 1e-12);
    }
}
