//! Token-level MoE: top-K routing over reduced-width feedforward experts,
//! one shared expert always on, with per-group routing statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{Group, RouterStats};
use crate::params::{Binding, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{softmax_slice, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMoeGroupConfig {
    pub n_shared: usize,
    pub n_routed: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
}

impl Default for TokenMoeGroupConfig {
    fn default() -> Self {
        // One shared plus eight routed experts under top-2 selection.
        TokenMoeGroupConfig { n_shared: 1, n_routed: 8, top_k: 2, expert_hidden: 32 }
    }
}

impl TokenMoeGroupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.n_routed {
            return Err(Error::Config(format!(
                "top_k {} must lie in 1..={}",
                self.top_k, self.n_routed
            )));
        }
        Ok(())
    }
}

/// Hard routing decision for a batch of tokens.
#[derive(Clone, Debug)]
pub struct Routing<F> {
    /// `tokens x top_k` selected expert indices.
    pub indices: Vec<Vec<usize>>,
    /// Renormalized selection weights, `tokens x top_k`.
    pub weights: Tensor<F>,
    pub stats: RouterStats<F>,
}

/// Softmax over all routed logits, select the top-K by probability (ties to
/// the lower expert index), renormalize the selected weights to sum one.
pub fn route_tokens<F: Scalar>(gate_logits: &Tensor<F>, top_k: usize, group: Group) -> Result<Routing<F>> {
    let n_routed = gate_logits.cols;
    if top_k == 0 || top_k > n_routed {
        return Err(Error::Precondition(format!("top_k {top_k} outside 1..={n_routed}")));
    }
    if !gate_logits.all_finite() {
        return Err(Error::Value("NaN or infinite gate logits".into()));
    }
    let tokens = gate_logits.rows;
    let mut indices = Vec::with_capacity(tokens);
    let mut weights = Tensor::zeros(tokens, top_k);
    let mut slot_counts = vec![0usize; n_routed];
    let mut prob_sums = vec![F::zero(); n_routed];

    for t in 0..tokens {
        let mut probs: Vec<F> = gate_logits.row(t).to_vec();
        softmax_slice(&mut probs);
        for (e, &p) in probs.iter().enumerate() {
            prob_sums[e] += p;
        }
        let mut order: Vec<usize> = (0..n_routed).collect();
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        let selected: Vec<usize> = order[..top_k].to_vec();
        let total: F = selected.iter().map(|&e| probs[e]).sum();
        for (k, &e) in selected.iter().enumerate() {
            *weights.at_mut(t, k) = probs[e] / total;
            slot_counts[e] += 1;
        }
        indices.push(selected);
    }

    let inv = F::one() / F::c(tokens.max(1) as f64);
    let stats = RouterStats {
        group,
        f: slot_counts.iter().map(|&c| F::c(c as f64) * inv).collect(),
        p: prob_sums.iter().map(|&s| s * inv).collect(),
        token_count: tokens,
    };
    Ok(Routing { indices, weights, stats })
}

/// Two-layer feedforward expert `D -> hidden -> D` with a smooth gated unit.
#[derive(Clone, Copy, Debug)]
pub struct ExpertFfn {
    up: Linear,
    down: Linear,
}

impl ExpertFfn {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, d_model: usize, hidden: usize, seed: u64) -> Self {
        ExpertFfn {
            up: Linear::init(store, &format!("{name}.up"), d_model, hidden, seed),
            down: Linear::init(store, &format!("{name}.down"), hidden, d_model, seed),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, bind: &Binding, x: Var) -> Var {
        let h = self.up.forward(g, bind, x);
        let h = g.silu(h);
        self.down.forward(g, bind, h)
    }
}

/// One task group's token-level MoE block.
pub struct TokenMoeLayer {
    pub group: Group,
    pub cfg: TokenMoeGroupConfig,
    router: Linear,
    shared: Vec<ExpertFfn>,
    routed: Vec<ExpertFfn>,
}

impl TokenMoeLayer {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        d_model: usize,
        group: Group,
        cfg: TokenMoeGroupConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let router = Linear::init(store, &format!("{name}.router"), d_model, cfg.n_routed, seed);
        let shared = (0..cfg.n_shared)
            .map(|i| ExpertFfn::init(store, &format!("{name}.shared{i}"), d_model, cfg.expert_hidden, seed))
            .collect();
        let routed = (0..cfg.n_routed)
            .map(|i| ExpertFfn::init(store, &format!("{name}.routed{i}"), d_model, cfg.expert_hidden, seed))
            .collect();
        Ok(TokenMoeLayer { group, cfg, router, shared, routed })
    }

    /// `hidden` is `tokens x D`; returns the mixed output, this layer's
    /// routing statistics, and the differentiable mean gate probabilities
    /// (`1 x n_routed`) the balance penalty trains through.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bind: &Binding,
        hidden: Var,
    ) -> Result<(Var, RouterStats<F>, Var)> {
        let tokens = g.value(hidden).rows;
        let logits = self.router.forward(g, bind, hidden);
        let routing = route_tokens(g.value(logits), self.cfg.top_k, self.group)?;

        // Differentiable weights: full softmax, gather the selected entries,
        // renormalize. Values coincide with `routing.weights`.
        let probs = g.softmax_rows(logits);
        let mut weight_cols = Vec::with_capacity(self.cfg.top_k);
        for k in 0..self.cfg.top_k {
            let coords: Vec<(usize, usize)> = (0..tokens).map(|t| (t, routing.indices[t][k])).collect();
            weight_cols.push(g.pick(probs, coords));
        }
        let sel = g.concat_cols(&weight_cols);
        let denom = g.row_sum(sel);
        let inv = g.recip(denom);
        let norm_weights = g.mul_col(sel, inv);

        let mut out = g.constant(Tensor::zeros(tokens, g.value(hidden).cols));
        for expert in &self.shared {
            let y = expert.forward(g, bind, hidden);
            out = g.add(out, y);
        }
        for (e, expert) in self.routed.iter().enumerate() {
            let rows: Vec<usize> = (0..tokens).filter(|&t| routing.indices[t].contains(&e)).collect();
            if rows.is_empty() {
                continue;
            }
            let coords: Vec<(usize, usize)> = rows
                .iter()
                .map(|&t| {
                    let k = routing.indices[t].iter().position(|&x| x == e).unwrap();
                    (t, k)
                })
                .collect();
            let w = g.pick(norm_weights, coords);
            let sub = g.gather_rows(hidden, rows.clone());
            let y = expert.forward(g, bind, sub);
            let weighted = g.mul_col(y, w);
            out = g.scatter_add_rows(out, weighted, rows);
        }
        let p_row = g.col_mean(probs);
        Ok((out, routing.stats, p_row))
    }
}
