//! Sequence-level MoE: whole-sequence experts (copy, zero, noise, feature)
//! selected by a top-K gate over the mean-pooled feature.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{Group, RouterStats};
use crate::moe::providers::{ProviderRegistry, SampleHandle};
use crate::moe::resampler::{noise_embedding, Resampler, ResamplerConfig};
use crate::moe::token::route_tokens;
use crate::params::{Binding, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SequenceExpertKind {
    /// Skip operation; owns zero parameters.
    Copy,
    /// Discard operation; owns zero parameters.
    Zero,
    /// Blends the input with a resampled noise-level embedding.
    Noise,
    /// Blends the input with resampled provider features.
    Feature { provider: String },
}

/// Conditioning available to the sequence experts for one forward pass.
pub enum SeqCond<'a, F> {
    Noise { sigma_bar: F },
    Sample { handle: &'a SampleHandle },
}

/// Memoizes resampled noise embeddings within one graph, keyed by the
/// expert's latent parameter and the noise level bits. Samples in a batch
/// share the level, so the resampler runs once per step.
#[derive(Default)]
pub struct ResamplerCache {
    map: HashMap<(usize, u64), Var>,
}

impl ResamplerCache {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Gating machinery shared by noise and feature experts:
/// `out = w * x + (1 - w) * S(v)` with `w` the first component of a two-way
/// softmax over `W_gate . flatten(x)`.
struct GatedBlend {
    gate_w: usize,
    resampler: Resampler,
}

impl GatedBlend {
    fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, seq_len: usize, d_model: usize, rcfg: ResamplerConfig, seed: u64) -> Self {
        let flat = seq_len * d_model;
        let std = 1.0 / (flat as f64).sqrt();
        GatedBlend {
            gate_w: store.insert_randn(format!("{name}.gate_w"), flat, 2, std, seed),
            resampler: Resampler::init(store, &format!("{name}.resampler"), rcfg, seed),
        }
    }

    fn forward<F: Scalar>(&self, g: &mut Graph<F>, bind: &Binding, x: Var, resampled: Var) -> Var {
        let flat = g.flatten_row(x);
        let logits = g.matmul(flat, bind.var(self.gate_w));
        let p = g.softmax_rows(logits);
        let w = g.pick(p, vec![(0, 0)]);
        let one = g.scalar(F::one());
        let one_minus = g.sub(one, w);
        let keep = g.mul_scalar_var(x, w);
        let inject = g.mul_scalar_var(resampled, one_minus);
        g.add(keep, inject)
    }
}

pub struct SequenceExpert {
    pub kind: SequenceExpertKind,
    gated: Option<GatedBlend>,
}

impl SequenceExpert {
    fn resample<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bind: &Binding,
        cond: &SeqCond<'_, F>,
        registry: &ProviderRegistry<F>,
        cache: &mut ResamplerCache,
    ) -> Result<Var> {
        let gated = self.gated.as_ref().expect("parameterized expert");
        match (&self.kind, cond) {
            (SequenceExpertKind::Noise, SeqCond::Noise { sigma_bar }) => {
                let key = (gated.resampler_key(), sigma_bar.to_f64_lossy().to_bits());
                if let Some(&v) = cache.map.get(&key) {
                    return Ok(v);
                }
                let emb = noise_embedding::<F>(sigma_bar.to_f64_lossy(), gated.resampler.cfg.input_dim);
                let v = g.constant(emb);
                let out = gated.resampler.forward(g, bind, v);
                cache.map.insert(key, out);
                Ok(out)
            }
            (SequenceExpertKind::Feature { provider }, SeqCond::Sample { handle }) => {
                let feats = registry.get(provider)?.features(handle);
                if feats.len() != gated.resampler.cfg.input_dim {
                    return Err(Error::Shape(format!(
                        "provider '{provider}' returned {} features, expert expects {}",
                        feats.len(),
                        gated.resampler.cfg.input_dim
                    )));
                }
                let v = g.constant(Tensor::row_vector(feats));
                Ok(gated.resampler.forward(g, bind, v))
            }
            (SequenceExpertKind::Noise, _) => {
                Err(Error::Config("noise expert needs a noise-level conditioning".into()))
            }
            (SequenceExpertKind::Feature { .. }, _) => {
                Err(Error::Config("feature expert needs a raw sample handle".into()))
            }
            _ => unreachable!("copy/zero experts are not resampled"),
        }
    }

    /// Expert output on `x` (`L x D`).
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bind: &Binding,
        x: Var,
        cond: &SeqCond<'_, F>,
        registry: &ProviderRegistry<F>,
        cache: &mut ResamplerCache,
    ) -> Result<Option<Var>> {
        match self.kind {
            SequenceExpertKind::Copy => Ok(Some(x)),
            SequenceExpertKind::Zero => Ok(None),
            _ => {
                let resampled = self.resample(g, bind, cond, registry, cache)?;
                let gated = self.gated.as_ref().unwrap();
                Ok(Some(gated.forward(g, bind, x, resampled)))
            }
        }
    }
}

impl GatedBlend {
    fn resampler_key(&self) -> usize {
        self.gate_w
    }
}

pub struct SequenceMoeLayer {
    pub group: Group,
    pub top_k: usize,
    gate: Linear,
    pub experts: Vec<SequenceExpert>,
}

impl SequenceMoeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        d_model: usize,
        seq_len: usize,
        group: Group,
        roster: &[SequenceExpertKind],
        top_k: usize,
        resampler: ResamplerConfig,
        registry: &ProviderRegistry<F>,
        seed: u64,
    ) -> Result<Self> {
        if roster.is_empty() || top_k == 0 || top_k > roster.len() {
            return Err(Error::Config(format!(
                "sequence top_k {top_k} outside 1..={}",
                roster.len()
            )));
        }
        let gate = Linear::init(store, &format!("{name}.gate"), d_model, roster.len(), seed);
        let experts = roster
            .iter()
            .enumerate()
            .map(|(i, kind)| {
                let gated = match kind {
                    SequenceExpertKind::Copy | SequenceExpertKind::Zero => None,
                    SequenceExpertKind::Noise => Some(GatedBlend::init(
                        store,
                        &format!("{name}.e{i}"),
                        seq_len,
                        d_model,
                        ResamplerConfig { output_dim: d_model, latent_len: seq_len, ..resampler },
                        seed,
                    )),
                    SequenceExpertKind::Feature { provider } => {
                        let dim = registry.get(provider)?.dim();
                        Some(GatedBlend::init(
                            store,
                            &format!("{name}.e{i}"),
                            seq_len,
                            d_model,
                            ResamplerConfig {
                                input_dim: dim,
                                output_dim: d_model,
                                latent_len: seq_len,
                                ..resampler
                            },
                            seed,
                        ))
                    }
                };
                Ok(SequenceExpert { kind: kind.clone(), gated })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SequenceMoeLayer { group, top_k, gate, experts })
    }

    /// Route the whole `L x D` feature through the top-K experts.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        bind: &Binding,
        x: Var,
        cond: &SeqCond<'_, F>,
        registry: &ProviderRegistry<F>,
        cache: &mut ResamplerCache,
    ) -> Result<(Var, RouterStats<F>)> {
        let pooled = g.col_mean(x);
        let logits = self.gate.forward(g, bind, pooled);
        let routing = route_tokens(g.value(logits), self.top_k, self.group)?;

        let probs = g.softmax_rows(logits);
        let coords: Vec<(usize, usize)> = (0..self.top_k).map(|k| (0, routing.indices[0][k])).collect();
        let sel = g.pick(probs, coords);
        let denom = g.sum_all(sel);
        let inv = g.recip(denom);
        let weights = g.mul_scalar_var(sel, inv); // top_k x 1

        let (rows, cols) = g.value(x).shape();
        let mut out = g.constant(Tensor::zeros(rows, cols));
        for (k, &e) in routing.indices[0].iter().enumerate() {
            let y = self.experts[e].forward(g, bind, x, cond, registry, cache)?;
            if let Some(y) = y {
                let wk = g.pick(weights, vec![(k, 0)]);
                let term = g.mul_scalar_var(y, wk);
                out = g.add(out, term);
            }
        }
        Ok((out, routing.stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::providers::HashProjectionProvider;
    use crate::rng::Stream;

    fn rcfg() -> ResamplerConfig {
        ResamplerConfig { input_dim: 128, latent_len: 4, latent_dim: 8, output_dim: 6, layers: 2, heads: 2 }
    }

    fn registry() -> ProviderRegistry<f64> {
        let mut r = ProviderRegistry::new();
        r.register(Box::new(HashProjectionProvider::new("hash", 16, 3)));
        r
    }

    fn layer(roster: &[SequenceExpertKind], top_k: usize, seed: u64) -> (ParamStore<f64>, SequenceMoeLayer) {
        let mut store = ParamStore::new();
        let l = SequenceMoeLayer::init(&mut store, "seq", 6, 4, Group::T2i, roster, top_k, rcfg(), &registry(), seed).unwrap();
        (store, l)
    }

    fn rand_x(seed: u64) -> Tensor<f64> {
        let mut s = Stream::new(seed, 0);
        Tensor::randn(4, 6, 1.0, &mut s)
    }

    #[test]
    fn copy_roster_is_identity() {
        let (store, l) = layer(&[SequenceExpertKind::Copy, SequenceExpertKind::Copy], 2, 1);
        let mut g = Graph::inference();
        let bind = store.bind(&mut g);
        let x = g.constant(rand_x(2));
        let cond = SeqCond::Noise { sigma_bar: 1.0 };
        let mut cache = ResamplerCache::new();
        let (y, _) = l.forward(&mut g, &bind, x, &cond, &registry(), &mut cache).unwrap();
        let diff = g.value(y).zip_map(g.value(x), |a, b| (a - b).abs());
        assert!(diff.max_abs() < 1e-12);
    }

    #[test]
    fn zero_roster_is_zero() {
        let (store, l) = layer(&[SequenceExpertKind::Zero, SequenceExpertKind::Zero], 2, 3);
        let mut g = Graph::inference();
        let bind = store.bind(&mut g);
        let x = g.constant(rand_x(4));
        let cond = SeqCond::Noise { sigma_bar: 1.0 };
        let mut cache = ResamplerCache::new();
        let (y, _) = l.forward(&mut g, &bind, x, &cond, &registry(), &mut cache).unwrap();
        assert_eq!(g.value(y).max_abs(), 0.0);
    }

    #[test]
    fn forced_zero_expert_records_stats() {
        let roster = [SequenceExpertKind::Copy, SequenceExpertKind::Zero];
        let (mut store, l) = layer(&roster, 1, 5);
        // Bias the gate hard toward the zero expert.
        let bid = store.id_of("seq.gate.b").unwrap();
        store.get_mut(bid).data = vec![-50.0, 50.0];
        let mut g = Graph::inference();
        let bind = store.bind(&mut g);
        let x = g.constant(rand_x(6));
        let cond = SeqCond::Noise { sigma_bar: 0.5 };
        let mut cache = ResamplerCache::new();
        let (y, stats) = l.forward(&mut g, &bind, x, &cond, &registry(), &mut cache).unwrap();
        assert_eq!(g.value(y).max_abs(), 0.0);
        assert!((stats.f[1] - 1.0).abs() < 1e-12);
        assert!((stats.f[0] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn noise_expert_symmetric_gate_blends_evenly() {
        let roster = [SequenceExpertKind::Noise];
        let mut store = ParamStore::new();
        let l = SequenceMoeLayer::init(&mut store, "seq", 6, 4, Group::T2i, &roster, 1, rcfg(), &registry(), 7).unwrap();
        // Zero gate weights give w = 0.5 exactly.
        let gid = store.id_of("seq.e0.gate_w").unwrap();
        store.get_mut(gid).data.fill(0.0);

        let x = rand_x(8);
        let mut g = Graph::inference();
        let bind = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let cond = SeqCond::Noise { sigma_bar: std::f64::consts::LN_2 };
        let mut cache = ResamplerCache::new();
        let (y, _) = l.forward(&mut g, &bind, xv, &cond, &registry(), &mut cache).unwrap();

        // Reference: 0.5 x + 0.5 S(v_noise).
        let s_out = {
            let expert = &l.experts[0];
            let resampled = expert
                .resample(&mut g, &bind, &cond, &registry(), &mut ResamplerCache::new())
                .unwrap();
            g.value(resampled).clone()
        };
        for i in 0..x.len() {
            let expect = 0.5 * x.data[i] + 0.5 * s_out.data[i];
            assert!((g.value(y).data[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn extreme_gate_recovers_copy_or_injection() {
        let roster = [SequenceExpertKind::Feature { provider: "hash".into() }];
        let mut store = ParamStore::new();
        let mut reg = registry();
        reg.register(Box::new(HashProjectionProvider::new("hash2", 16, 9)));
        let l = SequenceMoeLayer::init(&mut store, "seq", 6, 4, Group::Mmu, &roster, 1, rcfg(), &reg, 11).unwrap();
        let handle = SampleHandle { prompt: vec![1, 2, 3], target: vec![4, 5] };
        let x = rand_x(10);

        // Setting gate column 0 to shift * flat(x) makes logit0 equal
        // shift * |x|^2, driving w to 1 (copy) or 0 (pure injection).
        for (shift, toward_copy) in [(1e3, true), (-1e3, false)] {
            let mut st = store.cast::<f64>();
            let gid = st.id_of("seq.e0.gate_w").unwrap();
            let t = st.get_mut(gid);
            for r in 0..t.rows {
                *t.at_mut(r, 0) = shift * x.data[r];
                *t.at_mut(r, 1) = 0.0;
            }
            let mut g = Graph::inference();
            let bind = st.bind(&mut g);
            let xv = g.constant(x.clone());
            let cond = SeqCond::Sample { handle: &handle };
            let mut cache = ResamplerCache::new();
            let (y, _) = l.forward(&mut g, &bind, xv, &cond, &reg, &mut cache).unwrap();
            if toward_copy {
                let diff = g.value(y).zip_map(&x, |a, b| (a - b).abs());
                assert!(diff.max_abs() < 1e-9, "gate toward copy: {}", diff.max_abs());
            } else {
                // Output equals the resampled injection.
                let resampled = l.experts[0]
                    .resample(&mut g, &bind, &cond, &reg, &mut ResamplerCache::new())
                    .unwrap();
                let diff = g.value(y).zip_map(g.value(resampled), |a, b| (a - b).abs());
                assert!(diff.max_abs() < 1e-9, "gate toward injection: {}", diff.max_abs());
            }
        }
    }

    #[test]
    fn missing_conditioning_is_config_error() {
        let (store, l) = layer(&[SequenceExpertKind::Noise], 1, 13);
        let mut g = Graph::inference();
        let bind = store.bind(&mut g);
        let x = g.constant(rand_x(14));
        let handle = SampleHandle { prompt: vec![], target: vec![] };
        let cond = SeqCond::Sample { handle: &handle };
        let mut cache = ResamplerCache::new();
        assert!(matches!(
            l.forward(&mut g, &bind, x, &cond, &registry(), &mut cache),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gates_stay_in_open_unit_interval() {
        let roster = [SequenceExpertKind::Noise, SequenceExpertKind::Copy];
        let (store, l) = layer(&roster, 2, 15);
        let mut stream = Stream::new(16, 0);
        for trial in 0..10 {
            let mut g = Graph::inference();
            let bind = store.bind(&mut g);
            let x = g.constant(Tensor::randn(4, 6, 2.0, &mut stream));
            let cond = SeqCond::Noise { sigma_bar: 0.1 + trial as f64 };
            let mut cache = ResamplerCache::new();
            let (y, stats) = l.forward(&mut g, &bind, x, &cond, &registry(), &mut cache).unwrap();
            assert!(g.value(y).all_finite());
            let psum: f64 = stats.p.iter().sum();
            assert!((psum - 1.0).abs() < 1e-9);
        }
    }
}
