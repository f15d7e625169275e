//! The denoiser: a small transformer consuming (prompt, noised target, task,
//! noise level) that emits per-position posteriors over clean tokens for
//! generation and next-token logits for understanding.
//!
//! Each block runs attention, then the task group's token-level MoE, then
//! the task group's sequence-level MoE over the target block. Noise enters
//! only through the sequence-level noise expert.

use serde::{Deserialize, Serialize};

use crate::diffusion::Vocabulary;
use crate::error::{Error, Result};
use crate::graph::{AttnSegment, Graph, MaskPattern, Var};
use crate::losses::{Group, PosteriorPrediction, RouterStats};
use crate::moe::{
    ProviderRegistry, ResamplerCache, ResamplerConfig, SampleHandle, SeqCond, SequenceExpertKind,
    SequenceMoeLayer, TokenMoeGroupConfig, TokenMoeLayer,
};
use crate::params::{Binding, Linear, NormAffine, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub token: TokenMoeGroupConfig,
    pub seq_top_k: usize,
    pub resampler: ResamplerConfig,
    pub t2i_roster: Vec<SequenceExpertKind>,
    pub mmu_roster: Vec<SequenceExpertKind>,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            token: TokenMoeGroupConfig::default(),
            seq_top_k: 2,
            resampler: ResamplerConfig::default(),
            t2i_roster: vec![
                SequenceExpertKind::Copy,
                SequenceExpertKind::Copy,
                SequenceExpertKind::Zero,
                SequenceExpertKind::Noise,
            ],
            mmu_roster: vec![
                SequenceExpertKind::Copy,
                SequenceExpertKind::Copy,
                SequenceExpertKind::Feature { provider: "attr-hist".into() },
                SequenceExpertKind::Feature { provider: "hash-proj".into() },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Non-mask target vocabulary size `N`.
    pub vocab_size: usize,
    /// Text vocabulary for prompts and answers.
    pub text_vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_prompt_len: usize,
    pub target_len: usize,
    pub max_answer_len: usize,
    pub moe: MoeConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Desk-scale default: ~0.9M parameters.
        ModelConfig {
            vocab_size: 32,
            text_vocab: 64,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_prompt_len: 4,
            target_len: 16,
            max_answer_len: 8,
            moe: MoeConfig {
                token: TokenMoeGroupConfig { n_shared: 1, n_routed: 8, top_k: 2, expert_hidden: 24 },
                resampler: ResamplerConfig {
                    input_dim: 128,
                    latent_len: 16,
                    latent_dim: 16,
                    output_dim: 128,
                    layers: 2,
                    heads: 2,
                },
                ..MoeConfig::default()
            },
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("text_vocab", self.text_vocab),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_prompt_len", self.max_prompt_len),
            ("target_len", self.target_len),
            ("max_answer_len", self.max_answer_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.moe.token.validate()?;
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.vocab_size).expect("validated vocab size")
    }

    fn max_seq(&self) -> usize {
        (self.max_prompt_len + self.target_len).max(self.target_len + self.max_answer_len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    T2i,
    Mmu,
}

impl Task {
    pub fn group(&self) -> Group {
        match self {
            Task::T2i => Group::T2i,
            Task::Mmu => Group::Mmu,
        }
    }
}

/// One sample in a forward batch. All items of a batch share the task and
/// the sequence geometry.
pub struct BatchItem<'a, F> {
    /// Attribute prompt tokens (t2i); empty for mmu.
    pub prompt: &'a [u32],
    /// Target tokens: the corrupted `x_t` for t2i, the clean sequence for mmu.
    pub target: &'a [u32],
    /// Answer tokens (mmu); empty for t2i.
    pub answer: &'a [u32],
    /// Cumulative noise at the sampled time (t2i).
    pub sigma_bar: F,
    /// Raw sample handle for feature experts (mmu).
    pub handle: Option<&'a SampleHandle>,
}

/// Graph handles plus statistics from one batched forward pass.
pub struct GraphForward<F> {
    /// Log-posterior over clean tokens at every target row, `(B*d) x N`.
    pub posterior_log_probs: Option<Var>,
    /// Next-token logits at every answer row, `(B*M) x V_txt`.
    pub lm_logits: Option<Var>,
    /// Token-level stats, one entry per layer.
    pub token_stats: Vec<RouterStats<F>>,
    /// Sequence-level stats, one entry per (layer, item).
    pub seq_stats: Vec<RouterStats<F>>,
    /// Per layer, the differentiable mean-gate-probability row (`1 x n_routed`).
    pub gate_prob_rows: Vec<Var>,
    /// Mean-pooled final target feature per item, `B x D`.
    pub pooled: Var,
}

/// Value-level output of a no-grad forward.
pub struct ForwardOutput<F> {
    pub posterior: Option<Vec<PosteriorPrediction<F>>>,
    pub lm_logits: Option<Vec<Tensor<F>>>,
    pub router_stats: Vec<RouterStats<F>>,
    pub seq_stats: Vec<RouterStats<F>>,
    pub pooled: Vec<Vec<F>>,
}

struct Block {
    ln_attn: NormAffine,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_moe: NormAffine,
    token_t2i: TokenMoeLayer,
    token_mmu: TokenMoeLayer,
    seq_t2i: SequenceMoeLayer,
    seq_mmu: SequenceMoeLayer,
}

pub struct Denoiser<F> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
    text_emb: usize,
    target_emb: usize,
    pos_emb: usize,
    blocks: Vec<Block>,
    final_norm: NormAffine,
    posterior_head: Linear,
    lm_head: Linear,
}

impl<F: Scalar> Denoiser<F> {
    pub fn init(cfg: ModelConfig, registry: &ProviderRegistry<F>) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let d = cfg.d_model;
        let mut store = ParamStore::new();
        let emb_std = 1.0 / (d as f64).sqrt();
        let text_emb = store.insert_randn("emb.text", cfg.text_vocab, d, emb_std, seed);
        let target_emb = store.insert_randn("emb.target", cfg.vocab_size + 1, d, emb_std, seed);
        let pos_emb = store.insert_randn("emb.pos", cfg.max_seq(), d, 0.02, seed);

        let rcfg = ResamplerConfig {
            output_dim: d,
            latent_len: cfg.target_len,
            ..cfg.moe.resampler
        };
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("block{l}");
                Ok(Block {
                    ln_attn: NormAffine::init(&mut store, &format!("{p}.ln_attn"), d),
                    q: Linear::init(&mut store, &format!("{p}.attn.q"), d, d, seed),
                    k: Linear::init(&mut store, &format!("{p}.attn.k"), d, d, seed),
                    v: Linear::init(&mut store, &format!("{p}.attn.v"), d, d, seed),
                    o: Linear::init(&mut store, &format!("{p}.attn.o"), d, d, seed),
                    ln_moe: NormAffine::init(&mut store, &format!("{p}.ln_moe"), d),
                    token_t2i: TokenMoeLayer::init(&mut store, &format!("{p}.tok_t2i"), d, Group::T2i, cfg.moe.token, seed)?,
                    token_mmu: TokenMoeLayer::init(&mut store, &format!("{p}.tok_mmu"), d, Group::Mmu, cfg.moe.token, seed)?,
                    seq_t2i: SequenceMoeLayer::init(
                        &mut store,
                        &format!("{p}.seq_t2i"),
                        d,
                        cfg.target_len,
                        Group::T2i,
                        &cfg.moe.t2i_roster,
                        cfg.moe.seq_top_k,
                        rcfg,
                        registry,
                        seed,
                    )?,
                    seq_mmu: SequenceMoeLayer::init(
                        &mut store,
                        &format!("{p}.seq_mmu"),
                        d,
                        cfg.target_len,
                        Group::Mmu,
                        &cfg.moe.mmu_roster,
                        cfg.moe.seq_top_k,
                        rcfg,
                        registry,
                        seed,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = NormAffine::init(&mut store, "final_ln", d);
        let posterior_head = Linear::init(&mut store, "head.posterior", d, cfg.vocab_size, seed);
        let lm_head = Linear::init(&mut store, "head.lm", d, cfg.text_vocab, seed);
        Ok(Denoiser {
            cfg,
            params: store,
            text_emb,
            target_emb,
            pos_emb,
            blocks,
            final_norm,
            posterior_head,
            lm_head,
        })
    }

    /// Rebuild a denoiser around checkpointed tensors.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<F>, registry: &ProviderRegistry<F>) -> Result<Self> {
        let mut model = Self::init(cfg, registry)?;
        if params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model defines {}",
                params.len(),
                model.params.len()
            )));
        }
        for (_, name, tensor) in params.iter() {
            let id = model
                .params
                .id_of(name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor '{name}' in checkpoint")))?;
            if model.params.get(id).shape() != tensor.shape() {
                return Err(Error::Format(format!("tensor '{name}' shape mismatch")));
            }
            *model.params.get_mut(id) = tensor.clone();
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    pub fn cast<G: Scalar>(&self, registry: &ProviderRegistry<G>) -> Result<Denoiser<G>> {
        Denoiser::from_params(self.cfg.clone(), self.params.cast::<G>(), registry)
    }

    fn item_seq_len(&self, task: Task, items: &[BatchItem<F>]) -> Result<(usize, usize)> {
        let first = &items[0];
        let (t0, seq) = match task {
            Task::T2i => {
                let p = first.prompt.len();
                if p > self.cfg.max_prompt_len {
                    return Err(Error::Precondition(format!(
                        "prompt length {p} exceeds max {}",
                        self.cfg.max_prompt_len
                    )));
                }
                (p, p + self.cfg.target_len)
            }
            Task::Mmu => {
                let a = first.answer.len();
                if a == 0 || a > self.cfg.max_answer_len {
                    return Err(Error::Precondition(format!(
                        "answer length {a} outside 1..={}",
                        self.cfg.max_answer_len
                    )));
                }
                (0, self.cfg.target_len + a)
            }
        };
        for item in items {
            let ok = match task {
                Task::T2i => {
                    item.prompt.len() == first.prompt.len()
                        && item.target.len() == self.cfg.target_len
                        && item.answer.is_empty()
                }
                Task::Mmu => {
                    item.answer.len() == first.answer.len()
                        && item.target.len() == self.cfg.target_len
                        && item.prompt.is_empty()
                }
            };
            if !ok {
                return Err(Error::Precondition("batch items disagree on sequence geometry".into()));
            }
        }
        Ok((t0, seq))
    }

    fn validate_items(&self, task: Task, items: &[BatchItem<F>]) -> Result<()> {
        let vocab = self.cfg.vocab();
        for item in items {
            for &t in item.target {
                if !vocab.contains(t) {
                    return Err(Error::Value(format!("target token {t} outside alphabet")));
                }
                if task == Task::Mmu && t == vocab.mask_id() {
                    return Err(Error::Precondition("mask token in understanding-task input".into()));
                }
            }
            for &t in item.prompt.iter().chain(item.answer) {
                if t as usize >= self.cfg.text_vocab {
                    return Err(Error::Value(format!("text token {t} outside vocabulary")));
                }
            }
            if task == Task::Mmu && item.handle.is_none() {
                let needs_handle = self
                    .cfg
                    .moe
                    .mmu_roster
                    .iter()
                    .any(|k| matches!(k, SequenceExpertKind::Feature { .. }));
                if needs_handle {
                    return Err(Error::Config("understanding batch item without sample handle".into()));
                }
            }
        }
        Ok(())
    }

    /// Batched forward pass on an existing graph.
    pub fn forward_batch(
        &self,
        g: &mut Graph<F>,
        bind: &Binding,
        task: Task,
        items: &[BatchItem<F>],
        registry: &ProviderRegistry<F>,
    ) -> Result<GraphForward<F>> {
        if items.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        self.validate_items(task, items)?;
        let (t0, seq) = self.item_seq_len(task, items)?;
        let b = items.len();
        let d_target = self.cfg.target_len;

        // Embed all items into one (B*seq) x D matrix.
        let mut token_rows: Vec<usize> = Vec::with_capacity(b * seq); // rows into emb tables
        let mut is_text: Vec<bool> = Vec::with_capacity(b * seq);
        for item in items {
            match task {
                Task::T2i => {
                    for &t in item.prompt {
                        token_rows.push(t as usize);
                        is_text.push(true);
                    }
                    for &t in item.target {
                        token_rows.push(t as usize);
                        is_text.push(false);
                    }
                }
                Task::Mmu => {
                    for &t in item.target {
                        token_rows.push(t as usize);
                        is_text.push(false);
                    }
                    for &t in item.answer {
                        token_rows.push(t as usize);
                        is_text.push(true);
                    }
                }
            }
        }
        // Gather text and target embeddings separately, then interleave by
        // scatter into the right rows.
        let text_rows: Vec<usize> = token_rows.iter().zip(&is_text).filter(|(_, &t)| t).map(|(&r, _)| r).collect();
        let tgt_rows: Vec<usize> = token_rows.iter().zip(&is_text).filter(|(_, &t)| !t).map(|(&r, _)| r).collect();
        let text_pos: Vec<usize> = (0..b * seq).filter(|&i| is_text[i]).collect();
        let tgt_pos: Vec<usize> = (0..b * seq).filter(|&i| !is_text[i]).collect();
        let zero = g.constant(Tensor::zeros(b * seq, self.cfg.d_model));
        let mut x = zero;
        if !text_rows.is_empty() {
            let te = g.gather_rows(bind.var(self.text_emb), text_rows);
            x = g.scatter_add_rows(x, te, text_pos);
        }
        if !tgt_rows.is_empty() {
            let ge = g.gather_rows(bind.var(self.target_emb), tgt_rows);
            x = g.scatter_add_rows(x, ge, tgt_pos);
        }
        // Positional encodings repeat per item.
        let pos_rows: Vec<usize> = (0..b).flat_map(|_| 0..seq).collect();
        let pe = g.gather_rows(bind.var(self.pos_emb), pos_rows);
        x = g.add(x, pe);

        let segments: Vec<AttnSegment> = (0..b)
            .map(|i| AttnSegment {
                q_start: i * seq,
                q_len: seq,
                k_start: i * seq,
                k_len: seq,
                mask: match task {
                    Task::T2i => MaskPattern::Full,
                    Task::Mmu => MaskPattern::BidirThenCausal { bidir_len: d_target },
                },
            })
            .collect();

        let mut token_stats = Vec::with_capacity(self.cfg.n_layers);
        let mut seq_stats = Vec::new();
        let mut gate_prob_rows = Vec::with_capacity(self.cfg.n_layers);
        let mut cache = ResamplerCache::new();

        for block in &self.blocks {
            // Attention sublayer.
            let normed = block.ln_attn.forward(g, bind, x);
            let q = block.q.forward(g, bind, normed);
            let k = block.k.forward(g, bind, normed);
            let v = block.v.forward(g, bind, normed);
            let attended = g.attention(q, k, v, self.cfg.n_heads, segments.clone());
            let attended = block.o.forward(g, bind, attended);
            x = g.add(x, attended);

            // Token-level MoE sublayer (task group).
            let normed = block.ln_moe.forward(g, bind, x);
            let token_layer = match task {
                Task::T2i => &block.token_t2i,
                Task::Mmu => &block.token_mmu,
            };
            let (moe_out, stats, p_row) = token_layer.forward(g, bind, normed)?;
            token_stats.push(stats);
            gate_prob_rows.push(p_row);
            x = g.add(x, moe_out);

            // Sequence-level MoE over each item's target block.
            let seq_layer = match task {
                Task::T2i => &block.seq_t2i,
                Task::Mmu => &block.seq_mmu,
            };
            let mut parts: Vec<Var> = Vec::with_capacity(b * 3);
            for (i, item) in items.iter().enumerate() {
                let base = i * seq;
                if t0 > 0 {
                    parts.push(g.slice_rows(x, base, t0));
                }
                let tb = g.slice_rows(x, base + t0, d_target);
                let cond = match task {
                    Task::T2i => SeqCond::Noise { sigma_bar: item.sigma_bar },
                    Task::Mmu => match item.handle {
                        Some(h) => SeqCond::Sample { handle: h },
                        None => SeqCond::Noise { sigma_bar: F::zero() },
                    },
                };
                let (tb_out, stats) = seq_layer.forward(g, bind, tb, &cond, registry, &mut cache)?;
                seq_stats.push(stats);
                parts.push(tb_out);
                let tail = seq - t0 - d_target;
                if tail > 0 {
                    parts.push(g.slice_rows(x, base + t0 + d_target, tail));
                }
            }
            x = g.concat_rows(&parts);
        }

        let x = self.final_norm.forward(g, bind, x);

        // Pool the final target features per item.
        let mut pooled_parts = Vec::with_capacity(b);
        for i in 0..b {
            let tb = g.slice_rows(x, i * seq + t0, d_target);
            pooled_parts.push(g.col_mean(tb));
        }
        let pooled = g.concat_rows(&pooled_parts);

        let mut out = GraphForward {
            posterior_log_probs: None,
            lm_logits: None,
            token_stats,
            seq_stats,
            gate_prob_rows,
            pooled,
        };
        match task {
            Task::T2i => {
                let rows: Vec<usize> = (0..b).flat_map(|i| (0..d_target).map(move |j| i * seq + t0 + j)).collect();
                let h = g.gather_rows(x, rows);
                let logits = self.posterior_head.forward(g, bind, h);
                out.posterior_log_probs = Some(g.log_softmax_rows(logits));
            }
            Task::Mmu => {
                let m = items[0].answer.len();
                // Row feeding the prediction of answer j is the previous
                // position: the last target row for j = 0.
                let rows: Vec<usize> = (0..b)
                    .flat_map(|i| (0..m).map(move |j| i * seq + d_target + j - 1))
                    .collect();
                let h = g.gather_rows(x, rows);
                out.lm_logits = Some(self.lm_head.forward(g, bind, h));
            }
        }
        Ok(out)
    }

    /// No-grad forward returning plain values.
    pub fn forward(
        &self,
        task: Task,
        items: &[BatchItem<F>],
        registry: &ProviderRegistry<F>,
    ) -> Result<ForwardOutput<F>> {
        let mut g = Graph::inference();
        let bind = self.params.bind(&mut g);
        let fwd = self.forward_batch(&mut g, &bind, task, items, registry)?;
        let b = items.len();
        let d_target = self.cfg.target_len;
        let vocab = self.cfg.vocab();

        let posterior = fwd.posterior_log_probs.map(|lp| {
            let all = g.value(lp);
            (0..b)
                .map(|i| {
                    let mut probs = Tensor::zeros(d_target, self.cfg.vocab_size);
                    for j in 0..d_target {
                        for c in 0..self.cfg.vocab_size {
                            *probs.at_mut(j, c) = all.at(i * d_target + j, c).exp();
                        }
                    }
                    let x_t = crate::diffusion::TokenSequence::new(items[i].target.to_vec(), &vocab)
                        .expect("validated target");
                    PosteriorPrediction::with_observed(probs, &x_t, &vocab).expect("shape checked")
                })
                .collect()
        });
        let lm_logits = fwd.lm_logits.map(|lv| {
            let all = g.value(lv);
            let m = items[0].answer.len();
            (0..b)
                .map(|i| {
                    let mut t = Tensor::zeros(m, self.cfg.text_vocab);
                    for j in 0..m {
                        t.row_mut(j).copy_from_slice(all.row(i * m + j));
                    }
                    t
                })
                .collect()
        });
        let pooled_t = g.value(fwd.pooled);
        let pooled = (0..b).map(|i| pooled_t.row(i).to_vec()).collect();
        Ok(ForwardOutput {
            posterior,
            lm_logits,
            router_stats: fwd.token_stats,
            seq_stats: fwd.seq_stats,
            pooled,
        })
    }
}
