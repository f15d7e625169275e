//! Finite-difference gradient checks through the full two-layer MoE model
//! in f64: dual loss, balance penalty, and next-token loss.

use d3moe_core::denoiser::{BatchItem, Denoiser, ModelConfig, MoeConfig, Task};
use d3moe_core::diffusion::{forward_sample, NoiseSchedule, TokenSequence};
use d3moe_core::gradcheck::gradient_check;
use d3moe_core::graph::{Graph, Var};
use d3moe_core::losses::ScoreMode;
use d3moe_core::moe::{
    AttributeHistogramProvider, HashProjectionProvider, ProviderRegistry, ResamplerConfig,
    SampleHandle, TokenMoeGroupConfig,
};
use d3moe_core::objective::{balance_graph, d3diff_graph, ntp_graph, CorruptedItem};
use d3moe_core::params::ParamStore;
use d3moe_core::Result;

fn cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        text_vocab: 16,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_prompt_len: 2,
        target_len: 8,
        max_answer_len: 2,
        moe: MoeConfig {
            token: TokenMoeGroupConfig { n_shared: 1, n_routed: 4, top_k: 2, expert_hidden: 6 },
            seq_top_k: 2,
            resampler: ResamplerConfig {
                input_dim: 16,
                latent_len: 8,
                latent_dim: 8,
                output_dim: 16,
                layers: 1,
                heads: 2,
            },
            ..MoeConfig::default()
        },
        seed: 5,
    }
}

fn registry() -> ProviderRegistry<f64> {
    let mut r = ProviderRegistry::new();
    r.register(Box::new(AttributeHistogramProvider::new("attr-hist", 0, 16)));
    r.register(Box::new(HashProjectionProvider::new("hash-proj", 16, 1)));
    r
}

struct Fixture {
    cfg: ModelConfig,
    clean: Vec<Vec<u32>>,
    noisy: Vec<Vec<u32>>,
    sigma: Vec<(f64, f64)>, // (sigma_bar, sigma_t)
    prompt: Vec<u32>,
}

fn fixture() -> Fixture {
    let cfg = cfg();
    let sched = NoiseSchedule::default();
    let vocab = cfg.vocab();
    let clean: Vec<Vec<u32>> = vec![vec![0, 3, 1, 7, 2, 5, 4, 6], vec![1, 1, 2, 2, 3, 3, 4, 4]];
    let mut noisy = Vec::new();
    let mut sigma = Vec::new();
    for (i, c) in clean.iter().enumerate() {
        let t = 0.55 + 0.2 * i as f64;
        let seq = TokenSequence::new(c.clone(), &vocab).unwrap();
        let (xt, _) = forward_sample(&seq, t, &sched, &vocab, 100 + i as u64).unwrap();
        noisy.push(xt.tokens().to_vec());
        sigma.push((sched.cumulative_noise(t).unwrap(), sched.rate(t).unwrap()));
    }
    Fixture { cfg, clean, noisy, sigma, prompt: vec![3, 9] }
}

fn d3diff_closure(fx: &Fixture) -> impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + '_ {
    move |g, params| {
        let model = Denoiser::from_params(fx.cfg.clone(), params.cast(), &registry())?;
        let bind = params.bind(g);
        let items: Vec<BatchItem<f64>> = fx
            .noisy
            .iter()
            .zip(&fx.sigma)
            .map(|(xt, &(sb, _))| BatchItem {
                prompt: &fx.prompt,
                target: xt,
                answer: &[],
                sigma_bar: sb,
                handle: None,
            })
            .collect();
        let fwd = model.forward_batch(g, &bind, Task::T2i, &items, &registry())?;
        let loss_items: Vec<CorruptedItem> = fx
            .clean
            .iter()
            .zip(&fx.noisy)
            .zip(&fx.sigma)
            .map(|((c, n), &(sb, st))| CorruptedItem { clean: c, noisy: n, sigma_bar: sb, sigma_t: st })
            .collect();
        let vars = d3diff_graph(
            g,
            fwd.posterior_log_probs.unwrap(),
            &loss_items,
            &fx.cfg.vocab(),
            0.01,
            ScoreMode::Exact,
        )?;
        Ok(vars.total)
    }
}

// from_params re-inits then overwrites tensors, so the graph must bind the
// *caller's* store; forward_batch only reads structure from the model.
// Denoiser::from_params and init insert parameters in identical order, which
// keeps ids aligned between `model` and `params`.

#[test]
fn d3diff_gradients_match_finite_differences() {
    let fx = fixture();
    let model = Denoiser::<f64>::init(fx.cfg.clone(), &registry()).unwrap();
    let closure = d3diff_closure(&fx);
    let report = gradient_check(&closure, &model.params, 1e-4, 1e-5, 2, 71).unwrap();
    assert!(
        report.pass(),
        "max rel error {} at {:?}",
        report.max_rel_error(),
        report.worst.first().map(|w| &w.name)
    );
}

#[test]
fn score_term_alone_passes_gradient_check() {
    let fx = fixture();
    let model = Denoiser::<f64>::init(fx.cfg.clone(), &registry()).unwrap();
    let closure = move |g: &mut Graph<f64>, params: &ParamStore<f64>| -> Result<Var> {
        let model = Denoiser::from_params(fx.cfg.clone(), params.cast(), &registry())?;
        let bind = params.bind(g);
        let items: Vec<BatchItem<f64>> = fx
            .noisy
            .iter()
            .zip(&fx.sigma)
            .map(|(xt, &(sb, _))| BatchItem {
                prompt: &fx.prompt,
                target: xt,
                answer: &[],
                sigma_bar: sb,
                handle: None,
            })
            .collect();
        let fwd = model.forward_batch(g, &bind, Task::T2i, &items, &registry())?;
        let loss_items: Vec<CorruptedItem> = fx
            .clean
            .iter()
            .zip(&fx.noisy)
            .zip(&fx.sigma)
            .map(|((c, n), &(sb, st))| CorruptedItem { clean: c, noisy: n, sigma_bar: sb, sigma_t: st })
            .collect();
        let vars = d3diff_graph(
            g,
            fwd.posterior_log_probs.unwrap(),
            &loss_items,
            &fx.cfg.vocab(),
            1.0,
            ScoreMode::Exact,
        )?;
        Ok(vars.score)
    };
    let report = gradient_check(&closure, &model.params, 1e-4, 1e-5, 2, 73).unwrap();
    assert!(report.pass(), "max rel error {}", report.max_rel_error());
}

#[test]
fn ntp_and_balance_gradients_match_finite_differences() {
    let fx = fixture();
    let model = Denoiser::<f64>::init(fx.cfg.clone(), &registry()).unwrap();
    let handles: Vec<SampleHandle> = (0..2)
        .map(|i| SampleHandle { prompt: vec![3, 9], target: fx.clean[i].clone() })
        .collect();
    let answers: Vec<Vec<u32>> = vec![vec![2, 7], vec![5, 1]];

    let ntp_closure = {
        let fx_cfg = fx.cfg.clone();
        let handles = handles.clone();
        let answers = answers.clone();
        let clean = fx.clean.clone();
        move |g: &mut Graph<f64>, params: &ParamStore<f64>| -> Result<Var> {
            let model = Denoiser::from_params(fx_cfg.clone(), params.cast(), &registry())?;
            let bind = params.bind(g);
            let items: Vec<BatchItem<f64>> = clean
                .iter()
                .zip(&answers)
                .zip(&handles)
                .map(|((c, a), h)| BatchItem {
                    prompt: &[],
                    target: c,
                    answer: a,
                    sigma_bar: 0.0,
                    handle: Some(h),
                })
                .collect();
            let fwd = model.forward_batch(g, &bind, Task::Mmu, &items, &registry())?;
            let targets: Vec<u32> = answers.iter().flatten().copied().collect();
            ntp_graph(g, fwd.lm_logits.unwrap(), &targets)
        }
    };
    let report = gradient_check(&ntp_closure, &model.params, 1e-4, 1e-5, 2, 79).unwrap();
    assert!(report.pass(), "ntp max rel error {}", report.max_rel_error());

    let balance_closure = {
        let fx_cfg = fx.cfg.clone();
        let noisy = fx.noisy.clone();
        let sigma = fx.sigma.clone();
        let prompt = fx.prompt.clone();
        move |g: &mut Graph<f64>, params: &ParamStore<f64>| -> Result<Var> {
            let model = Denoiser::from_params(fx_cfg.clone(), params.cast(), &registry())?;
            let bind = params.bind(g);
            let items: Vec<BatchItem<f64>> = noisy
                .iter()
                .zip(&sigma)
                .map(|(xt, &(sb, _))| BatchItem {
                    prompt: &prompt,
                    target: xt,
                    answer: &[],
                    sigma_bar: sb,
                    handle: None,
                })
                .collect();
            let fwd = model.forward_batch(g, &bind, Task::T2i, &items, &registry())?;
            balance_graph(g, &fwd.token_stats, &fwd.gate_prob_rows, 1.0)
        }
    };
    let report = gradient_check(&balance_closure, &model.params, 1e-4, 1e-5, 2, 83).unwrap();
    assert!(report.pass(), "balance max rel error {}", report.max_rel_error());
}

#[test]
fn quadratic_toy_loss_matches_to_machine_precision() {
    let mut params = ParamStore::new();
    params.insert_randn("theta", 4, 4, 1.0, 9);
    let closure = |g: &mut Graph<f64>, p: &ParamStore<f64>| -> Result<Var> {
        let bind = p.bind(g);
        let v = bind.var(0);
        let sq = g.mul(v, v);
        Ok(g.sum_all(sq))
    };
    let report = gradient_check(&closure, &params, 1e-7, 1e-5, 8, 11).unwrap();
    assert!(report.pass(), "max rel error {}", report.max_rel_error());
}
