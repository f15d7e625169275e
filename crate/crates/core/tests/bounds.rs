//! Exactness and ordering checks for the bound verifier.

use d3moe_core::diffusion::Vocabulary;
use d3moe_core::oracle::ExplicitDist;
use d3moe_core::rng::Stream;
use d3moe_core::verifier::{
    check_theorem1, compute_l1, compute_l2, default_suite, exact_model_likelihood,
    nll_by_trajectory_enumeration, prior_gap, PosteriorTable, TinyInstance,
};

fn delta_instance(survivals: Vec<f64>) -> TinyInstance {
    let vocab = Vocabulary::new(2).unwrap();
    let mut data = vec![0.0; 4];
    data[2] = 1.0; // sequence (0, 1)
    TinyInstance::new(vocab, 2, survivals, data).unwrap()
}

fn two_seq_instance(survivals: Vec<f64>) -> TinyInstance {
    let vocab = Vocabulary::new(2).unwrap();
    let dist = ExplicitDist::new(vocab, vec![(vec![0, 1], 0.7), (vec![1, 0], 0.3)]).unwrap();
    TinyInstance::from_explicit(&dist, survivals).unwrap()
}

fn entropy(inst: &TinyInstance) -> f64 {
    -inst.data.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

#[test]
fn one_step_perfect_posterior_reproduces_data_likelihood() {
    let inst = two_seq_instance(vec![0.5]);
    let model = PosteriorTable::perfect(&inst);
    let nll = exact_model_likelihood(&inst, &model).unwrap();
    for (clean, &q) in inst.data.iter().enumerate() {
        if q > 0.0 {
            assert!((nll.per_clean[clean] + q.ln()).abs() < 1e-12);
        }
    }
}

#[test]
fn delta_data_perfect_posterior_has_zero_nll_any_t() {
    for t in 1..=4 {
        let inst = delta_instance(vec![0.5; t]);
        let model = PosteriorTable::perfect(&inst);
        let nll = exact_model_likelihood(&inst, &model).unwrap();
        assert!(nll.expected.abs() < 1e-12, "T={t}: nll {}", nll.expected);
    }
}

#[test]
fn perfect_posterior_nll_equals_data_entropy() {
    let inst = two_seq_instance(vec![0.6, 0.5, 0.7]);
    let model = PosteriorTable::perfect(&inst);
    let nll = exact_model_likelihood(&inst, &model).unwrap();
    assert!((nll.expected - entropy(&inst)).abs() < 1e-10);
}

#[test]
fn dp_matches_trajectory_enumeration() {
    // Random 2-token instances, random posteriors, both likelihood routes.
    let mut stream = Stream::new(17, 0);
    for trial in 0..5 {
        let vocab = Vocabulary::new(2).unwrap();
        let mut data: Vec<f64> = (0..4).map(|_| stream.uniform_range(0.05, 1.0)).collect();
        let z: f64 = data.iter().sum();
        data.iter_mut().for_each(|p| *p /= z);
        let t = 1 + trial % 2;
        let survivals: Vec<f64> = (0..t).map(|_| stream.uniform_range(0.3, 0.8)).collect();
        let inst = TinyInstance::new(vocab, 2, survivals, data).unwrap();
        let model = PosteriorTable::random(&inst, &mut stream, 1e-3);
        let dp = exact_model_likelihood(&inst, &model).unwrap();
        for clean in 0..inst.n_cleans() {
            let brute = nll_by_trajectory_enumeration(&inst, &model, clean);
            assert!(
                (dp.per_clean[clean] - brute).abs() < 1e-10,
                "trial {trial} clean {clean}: dp {} vs brute {brute}",
                dp.per_clean[clean]
            );
        }
    }
}

#[test]
fn l2_at_perfect_posterior_is_data_entropy() {
    let inst = two_seq_instance(vec![0.5, 0.5]);
    let model = PosteriorTable::perfect(&inst);
    let (l2, _) = compute_l2(&inst, &model).unwrap();
    assert!((l2 - entropy(&inst)).abs() < 1e-10, "L2 {l2} vs entropy {}", entropy(&inst));

    let delta = delta_instance(vec![0.5, 0.5]);
    let dmodel = PosteriorTable::perfect(&delta);
    let (l2d, _) = compute_l2(&delta, &dmodel).unwrap();
    assert!(l2d.abs() < 1e-12);
}

#[test]
fn degrading_the_posterior_increases_l2() {
    let inst = two_seq_instance(vec![0.6, 0.5]);
    let perfect = PosteriorTable::perfect(&inst);
    let (base, _) = compute_l2(&inst, &perfect).unwrap();
    let mut stream = Stream::new(23, 0);
    for _ in 0..100 {
        let noise = PosteriorTable::random(&inst, &mut stream, 1e-3);
        let lambda = stream.uniform_range(0.05, 0.95);
        let blended = PosteriorTable::blend(&perfect, &noise, lambda);
        let (l2, _) = compute_l2(&inst, &blended).unwrap();
        assert!(l2 > base, "degraded L2 {l2} not above {base}");
    }
}

#[test]
fn constant_c_is_model_independent() {
    let inst = two_seq_instance(vec![0.5, 0.4, 0.6]);
    let mut stream = Stream::new(29, 0);
    let (_, c1) = compute_l2(&inst, &PosteriorTable::perfect(&inst)).unwrap();
    for _ in 0..10 {
        let (_, c2) = compute_l2(&inst, &PosteriorTable::random(&inst, &mut stream, 1e-3)).unwrap();
        assert!((c1 - c2).abs() < 1e-12, "C drifted: {c1} vs {c2}");
    }
}

#[test]
fn prior_gap_vanishes_with_terminal_survival() {
    // Terminal survival e^{-20}: the closed-form prior term is ~2e-9 per
    // position.
    let heavy = delta_instance(vec![(-5.0f64).exp(); 4]);
    assert!(prior_gap(&heavy) < 1e-8);
    let light = delta_instance(vec![0.9; 2]);
    assert!(prior_gap(&light) > 0.1);
}

#[test]
fn l1_score_term_vanishes_for_delta_data_perfect_posterior() {
    let inst = delta_instance(vec![0.5; 3]);
    let model = PosteriorTable::perfect(&inst);
    let l1 = compute_l1(&inst, &model, 1).unwrap();
    // All that remains is the prior gap.
    assert!((l1 - prior_gap(&inst)).abs() < 1e-8, "score residue {}", l1 - prior_gap(&inst));
}

#[test]
fn l1_approaches_nll_for_perfect_posterior_at_heavy_noise() {
    // Terminal survival e^{-20}; the refined grid closes in on the NLL.
    let inst = two_seq_instance(vec![(-5.0f64).exp(); 4]);
    let model = PosteriorTable::perfect(&inst);
    let nll = exact_model_likelihood(&inst, &model).unwrap().expected;
    let coarse = compute_l1(&inst, &model, 1).unwrap();
    let fine = compute_l1(&inst, &model, 64).unwrap();
    let coarse_err = (coarse - nll).abs();
    let fine_err = (fine - nll).abs();
    assert!(fine_err < coarse_err, "refinement did not reduce error: {fine_err} vs {coarse_err}");
    assert!(fine_err < 0.05 * nll.max(1e-3), "refined L1 {fine} vs NLL {nll}");
}

#[test]
fn refinement_converges_and_is_reported() {
    // Convergence of the L1 grid is reported, not a theorem: coarse grids
    // can luck into error cancellation, so only the trend is checked.
    let inst = two_seq_instance(vec![0.5, 0.5, 0.5]);
    let model = PosteriorTable::perfect(&inst);
    let reference = compute_l1(&inst, &model, 256).unwrap();
    let errs: Vec<f64> = [1usize, 4, 16, 64]
        .iter()
        .map(|&r| (compute_l1(&inst, &model, r).unwrap() - reference).abs())
        .collect();
    let finest = errs[3];
    assert!(finest <= errs[1] && finest <= errs[2], "no convergence: {errs:?}");
    assert!(finest < 2e-3, "refined grid still far off: {errs:?}");
}

#[test]
fn theorem1_holds_on_default_suite() {
    let suite = default_suite(8, 4, 31).unwrap();
    let report = check_theorem1(&suite).unwrap();
    assert!(report.rows.len() >= 30);
    assert_eq!(report.elbo_violations, 0, "ELBO leg must never fail");
    assert!(report.mean_gap_l2_l1 >= 0.0, "mean L2-L1 gap {}", report.mean_gap_l2_l1);
    // Perfect model on the delta instance: all three quantities near zero.
    let delta_perfect = report
        .rows
        .iter()
        .find(|r| r.instance.starts_with("N2d2") && r.model == "perfect")
        .unwrap();
    assert!(delta_perfect.nll.abs() < 1e-8);
    assert!(delta_perfect.l2.abs() < 1e-8);
}
