//! Hyperparameter search against an exhaustive grid, and stability of
//! group differences under re-pairing of draws.

use hbvar_core::empirical_bayes::{log_grid_search, Objective};
use hbvar_core::{
    build_default_prior, combine, ec_diff, generate, group_stats, sample_model2, tune, EcRules, GeneratorSpec,
    GroupDataset, TuneConfig,
};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(b: DMatrix<f64>, s: usize, t: usize, subject_scale: f64, seed: u64) -> GroupDataset {
    let r = b.ncols();
    let spec = GeneratorSpec {
        n_regions: r,
        n_subjects: s,
        n_time: t,
        lag: 1,
        b,
        sigma: DMatrix::from_fn(r, r, |i, j| if i == j { 1.0 } else { 0.2 }),
        nu: Some(r as f64 + 8.0),
        subject_row_cov: vec![DMatrix::identity(r, r) * subject_scale; s],
        seed,
        burn_in: 100,
    };
    generate(&spec).unwrap().0
}

#[test]
fn tuned_lambda_is_near_the_grid_maximizer() {
    let b = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, -0.2, 0.3]);
    let ds = dataset(b, 6, 60, 0.05, 31);
    let config = TuneConfig {
        shared_kappa: true,
        ..TuneConfig::default()
    };
    let tuned = tune(&ds, 1, &config).unwrap();
    let objective = Objective::new(&ds, 1).unwrap();
    let (grid_lambda, _, grid_best) = log_grid_search(&objective, (1e-4, 1e2), (1e-4, 1e2), 50);
    let ratio = tuned.lambda / grid_lambda;
    assert!(
        (1.0 / 3.0..=3.0).contains(&ratio),
        "tuned λ {} vs grid λ {grid_lambda}",
        tuned.lambda
    );
    assert!(tuned.log_marginal >= grid_best - 1e-3);
}

#[test]
fn difference_edges_do_not_depend_on_pairing() {
    let b_a = DMatrix::from_row_slice(3, 3, &[0.4, 0.1, 0.0, 0.0, 0.3, 0.1, 0.0, 0.0, 0.3]);
    let mut b_b = b_a.clone();
    b_b[(0, 1)] = -0.2;
    b_b[(2, 2)] = 0.0;
    let rules = EcRules::diff_default();
    let runs = 20;
    let mut agree = 0;
    for run in 0..runs as u64 {
        let draws = |b: &DMatrix<f64>, seed: u64| {
            let ds = dataset(b.clone(), 5, 80, 0.01, seed);
            let prior = build_default_prior(&ds, 1, 0.3, vec![0.1; 5]).unwrap();
            let post = combine(&group_stats(&ds, &prior).unwrap(), &prior).unwrap();
            sample_model2(&post, 4000, seed + 1).unwrap()
        };
        let a = draws(&b_a, 100 + 2 * run);
        let b = draws(&b_b, 200 + 2 * run);
        let mut shuffled = b.clone();
        shuffled.chains[0].shuffle(&mut ChaCha8Rng::seed_from_u64(run));
        let key = |edges: Vec<hbvar_core::EcEdge>| -> Vec<(usize, usize, usize)> {
            edges.iter().map(|e| (e.from_region, e.to_region, e.lag)).collect()
        };
        let first = key(ec_diff(&a, &b, &rules).unwrap());
        let second = key(ec_diff(&a, &shuffled, &rules).unwrap());
        agree += usize::from(first == second);
    }
    assert!(agree * 100 >= 95 * runs, "retained sets agreed in {agree}/{runs} runs");
}
