use lgdfm::harness::{
    estimation_losses, fmt_sig, marginal_baseline, sensitivity, ExperimentConfig, ParamSet,
};
use lgdfm::model::{preset_params, simulate, MarginalGroup, PsiSet};
use lgdfm::smc::{forecast_distribution, observed_support, point_forecast, run_sisr, SisrOptions};
use lgdfm::{fit, CountMatrix, Family, FitOptions};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn config_round_trips(seed in any::<u64>(), d in 3usize..40, reps in 0usize..500, t in 20usize..1000) {
        let mut cfg = ExperimentConfig::preset(PsiSet::Var2, MarginalGroup::NegBinomial, d, 2, t, reps, seed);
        cfg.p = Some(2);
        let json = serde_json::to_string(&cfg).unwrap();
        prop_assert_eq!(ExperimentConfig::from_json(&json).unwrap(), cfg);
    }

    #[test]
    fn replication_seeds_distinct(seed in any::<u64>()) {
        let cfg = ExperimentConfig::preset(PsiSet::Positive, MarginalGroup::Poisson, 6, 2, 50, 200, seed);
        let mut seen: Vec<u64> = (0..200).map(|k| cfg.replication_seed(k)).collect();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), 200);
    }

    #[test]
    fn losses_nonnegative(vals in prop::collection::vec(-5.0f64..5.0, 12), truth in prop::collection::vec(0.1f64..3.0, 4)) {
        let a = ParamSet(vec![DMatrix::from_column_slice(4, 1, &truth)]);
        let est: Vec<ParamSet> = vals.chunks(4).map(|c| ParamSet(vec![DMatrix::from_column_slice(4, 1, c)])).collect();
        for row in estimation_losses(&est, &a).unwrap() {
            prop_assert!(row.loss >= 0.0 && row.bias >= 0.0 && row.mean_l1 >= row.bias - 1e-12);
        }
    }

    #[test]
    fn sensitivity_in_unit_interval(pairs in prop::collection::vec((0u32..4, 0u32..4), 1..30)) {
        let (a, b): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
        let s = sensitivity(&a, &b);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(sensitivity(&b, &b), 1.0);
    }

    #[test]
    fn marginal_baseline_is_a_most_frequent_value(cells in prop::collection::vec(0u32..5, 30)) {
        let x = CountMatrix::from_column_slice(30, 1, &cells);
        let m = marginal_baseline(&x, 1)[(0, 0)];
        let count = |v: u32| cells.iter().filter(|&&c| c == v).count();
        for v in 0..5 {
            prop_assert!(count(m) > count(v) || (count(m) == count(v) && m <= v) || v == m);
        }
    }

    #[test]
    fn six_significant_digits(x in -1e9f64..1e9) {
        let back: f64 = fmt_sig(x).parse().unwrap();
        prop_assert!((back - x).abs() <= 5e-6 * x.abs() + 1e-300);
    }
}

#[test]
fn long_horizon_point_forecast_matches_marginal_baseline() {
    // For Bernoulli marginals the fitted mode is the historical majority value.
    let d = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let raw = preset_params(d, 2, PsiSet::Positive, &mut rng);
    let marginals = MarginalGroup::Bernoulli.assign(d);
    let sim = simulate(&raw, &marginals, 150, 200, 4).unwrap();
    let model = fit(
        &sim.x,
        &vec![Family::Bernoulli; d],
        2,
        1,
        &FitOptions::default(),
    )
    .unwrap();
    let window = sim.x.rows(140, 10).into_owned();
    let opts = SisrOptions {
        particles: 200,
        qmc_points: 1024,
        ..Default::default()
    };
    let ens = run_sisr(&window, &model, &opts, 6).unwrap();
    let seen = observed_support(&sim.x, &model);
    let dist = forecast_distribution(&ens, &model, 60, Some(&seen)).unwrap();
    let point = point_forecast(&dist);
    let base = marginal_baseline(&sim.x, 60);
    for h in 49..60 {
        assert_eq!(point.row(h), base.row(h), "h={}", h + 1);
    }
}
