//! Shared fixtures for the benchmarks in `benches/`.

use lgdfm::model::{preset_params, simulate, MarginalGroup, PsiSet};
use lgdfm::{CountMatrix, DfmParams, FittedModel, Marginal};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Standardized preset truth, its marginals and one simulated sample.
pub fn fixture(
    d: usize,
    r: usize,
    t: usize,
    group: MarginalGroup,
) -> (DfmParams, Vec<Marginal>, CountMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw = preset_params(d, r, PsiSet::Positive, &mut rng);
    let marginals = group.assign(d);
    let sim = simulate(&raw, &marginals, t, 500, 2).expect("simulate");
    let (std, _) = raw.standardized().expect("standardize");
    (std, marginals, sim.x)
}

pub fn true_model(d: usize, r: usize, group: MarginalGroup) -> (FittedModel, CountMatrix) {
    let (params, marginals, x) = fixture(d, r, 200, group);
    (
        FittedModel::from_params(params, marginals).expect("model"),
        x,
    )
}
