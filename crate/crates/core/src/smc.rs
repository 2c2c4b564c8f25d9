//! Particle forecaster: sequential importance sampling with resampling over
//! the latent Gaussian series, Rao-Blackwellized over the factors by the
//! Kalman filter.

use crate::error::{Error, Result};
use crate::estimation::FittedModel;
use crate::kalman::{dare_converge, predict_covariances, KalmanCovs, StateSpace};
use crate::linalg::{cholesky_jitter, psd_inv_sqrt, symmetrize};
use crate::marginals::Thresholds;
use crate::normal;
use crate::CountMatrix;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Default QMC sample size for rectangle probabilities.
/// Probabilities within this relative distance count as tied.
pub const TIE_RTOL: f64 = 1e-9;

pub const DEFAULT_QMC_POINTS: usize = 1 << 13;

// ---------------------------------------------------------------------------
// Rectangle probabilities

/// `P(N(mean, cov) ∈ ∏(lo_j, hi_j])` by Genz's separation of variables with
/// a randomly shifted Richtmyer lattice.
///
/// Variables are reordered during the Cholesky factorization so the
/// narrowest conditional intervals come first; semidefinite covariances are
/// handled by treating zero pivots as deterministic constraints.
pub fn mvn_rectangle_prob(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    n_qmc: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..mean.len()).map(|_| rng.random()).collect();
    let plan = GenzPlan::new(mean, cov, lo, hi)?;
    Ok(plan.integrate(n_qmc, &shift))
}

/// Reordered, scaled Cholesky factor and bounds for one rectangle problem.
struct GenzPlan {
    d: usize,
    /// Row-major lower triangle scaled by the pivot (`c[i][m] / c[i][i]`).
    c: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    /// Zero pivot: the variable is an exact linear function of earlier ones.
    degenerate: Vec<bool>,
}

impl GenzPlan {
    fn new(
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        lo: &DVector<f64>,
        hi: &DVector<f64>,
    ) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) || lo.len() != d || hi.len() != d {
            return Err(Error::Shape("rectangle problem dimensions disagree".into()));
        }
        for j in 0..d {
            if !(lo[j] < hi[j]) {
                return Err(Error::DegenerateBin(format!(
                    "empty interval in coordinate {j}"
                )));
            }
        }
        let mut s = symmetrize(cov);
        let scale = (0..d)
            .map(|i| s[(i, i)].abs())
            .fold(0.0, f64::max)
            .max(1e-300);
        let tol = 1e-12 * scale;
        let mut a: Vec<f64> = (0..d).map(|j| lo[j] - mean[j]).collect();
        let mut b: Vec<f64> = (0..d).map(|j| hi[j] - mean[j]).collect();
        let mut c = DMatrix::<f64>::zeros(d, d);
        let mut y = vec![0.0; d];
        let mut degenerate = vec![false; d];

        for i in 0..d {
            // Pick the remaining variable with the smallest conditional
            // interval probability.
            let mut best = i;
            let mut best_p = f64::INFINITY;
            for j in i..d {
                let mut var = s[(j, j)];
                let mut shift = 0.0;
                for m in 0..i {
                    var -= c[(j, m)] * c[(j, m)];
                    shift += c[(j, m)] * y[m];
                }
                let p = if var > tol {
                    let sd = var.sqrt();
                    normal::interval_prob((a[j] - shift) / sd, (b[j] - shift) / sd)
                } else {
                    0.0
                };
                if p < best_p {
                    best_p = p;
                    best = j;
                }
            }
            if best != i {
                s.swap_rows(i, best);
                s.swap_columns(i, best);
                c.swap_rows(i, best);
                a.swap(i, best);
                b.swap(i, best);
            }
            let mut var = s[(i, i)];
            for m in 0..i {
                var -= c[(i, m)] * c[(i, m)];
            }
            let mut shift = 0.0;
            for m in 0..i {
                shift += c[(i, m)] * y[m];
            }
            if var <= tol {
                if var < -1e-8 * scale {
                    return Err(Error::Numeric(
                        "covariance is not positive semidefinite".into(),
                    ));
                }
                degenerate[i] = true;
                y[i] = 0.0;
                continue;
            }
            let cii = var.sqrt();
            c[(i, i)] = cii;
            for k in i + 1..d {
                let mut v = s[(k, i)];
                for m in 0..i {
                    v -= c[(k, m)] * c[(i, m)];
                }
                c[(k, i)] = v / cii;
            }
            let (al, bl) = ((a[i] - shift) / cii, (b[i] - shift) / cii);
            let mass = normal::interval_prob(al, bl);
            y[i] = if mass > 1e-300 {
                (normal::pdf(al) - normal::pdf(bl)) / mass
            } else if al > 0.0 {
                al
            } else {
                bl
            };
        }

        // Scale each row by its pivot so the integrand needs no divisions.
        let mut flat = vec![0.0; d * d];
        for i in 0..d {
            let piv = if degenerate[i] { 1.0 } else { c[(i, i)] };
            for m in 0..i {
                flat[i * d + m] = c[(i, m)] / piv;
            }
            a[i] /= piv;
            b[i] /= piv;
        }
        Ok(GenzPlan {
            d,
            c: flat,
            a,
            b,
            degenerate,
        })
    }

    fn integrate(&self, n: usize, shift: &[f64]) -> f64 {
        let d = self.d;
        // Richtmyer generators, cycled if d exceeds the prime table.
        let gens: Vec<f64> = (0..d)
            .map(|i| (PRIMES[i % PRIMES.len()] as f64).sqrt().fract())
            .collect();
        let mut x: Vec<f64> = shift[..d].to_vec();
        let mut y = vec![0.0; d];
        let mut total = 0.0;
        for _ in 0..n {
            for (xi, g) in x.iter_mut().zip(&gens) {
                *xi += g;
                if *xi >= 1.0 {
                    *xi -= 1.0;
                }
            }
            let mut prod = 1.0;
            for i in 0..d {
                let row = &self.c[i * d..i * d + i];
                let t: f64 = row.iter().zip(&y[..i]).map(|(c, y)| c * y).sum();
                if self.degenerate[i] {
                    // The scaled row holds the raw coefficients here.
                    if !(t > self.a[i] && t <= self.b[i]) {
                        prod = 0.0;
                        break;
                    }
                    y[i] = 0.0;
                    continue;
                }
                let lo = normal::cdf_fast(self.a[i] - t);
                let hi = normal::cdf_fast(self.b[i] - t);
                let e = hi - lo;
                if e <= 0.0 {
                    prod = 0.0;
                    break;
                }
                prod *= e;
                if i + 1 < d {
                    // Tent periodization.
                    let w = (2.0 * x[i] - 1.0).abs();
                    let u = (lo + w * e).clamp(1e-300, 1.0 - 1e-16);
                    y[i] = normal::quantile_fast(u);
                }
            }
            total += prod;
        }
        total / n as f64
    }
}

const PRIMES: [u32; 100] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
    101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193,
    197, 199, 211, 223, 227, 229, 233, 239, 241, 251, 257, 263, 269, 271, 277, 281, 283, 293, 307,
    311, 313, 317, 331, 337, 347, 349, 353, 359, 367, 373, 379, 383, 389, 397, 401, 409, 419, 421,
    431, 433, 439, 443, 449, 457, 461, 463, 467, 479, 487, 491, 499, 503, 509, 521, 523, 541,
];

// ---------------------------------------------------------------------------
// Truncated multivariate normal sampling

/// Shared pieces for sampling many particles under one covariance.
#[derive(Debug, Clone)]
pub struct TruncatedMvn {
    precision: DMatrix<f64>,
    inv_sqrt: DMatrix<f64>,
}

impl TruncatedMvn {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        let chol = cholesky_jitter(cov)?;
        Ok(TruncatedMvn {
            precision: symmetrize(&chol.inverse()),
            inv_sqrt: psd_inv_sqrt(cov),
        })
    }

    /// Gibbs draw of `Z ~ N(mean, cov)` restricted to the box, started at the
    /// box projection of the mean. Returns `Z` and `ξ = cov^{-1/2}(Z - mean)`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        mean: &DVector<f64>,
        lo: &[f64],
        hi: &[f64],
        sweeps: usize,
        rng: &mut R,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let d = mean.len();
        let mut z = DVector::from_fn(d, |i, _| mean[i].clamp(lo[i], hi[i]));
        let p = &self.precision;
        for _ in 0..sweeps.max(1) {
            for i in 0..d {
                let pii = p[(i, i)];
                let mut acc = 0.0;
                for j in 0..d {
                    if j != i {
                        acc += p[(i, j)] * (z[j] - mean[j]);
                    }
                }
                let cm = mean[i] - acc / pii;
                let sd = 1.0 / pii.sqrt();
                let (a, b) = ((lo[i] - cm) / sd, (hi[i] - cm) / sd);
                if !(a < b) {
                    return Err(Error::DegenerateBin(format!(
                        "coordinate {i} has an empty conditional interval"
                    )));
                }
                z[i] = (cm + sd * normal::sample_truncated(rng, a, b)).clamp(lo[i], hi[i]);
            }
        }
        let xi = &self.inv_sqrt * (&z - mean);
        Ok((z, xi))
    }
}

/// One truncated-MVN draw; see [`TruncatedMvn::sample`].
pub fn sample_truncated_mvn(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    lo: &[f64],
    hi: &[f64],
    sweeps: usize,
    seed: u64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TruncatedMvn::new(cov)?.sample(mean, lo, hi, sweeps, &mut rng)
}

// ---------------------------------------------------------------------------
// Resampling

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleStrategy {
    Systematic,
    Multinomial,
}

/// Effective sample size `1 / Σ w²` of normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Ancestor indices (0-based) for `N = weights.len()` offspring.
pub fn resample<R: Rng + ?Sized>(
    weights: &[f64],
    strategy: ResampleStrategy,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    if n == 0 || !(total > 0.0) || !total.is_finite() || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::WeightDegeneracy(format!("weights sum to {total}")));
    }
    let mut cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cum.push(acc);
    }
    cum[n - 1] = 1.0;
    let pick = |u: f64| cum.partition_point(|&c| c < u).min(n - 1);
    Ok(match strategy {
        ResampleStrategy::Systematic => {
            let u1 = rng.random::<f64>() / n as f64;
            (0..n).map(|k| pick(u1 + k as f64 / n as f64)).collect()
        }
        ResampleStrategy::Multinomial => (0..n).map(|_| pick(rng.random::<f64>())).collect(),
    })
}

// ---------------------------------------------------------------------------
// SIS/R

/// When resampling fires relative to `ess_fraction · N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleWhen {
    EssBelow,
    EssAbove,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SisrOptions {
    pub particles: usize,
    pub window: usize,
    pub gibbs_sweeps: usize,
    pub qmc_points: usize,
    pub strategy: ResampleStrategy,
    pub ess_fraction: f64,
    pub resample_when: ResampleWhen,
    /// Use the Riccati fixed point for every step instead of running the
    /// covariance recursion from the stationary start.
    pub dare_covariances: bool,
}

impl Default for SisrOptions {
    fn default() -> Self {
        SisrOptions {
            particles: 1000,
            window: 10,
            gibbs_sweeps: 10,
            qmc_points: DEFAULT_QMC_POINTS,
            strategy: ResampleStrategy::Systematic,
            ess_fraction: 0.5,
            resample_when: ResampleWhen::EssBelow,
            dare_covariances: false,
        }
    }
}

/// Particles at the end of the observation window.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    /// `Ỹ_{T|T}` per particle.
    pub states: Vec<DVector<f64>>,
    /// `Z̃_T` per particle.
    pub latents: Vec<DVector<f64>>,
    /// Normalized weights.
    pub weights: Vec<f64>,
    /// Covariances of the final step.
    pub covs: KalmanCovs,
    pub ess_history: Vec<f64>,
    pub resampled: Vec<bool>,
    pub seed: u64,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Weighted mean of `Z̃_T`.
    pub fn latent_mean(&self) -> DVector<f64> {
        let d = self.latents[0].len();
        self.latents
            .iter()
            .zip(&self.weights)
            .fold(DVector::zeros(d), |acc, (z, w)| acc + z * *w)
    }
}

fn bins_for(row: &[u32], thresholds: &[Thresholds]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = thresholds.len();
    let mut lo = vec![0.0; d];
    let mut hi = vec![0.0; d];
    for j in 0..d {
        let th = &thresholds[j];
        let top = th.offset() + th.support_len() as u32 - 1;
        // Counts beyond the truncated tail fall in the open last bin.
        let n = if th.offset() == 0 {
            row[j].min(top)
        } else {
            row[j]
        };
        let (a, b) = th.bin(n).ok_or_else(|| {
            Error::Domain(format!(
                "value {} outside the support of series {j}",
                row[j]
            ))
        })?;
        lo[j] = a;
        hi[j] = b;
    }
    Ok((lo, hi))
}

/// Runs the particle filter over the rows of `window` (oldest first).
pub fn run_sisr(
    window: &CountMatrix,
    model: &FittedModel,
    opts: &SisrOptions,
    seed: u64,
) -> Result<ParticleEnsemble> {
    let n = opts.particles;
    if n == 0 || window.nrows() == 0 {
        return Err(Error::InvalidParameter(
            "need at least one particle and one observation".into(),
        ));
    }
    let params = model.forecast_params();
    let d = params.d();
    if window.ncols() != d {
        return Err(Error::Shape(format!(
            "window has {} series, model has {d}",
            window.ncols()
        )));
    }
    let ss = StateSpace::new(&params)?;
    let thresholds = model
        .marginals
        .iter()
        .map(|m| m.thresholds())
        .collect::<Result<Vec<_>>>()?;

    let fixed = if opts.dare_covariances {
        Some(dare_converge(&ss, 1e-12, 10_000)?)
    } else {
        None
    };

    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k as u64 + 1);
            r
        })
        .collect();
    let mut resample_rng = ChaCha8Rng::seed_from_u64(seed);
    resample_rng.set_stream(0);
    let mut qmc_rng = ChaCha8Rng::seed_from_u64(seed);
    qmc_rng.set_stream(u64::MAX);

    let mut states: Vec<DVector<f64>> = vec![DVector::zeros(ss.state_dim()); n];
    let mut latents: Vec<DVector<f64>> = vec![DVector::zeros(d); n];
    let mut log_w = vec![0.0f64; n];
    let mut weights = vec![1.0 / n as f64; n];
    let mut q_filt = ss.q0.clone();
    let mut covs = ss.initial_covs();
    let mut ess_history = vec![];
    let mut resampled = vec![];

    for t in 0..window.nrows() {
        covs = match &fixed {
            Some(c) => c.clone(),
            None => ss.covariance_step(&q_filt)?,
        };
        q_filt = covs.q_filt.clone();
        let row: Vec<u32> = window.row(t).iter().copied().collect();
        let (lo, hi) = bins_for(&row, &thresholds)?;
        let sampler = TruncatedMvn::new(&covs.r_pred)?;
        let shift: Vec<f64> = (0..d).map(|_| qmc_rng.random()).collect();
        let lo_v = DVector::from_column_slice(&lo);
        let hi_v = DVector::from_column_slice(&hi);

        // Forecast step.
        let preds: Vec<(DVector<f64>, DVector<f64>)> =
            states.iter().map(|y| ss.forecast_mean(y)).collect();

        // Importance weights; resampled copies share predictions, so each
        // distinct mean is integrated once.
        let mut uniq: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut groups: Vec<usize> = Vec::with_capacity(n);
        let mut reps: Vec<usize> = vec![];
        for (k, (_, z)) in preds.iter().enumerate() {
            let key: Vec<u64> = z.iter().map(|v| v.to_bits()).collect();
            let g = *uniq.entry(key).or_insert_with(|| {
                reps.push(k);
                reps.len() - 1
            });
            groups.push(g);
        }
        let probs: Vec<f64> = reps
            .par_iter()
            .map(|&k| {
                let plan = GenzPlan::new(&preds[k].1, &covs.r_pred, &lo_v, &hi_v)?;
                Ok(plan.integrate(opts.qmc_points, &shift))
            })
            .collect::<Result<Vec<f64>>>()?;

        // Importance sampling step.
        let draws: Vec<DVector<f64>> = preds
            .par_iter()
            .zip(rngs.par_iter_mut())
            .map(|((_, z), rng)| {
                sampler
                    .sample(z, &lo, &hi, opts.gibbs_sweeps, rng)
                    .map(|(zt, _)| zt)
            })
            .collect::<Result<Vec<_>>>()?;
        for zt in &draws {
            for j in 0..d {
                debug_assert!(zt[j] >= lo[j] && zt[j] <= hi[j]);
                if !(zt[j] >= lo[j] && zt[j] <= hi[j]) {
                    return Err(Error::Numeric("particle left its bin".into()));
                }
            }
        }

        for k in 0..n {
            log_w[k] += probs[groups[k]].ln();
        }
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::WeightDegeneracy(format!(
                "all {n} particles have zero weight at step {}",
                t + 1
            )));
        }
        let total: f64 = log_w.iter().map(|l| (l - max).exp()).sum();
        for k in 0..n {
            weights[k] = (log_w[k] - max).exp() / total;
        }
        let e = ess(&weights);
        ess_history.push(e);

        // Resampling step.
        let threshold = opts.ess_fraction * n as f64;
        let fire = n > 1
            && match opts.resample_when {
                ResampleWhen::EssBelow => e < threshold,
                ResampleWhen::EssAbove => e > threshold,
            };
        resampled.push(fire);
        let (preds, draws) = if fire {
            let idx = resample(&weights, opts.strategy, &mut resample_rng)?;
            weights.fill(1.0 / n as f64);
            log_w.fill(0.0);
            (
                idx.iter().map(|&i| preds[i].clone()).collect::<Vec<_>>(),
                idx.iter().map(|&i| draws[i].clone()).collect::<Vec<_>>(),
            )
        } else {
            (preds, draws)
        };

        // Updating step.
        for k in 0..n {
            states[k] = ss.update_mean(&covs, &preds[k].0, &preds[k].1, &draws[k]);
        }
        latents = draws;
    }

    Ok(ParticleEnsemble {
        states,
        latents,
        weights,
        covs,
        ess_history,
        resampled,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Forecast distributions

/// Per-coordinate forecast pmfs for horizons `1..=H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastDistribution {
    pub horizon: usize,
    /// Smallest support value of each series.
    pub offsets: Vec<u32>,
    /// `pmf[h-1][i][n - offset_i]` after excluding unobserved values.
    pub pmf: Vec<Vec<Vec<f64>>>,
    /// Same layout before exclusion.
    pub raw_pmf: Vec<Vec<Vec<f64>>>,
}

impl ForecastDistribution {
    pub fn prob(&self, h: usize, i: usize, n: u32) -> f64 {
        n.checked_sub(self.offsets[i])
            .and_then(|k| self.pmf[h - 1][i].get(k as usize))
            .copied()
            .unwrap_or(0.0)
    }
}

/// Which support values of each series occur in `x` (values past the
/// truncated tail count toward the last cell).
pub fn observed_support(x: &CountMatrix, model: &FittedModel) -> Vec<Vec<bool>> {
    model
        .marginals
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let len = m.pmf_table().len();
            let off = m.support_offset();
            let mut seen = vec![false; len];
            for &v in x.column(i).iter() {
                if let Some(k) = v.checked_sub(off) {
                    seen[(k as usize).min(len - 1)] = true;
                }
            }
            seen
        })
        .collect()
}

/// Weighted bin probabilities of each coordinate under the `h`-step
/// predictive distribution of every particle.
pub fn forecast_distribution(
    ens: &ParticleEnsemble,
    model: &FittedModel,
    horizon: usize,
    observed: Option<&[Vec<bool>]>,
) -> Result<ForecastDistribution> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be >= 1".into()));
    }
    let ss = StateSpace::new(&model.forecast_params())?;
    let cuts: Vec<Vec<f64>> = model
        .marginals
        .iter()
        .map(|m| {
            let c = m.cdf_table();
            c[..c.len() - 1]
                .iter()
                .map(|&v| normal::quantile(v))
                .collect()
        })
        .collect();
    let d = cuts.len();
    let covs_h = predict_covariances(&ss, &ens.covs.q_filt, horizon);
    let mut states = ens.states.clone();
    let mut raw = Vec::with_capacity(horizon);
    for (_, r) in &covs_h {
        for y in states.iter_mut() {
            *y = &ss.psi_c * &*y;
        }
        let mut per_h = Vec::with_capacity(d);
        for i in 0..d {
            let s = r[(i, i)].max(0.0).sqrt();
            let mut pmf = vec![0.0; cuts[i].len() + 1];
            for (y, w) in states.iter().zip(&ens.weights) {
                let zi = (ss.lambda_c.row(i) * y)[0];
                let mut prev = 0.0;
                for (k, &c) in cuts[i].iter().enumerate() {
                    let cdf = if s > 0.0 {
                        normal::cdf((c - zi) / s)
                    } else if zi <= c {
                        1.0
                    } else {
                        0.0
                    };
                    pmf[k] += w * (cdf - prev);
                    prev = cdf;
                }
                pmf[cuts[i].len()] += w * (1.0 - prev);
            }
            per_h.push(pmf);
        }
        raw.push(per_h);
    }
    let pmf = match observed {
        None => raw.clone(),
        Some(mask) => raw
            .iter()
            .map(|per_h| {
                per_h
                    .iter()
                    .zip(mask)
                    .map(|(p, seen)| {
                        let kept: Vec<f64> = p
                            .iter()
                            .zip(seen)
                            .map(|(v, s)| if *s { *v } else { 0.0 })
                            .collect();
                        let total: f64 = kept.iter().sum();
                        if total > 0.0 {
                            kept.iter().map(|v| v / total).collect()
                        } else {
                            p.clone()
                        }
                    })
                    .collect()
            })
            .collect(),
    };
    Ok(ForecastDistribution {
        horizon,
        offsets: model.marginals.iter().map(|m| m.support_offset()).collect(),
        pmf,
        raw_pmf: raw,
    })
}

/// Coordinate-wise argmax of the forecast pmfs (`H × d`), ties to the smaller
/// count.
pub fn point_forecast(dist: &ForecastDistribution) -> CountMatrix {
    let d = dist.offsets.len();
    CountMatrix::from_fn(dist.horizon, d, |h, i| {
        dist.offsets[i] + argmax_first(&dist.pmf[h][i]) as u32
    })
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] * (1.0 + TIE_RTOL) {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marginals::Marginal;
    use crate::model::DfmParams;
    use std::f64::consts::PI;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    const INF: f64 = f64::INFINITY;

    #[test]
    fn rectangle_examples() {
        let one = mvn_rectangle_prob(
            &v(&[0.0]),
            &DMatrix::identity(1, 1),
            &v(&[-INF]),
            &v(&[0.0]),
            1024,
            1,
        )
        .unwrap();
        assert!((one - 0.5).abs() < 1e-12);
        let ind = mvn_rectangle_prob(
            &v(&[0.0, 0.0]),
            &DMatrix::identity(2, 2),
            &v(&[-INF, -INF]),
            &v(&[0.0, 0.0]),
            1024,
            1,
        )
        .unwrap();
        assert!((ind - 0.25).abs() < 1e-6);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let corr = mvn_rectangle_prob(
            &v(&[0.0, 0.0]),
            &cov,
            &v(&[-INF, -INF]),
            &v(&[0.0, 0.0]),
            DEFAULT_QMC_POINTS,
            3,
        )
        .unwrap();
        let exact = 0.25 + 0.5f64.asin() / (2.0 * PI);
        assert!((corr - exact).abs() < 2e-3, "{corr} vs {exact}");
    }

    #[test]
    fn rectangle_is_seed_deterministic_and_accurate_in_higher_dimension() {
        // Equicorrelated orthant: P = ∫ φ(t) Φ(t√ρ/√(1-ρ))^d dt.
        let (d, rho) = (8, 0.4);
        let cov = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho });
        let zero = DVector::zeros(d);
        let lo = DVector::from_element(d, -INF);
        let a = mvn_rectangle_prob(&zero, &cov, &lo, &zero, DEFAULT_QMC_POINTS, 5).unwrap();
        let b = mvn_rectangle_prob(&zero, &cov, &lo, &zero, DEFAULT_QMC_POINTS, 5).unwrap();
        assert_eq!(a, b);
        let k = (rho / (1.0 - rho)).sqrt();
        let n = 20_000;
        let exact: f64 = (0..n)
            .map(|i| {
                let t = -10.0 + 20.0 * (i as f64 + 0.5) / n as f64;
                normal::pdf(t) * normal::cdf(t * k).powi(d as i32) * 20.0 / n as f64
            })
            .sum();
        assert!(((a - exact) / exact).abs() < 1e-2, "{a} vs {exact}");
    }

    #[test]
    fn rectangle_with_singular_covariance() {
        // Z₂ = Z₁ exactly: P(Z₁ ≤ 0, Z₂ ≤ 1) = 1/2.
        let cov = DMatrix::from_element(2, 2, 1.0);
        let p = mvn_rectangle_prob(
            &v(&[0.0, 0.0]),
            &cov,
            &v(&[-INF, -INF]),
            &v(&[0.0, 1.0]),
            4096,
            2,
        )
        .unwrap();
        assert!((p - 0.5).abs() < 1e-3, "{p}");
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(mvn_rectangle_prob(
            &v(&[0.0, 0.0]),
            &bad,
            &v(&[-INF, -INF]),
            &v(&[0.0, 0.0]),
            64,
            1
        )
        .is_err());
    }

    #[test]
    fn truncated_mvn_stays_in_box_and_matches_moments() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 2.0]);
        let tm = TruncatedMvn::new(&cov).unwrap();
        let mean = v(&[0.3, -0.2]);
        let (lo, hi) = ([-0.5, 0.0], [1.0, INF]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let (z, xi) = tm.sample(&mean, &lo, &hi, 10, &mut rng).unwrap();
            assert!(z[0] >= lo[0] && z[0] <= hi[0] && z[1] >= lo[1]);
            let back = &mean + crate::linalg::psd_sqrt(&cov) * xi;
            assert!((back - z).amax() < 1e-10);
        }

        let one = TruncatedMvn::new(&DMatrix::identity(1, 1)).unwrap();
        let n = 100_000;
        let m: f64 = (0..n)
            .map(|_| {
                one.sample(&v(&[0.0]), &[0.0], &[INF], 1, &mut rng)
                    .unwrap()
                    .0[0]
            })
            .sum::<f64>()
            / n as f64;
        assert!((m - (2.0 / PI).sqrt()).abs() < 0.01);
    }

    #[test]
    fn untruncated_gibbs_recovers_moments() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.5]);
        let mean = v(&[1.0, -1.0]);
        let tm = TruncatedMvn::new(&cov).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 100_000;
        let draws: Vec<DVector<f64>> = (0..n)
            .map(|_| {
                tm.sample(&mean, &[-INF, -INF], &[INF, INF], 10, &mut rng)
                    .unwrap()
                    .0
            })
            .collect();
        let m = draws.iter().fold(DVector::zeros(2), |a, z| a + z) / n as f64;
        let mut c = DMatrix::zeros(2, 2);
        for z in &draws {
            let e = z - &m;
            c += &e * e.transpose();
        }
        c /= n as f64;
        for i in 0..2 {
            let se = (cov[(i, i)] / n as f64).sqrt();
            assert!((m[i] - mean[i]).abs() < 3.0 * se * 1.5, "mean {i}");
        }
        // Var of a sample covariance entry ≈ (σ_ii σ_jj + σ_ij²)/n.
        for i in 0..2 {
            for j in 0..2 {
                let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / n as f64).sqrt();
                assert!(
                    (c[(i, j)] - cov[(i, j)]).abs() < 3.0 * se * 1.5,
                    "cov ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn resampling_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = resample(
            &[1.0, 0.0, 0.0, 0.0],
            ResampleStrategy::Systematic,
            &mut rng,
        )
        .unwrap();
        assert_eq!(idx, vec![0; 4]);
        let idx = resample(&[0.25; 4], ResampleStrategy::Systematic, &mut rng).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        let idx = resample(
            &[0.5, 0.5, 0.0, 0.0],
            ResampleStrategy::Systematic,
            &mut rng,
        )
        .unwrap();
        assert_eq!(idx, vec![0, 0, 1, 1]);
        assert!(matches!(
            resample(&[0.0, 0.0], ResampleStrategy::Multinomial, &mut rng),
            Err(Error::WeightDegeneracy(_))
        ));
        let idx = resample(&[0.1, 0.9], ResampleStrategy::Multinomial, &mut rng).unwrap();
        assert_eq!(idx.len(), 2);
    }

    #[test]
    fn ess_bounds() {
        assert!((ess(&[0.25; 4]) - 4.0).abs() < 1e-12);
        assert!((ess(&[1.0, 0.0, 0.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_forecast_ties() {
        let dist = ForecastDistribution {
            horizon: 1,
            offsets: vec![0, 0],
            pmf: vec![vec![vec![0.2, 0.5, 0.3], vec![0.5, 0.5]]],
            raw_pmf: vec![],
        };
        let pf = point_forecast(&dist);
        assert_eq!(pf[(0, 0)], 1);
        assert_eq!(pf[(0, 1)], 0);
    }

    pub(crate) fn toy_model() -> FittedModel {
        let params = DfmParams {
            lambda: DMatrix::from_row_slice(3, 1, &[1.0, 0.8, 0.5]),
            psi: vec![DMatrix::from_element(1, 1, 0.7)],
            sigma_eps: DMatrix::identity(3, 3) * 0.5,
            sigma_eta: DMatrix::from_element(1, 1, 0.5),
        };
        let (params, _) = params.standardized().unwrap();
        FittedModel::from_params(
            params,
            vec![
                Marginal::Poisson { lambda: 2.5 },
                Marginal::Bernoulli { p: 0.4 },
                Marginal::NegBinomial { size: 3, p: 0.4 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_particle_keeps_unit_weight() {
        let m = toy_model();
        let x = CountMatrix::from_row_slice(3, 3, &[1, 0, 2, 3, 1, 4, 2, 1, 0]);
        let opts = SisrOptions {
            particles: 1,
            qmc_points: 256,
            ..Default::default()
        };
        let ens = run_sisr(&x, &m, &opts, 3).unwrap();
        assert_eq!(ens.weights, vec![1.0]);
        assert!(ens.resampled.iter().all(|r| !r));
    }

    #[test]
    fn sisr_is_deterministic_and_in_bins() {
        let m = toy_model();
        let x = CountMatrix::from_row_slice(4, 3, &[1, 0, 2, 3, 1, 4, 2, 1, 0, 0, 0, 1]);
        let opts = SisrOptions {
            particles: 200,
            qmc_points: 512,
            ..Default::default()
        };
        let a = run_sisr(&x, &m, &opts, 7).unwrap();
        let b = run_sisr(&x, &m, &opts, 7).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.latents, b.latents);
        assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        for e in &a.ess_history {
            assert!(*e >= 1.0 - 1e-9 && *e <= 200.0 + 1e-9);
        }
        let th: Vec<_> = m
            .marginals
            .iter()
            .map(|mm| mm.thresholds().unwrap())
            .collect();
        for z in &a.latents {
            for j in 0..3 {
                let (lo, hi) = th[j].bin(x[(3, j)]).unwrap();
                assert!(z[j] >= lo && z[j] <= hi);
            }
        }
    }

    #[test]
    fn forecast_pmfs_normalize_and_approach_marginals() {
        let m = toy_model();
        let x = CountMatrix::from_row_slice(3, 3, &[1, 0, 2, 3, 1, 4, 2, 1, 0]);
        let opts = SisrOptions {
            particles: 100,
            qmc_points: 512,
            ..Default::default()
        };
        let ens = run_sisr(&x, &m, &opts, 1).unwrap();
        let dist = forecast_distribution(&ens, &m, 100, None).unwrap();
        for h in 0..100 {
            for i in 0..3 {
                assert!((dist.raw_pmf[h][i].iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let pf = point_forecast(&dist);
        for (i, mm) in m.marginals.iter().enumerate() {
            let target = mm.pmf_table();
            let diff = dist.pmf[99][i]
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 0.01, "series {i}: {diff}");
            assert_eq!(pf[(99, i)], mm.mode());
        }
    }

    #[test]
    fn unobserved_values_are_excluded() {
        let m = toy_model();
        let x = CountMatrix::from_row_slice(3, 3, &[1, 0, 2, 3, 1, 4, 2, 1, 0]);
        let opts = SisrOptions {
            particles: 50,
            qmc_points: 256,
            ..Default::default()
        };
        let ens = run_sisr(&x, &m, &opts, 1).unwrap();
        let seen = observed_support(&x, &m);
        let dist = forecast_distribution(&ens, &m, 2, Some(&seen)).unwrap();
        assert_eq!(dist.prob(1, 0, 0), 0.0);
        assert!((dist.pmf[0][0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(dist.prob(1, 0, 2) > 0.0);
    }
}
