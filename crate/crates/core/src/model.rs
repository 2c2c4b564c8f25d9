//! Dynamic factor model parameters, implied latent autocovariances, and
//! simulation of `(Y, Z, X)` paths.

use crate::error::{Error, Result};
use crate::linalg::{companion, lyapunov, min_eigenvalue, psd_sqrt, spectral_radius};
use crate::marginals::Marginal;
use crate::normal;
use crate::CountMatrix;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Default number of discarded initial steps in simulation.
pub const DEFAULT_BURN_IN: usize = 500;

const SYM_TOL: f64 = 1e-10;

/// `Z_t = Λ Y_t + ε_t`, `Y_t = Σ_h Ψ_h Y_{t-h} + η_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfmParams {
    pub lambda: DMatrix<f64>,
    pub psi: Vec<DMatrix<f64>>,
    pub sigma_eps: DMatrix<f64>,
    pub sigma_eta: DMatrix<f64>,
}

/// One failed check from [`DfmParams::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape(String),
    Identifiability(String),
    Stability(f64),
    NotSymmetric(&'static str),
    NotPsd(&'static str, f64),
    NotPd(&'static str, f64),
    NotStandardized(f64),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(s) => write!(f, "shape: {s}"),
            Violation::Identifiability(s) => write!(f, "identifiability: {s}"),
            Violation::Stability(rho) => write!(f, "stability: spectral radius {rho:.6} >= 1"),
            Violation::NotSymmetric(m) => write!(f, "{m} is not symmetric"),
            Violation::NotPsd(m, e) => write!(f, "{m} has negative eigenvalue {e:.3e}"),
            Violation::NotPd(m, e) => {
                write!(f, "{m} is not positive definite (min eigenvalue {e:.3e})")
            }
            Violation::NotStandardized(dev) => {
                write!(f, "latent variances deviate from 1 by {dev:.3e}")
            }
        }
    }
}

impl Violation {
    fn into_error(self) -> Error {
        match self {
            Violation::Stability(rho) => Error::Stability(rho),
            Violation::Identifiability(s) => Error::Identifiability(s),
            Violation::Shape(s) => Error::Shape(s),
            other => Error::InvalidParameter(other.to_string()),
        }
    }
}

impl DfmParams {
    pub fn d(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn r(&self) -> usize {
        self.lambda.ncols()
    }

    pub fn p(&self) -> usize {
        self.psi.len()
    }

    /// Reports every violated structural invariant; never panics.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = vec![];
        let (d, r) = (self.d(), self.r());
        if r == 0 || r > d {
            out.push(Violation::Shape(format!(
                "need 1 <= r <= d, got d={d}, r={r}"
            )));
            return out;
        }
        if self.psi.is_empty() {
            out.push(Violation::Shape(
                "need at least one transition matrix".into(),
            ));
        }
        for (h, m) in self.psi.iter().enumerate() {
            if m.shape() != (r, r) {
                out.push(Violation::Shape(format!(
                    "Psi_{} is {:?}, expected ({r}, {r})",
                    h + 1,
                    m.shape()
                )));
            }
        }
        if self.sigma_eps.shape() != (d, d) {
            out.push(Violation::Shape(format!(
                "Sigma_eps is {:?}",
                self.sigma_eps.shape()
            )));
        }
        if self.sigma_eta.shape() != (r, r) {
            out.push(Violation::Shape(format!(
                "Sigma_eta is {:?}",
                self.sigma_eta.shape()
            )));
        }
        if !out.is_empty() {
            return out;
        }
        let top = self.lambda.view((0, 0), (r, r));
        if top != DMatrix::<f64>::identity(r, r) {
            out.push(Violation::Identifiability(
                "top r x r block of Lambda is not the identity".into(),
            ));
        }
        let rho = spectral_radius(&companion(&self.psi));
        if !(rho < 1.0) {
            out.push(Violation::Stability(rho));
        }
        for (name, m) in [
            ("Sigma_eps", &self.sigma_eps),
            ("Sigma_eta", &self.sigma_eta),
        ] {
            if (m - m.transpose()).amax() > SYM_TOL {
                out.push(Violation::NotSymmetric(name));
            }
        }
        let e = min_eigenvalue(&self.sigma_eps);
        if e < -SYM_TOL {
            out.push(Violation::NotPsd("Sigma_eps", e));
        }
        let e = min_eigenvalue(&self.sigma_eta);
        if e < -SYM_TOL {
            out.push(Violation::NotPsd("Sigma_eta", e));
        }
        out
    }

    /// Like [`validate`](Self::validate) but also requires unit latent
    /// variances.
    pub fn validate_standardized(&self) -> Vec<Violation> {
        let mut out = self.validate();
        if out.is_empty() {
            match self.latent_variances() {
                Ok(v) => {
                    let dev = v.iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max);
                    if dev > 1e-8 {
                        out.push(Violation::NotStandardized(dev));
                    }
                }
                Err(_) => out.push(Violation::Stability(1.0)),
            }
        }
        out
    }

    /// First violation as an error.
    pub fn check(&self) -> Result<()> {
        match self.validate().into_iter().next() {
            Some(v) => Err(v.into_error()),
            None => Ok(()),
        }
    }

    /// Stationary covariance of the stacked state `(Y_t, .., Y_{t-p+1})`.
    pub fn state_covariance(&self) -> Result<DMatrix<f64>> {
        let (r, p) = (self.r(), self.p());
        let c = companion(&self.psi);
        let mut q = DMatrix::zeros(r * p, r * p);
        q.view_mut((0, 0), (r, r)).copy_from(&self.sigma_eta);
        lyapunov(&c, &q)
    }

    /// `Σ_Y(h) = E[Y_{t+h} Y_t']` for `h = 0..=max_lag`.
    pub fn factor_acvf(&self, max_lag: usize) -> Result<Vec<DMatrix<f64>>> {
        self.check()?;
        let (r, p) = (self.r(), self.p());
        let s = self.state_covariance()?;
        let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(max_lag + 1);
        for h in 0..=max_lag {
            if h < p {
                // Block (0, h) is E[Y_t Y_{t-h}'].
                out.push(s.view((0, h * r), (r, r)).clone_owned());
            } else {
                let mut acc = DMatrix::zeros(r, r);
                for (k, psi) in self.psi.iter().enumerate() {
                    acc += psi * &out[h - k - 1];
                }
                out.push(acc);
            }
        }
        Ok(out)
    }

    /// Diagonal of `Σ_Z(0) = Λ Σ_Y(0) Λ' + Σ_ε`.
    pub fn latent_variances(&self) -> Result<Vec<f64>> {
        let s0 = &self.factor_acvf(0)?[0];
        let sz = &self.lambda * s0 * self.lambda.transpose() + &self.sigma_eps;
        Ok(sz.diagonal().iter().copied().collect())
    }

    /// Reparametrization with unit-variance `Z` and identity top loadings.
    ///
    /// With `D = diag(Σ_Z(0))` and `D₁` its top `r` block, the returned
    /// parameters describe `D^{-1/2} Z` with factors `D₁^{-1/2} Y`.
    pub fn standardized(&self) -> Result<(DfmParams, Vec<f64>)> {
        let var = self.latent_variances()?;
        let r = self.r();
        let dinv = DMatrix::from_diagonal(&DVector::from_iterator(
            var.len(),
            var.iter().map(|v| 1.0 / v.sqrt()),
        ));
        let d1 = DMatrix::from_diagonal(&DVector::from_iterator(
            r,
            var[..r].iter().map(|v| v.sqrt()),
        ));
        let d1inv = DMatrix::from_diagonal(&DVector::from_iterator(
            r,
            var[..r].iter().map(|v| 1.0 / v.sqrt()),
        ));
        let mut lambda = &dinv * &self.lambda * &d1;
        // Exact identity, free of rounding.
        lambda.view_mut((0, 0), (r, r)).fill_with_identity();
        let params = DfmParams {
            lambda,
            psi: self.psi.iter().map(|m| &d1inv * m * &d1).collect(),
            sigma_eps: &dinv * &self.sigma_eps * &dinv,
            sigma_eta: &d1inv * &self.sigma_eta * &d1inv,
        };
        Ok((params, var))
    }
}

/// Implied latent second-order structure for lags `0..=max_lag`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentAcfSet {
    pub r_z: Vec<DMatrix<f64>>,
    pub sigma_y: Vec<DMatrix<f64>>,
}

/// `R_Z(h)` and `Σ_Y(h)` up to lag `p`.
pub fn stationary_acvf(params: &DfmParams) -> Result<LatentAcfSet> {
    stationary_acvf_to(params, params.p())
}

/// `R_Z(h)` and `Σ_Y(h)` up to an arbitrary lag.
pub fn stationary_acvf_to(params: &DfmParams, max_lag: usize) -> Result<LatentAcfSet> {
    let sigma_y = params.factor_acvf(max_lag)?;
    let l = &params.lambda;
    let sz0 = l * &sigma_y[0] * l.transpose() + &params.sigma_eps;
    let scale: Vec<f64> = sz0.diagonal().iter().map(|v| 1.0 / v.sqrt()).collect();
    if scale.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("latent series with zero variance".into()));
    }
    let standardize = |m: DMatrix<f64>| {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * scale[i] * scale[j])
    };
    let mut r_z = vec![standardize(sz0)];
    for h in 1..=max_lag {
        r_z.push(standardize(l * &sigma_y[h] * l.transpose()));
    }
    let d = params.d();
    for i in 0..d {
        r_z[0][(i, i)] = 1.0;
    }
    Ok(LatentAcfSet { r_z, sigma_y })
}

/// A simulated path. `z` and `y` are on the standardized scale, so
/// `Z = Λ* Y + ε*` with the parameters from [`DfmParams::standardized`].
#[derive(Debug, Clone)]
pub struct Simulation {
    pub x: CountMatrix,
    pub z: DMatrix<f64>,
    pub y: DMatrix<f64>,
    /// Theoretical latent variances used for rescaling.
    pub scales: Vec<f64>,
}

/// Simulates `t_len` observations after `burn_in` steps from `Y = 0`.
pub fn simulate(
    params: &DfmParams,
    marginals: &[Marginal],
    t_len: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Simulation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_with(params, marginals, t_len, burn_in, &mut rng)
}

pub fn simulate_with<R: Rng + ?Sized>(
    params: &DfmParams,
    marginals: &[Marginal],
    t_len: usize,
    burn_in: usize,
    rng: &mut R,
) -> Result<Simulation> {
    params.check()?;
    let d = params.d();
    if marginals.len() != d {
        return Err(Error::Shape(format!(
            "{} marginals for d={d} series",
            marginals.len()
        )));
    }
    let thresholds = marginals
        .iter()
        .map(|m| m.thresholds())
        .collect::<Result<Vec<_>>>()?;
    let scales = params.latent_variances()?;
    let zscale: Vec<f64> = scales.iter().map(|v| 1.0 / v.sqrt()).collect();
    if zscale.iter().any(|s| !s.is_finite()) {
        // Degenerate latent noise: leave Z unscaled.
        return simulate_raw(
            params,
            &thresholds,
            t_len,
            burn_in,
            rng,
            vec![1.0; d],
            scales,
        );
    }
    simulate_raw(params, &thresholds, t_len, burn_in, rng, zscale, scales)
}

fn simulate_raw<R: Rng + ?Sized>(
    params: &DfmParams,
    thresholds: &[crate::marginals::Thresholds],
    t_len: usize,
    burn_in: usize,
    rng: &mut R,
    zscale: Vec<f64>,
    scales: Vec<f64>,
) -> Result<Simulation> {
    let (d, r, p) = (params.d(), params.r(), params.p());
    let eta_root = psd_sqrt(&params.sigma_eta);
    let eps_root = psd_sqrt(&params.sigma_eps);
    let mut lags: Vec<DVector<f64>> = vec![DVector::zeros(r); p];
    let mut x = CountMatrix::zeros(t_len, d);
    let mut z = DMatrix::zeros(t_len, d);
    let mut y = DMatrix::zeros(t_len, r);
    let yscale: Vec<f64> = zscale[..r].to_vec();
    let draw = |n: usize, rng: &mut R| {
        DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
    };
    for step in 0..burn_in + t_len {
        let mut yt = &eta_root * draw(r, rng);
        for (h, psi) in params.psi.iter().enumerate() {
            yt += psi * &lags[h];
        }
        let eps = &eps_root * draw(d, rng);
        lags.rotate_right(1);
        lags[0] = yt.clone();
        if step < burn_in {
            continue;
        }
        let t = step - burn_in;
        let zt = &params.lambda * &yt + eps;
        for i in 0..d {
            let zi = zt[i] * zscale[i];
            z[(t, i)] = zi;
            x[(t, i)] = thresholds[i].count_for(zi);
        }
        for k in 0..r {
            y[(t, k)] = yt[k] * yscale[k];
        }
    }
    Ok(Simulation { x, z, y, scales })
}

/// Transition sets used in the simulation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiSet {
    /// VAR(1) with all diagonal entries 0.7.
    Positive,
    /// VAR(1) with all diagonal entries -0.7.
    Negative,
    /// VAR(2) with diagonals (0.7, -0.4).
    Var2,
    /// VAR(4) with diagonals (0.7, -0.2, 0.3, -0.4).
    Var4,
}

impl PsiSet {
    pub fn diagonals(self) -> &'static [f64] {
        match self {
            PsiSet::Positive => &[0.7],
            PsiSet::Negative => &[-0.7],
            PsiSet::Var2 => &[0.7, -0.4],
            PsiSet::Var4 => &[0.7, -0.2, 0.3, -0.4],
        }
    }

    pub fn matrices(self, r: usize) -> Vec<DMatrix<f64>> {
        self.diagonals()
            .iter()
            .map(|&c| DMatrix::identity(r, r) * c)
            .collect()
    }
}

/// Marginal groups used in the simulation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalGroup {
    /// Bernoulli with p = 0.2, 0.4, 0.7.
    Bernoulli,
    /// Poisson with rate 0.1, 1, 10.
    Poisson,
    /// Negative binomial with size 3 and p = 0.2, 0.4, 0.7.
    NegBinomial,
}

impl MarginalGroup {
    pub fn levels(self) -> [Marginal; 3] {
        match self {
            MarginalGroup::Bernoulli => [0.2, 0.4, 0.7].map(|p| Marginal::Bernoulli { p }),
            MarginalGroup::Poisson => [0.1, 1.0, 10.0].map(|lambda| Marginal::Poisson { lambda }),
            MarginalGroup::NegBinomial => {
                [0.2, 0.4, 0.7].map(|p| Marginal::NegBinomial { size: 3, p })
            }
        }
    }

    /// Splits `d` series into three consecutive groups of (nearly) equal size.
    pub fn assign(self, d: usize) -> Vec<Marginal> {
        let levels = self.levels();
        (0..d).map(|i| levels[(i * 3 / d).min(2)].clone()).collect()
    }

    pub fn family(self) -> crate::marginals::Family {
        self.levels()[0].family()
    }
}

/// Draws the simulation-study parameters: identity-topped loadings with
/// `U(0,1)` lower block, `Σ_ε = I`, `Σ_η = I`.
pub fn preset_params<R: Rng + ?Sized>(d: usize, r: usize, psi: PsiSet, rng: &mut R) -> DfmParams {
    let mut lambda = DMatrix::zeros(d, r);
    lambda.view_mut((0, 0), (r, r)).fill_with_identity();
    for i in r..d {
        for j in 0..r {
            lambda[(i, j)] = rng.random::<f64>();
        }
    }
    DfmParams {
        lambda,
        psi: psi.matrices(r),
        sigma_eps: DMatrix::identity(d, d),
        sigma_eta: DMatrix::identity(r, r),
    }
}

/// Latent quantile transform of a single value; used by tests and tools.
pub fn count_of(marginal: &Marginal, z: f64) -> Result<u32> {
    marginal.quantile(normal::cdf(z).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}
