//! Kalman filter for the latent factor process in companion form.
//!
//! The covariance recursions do not depend on the data, so they are
//! computed once and shared by every particle of the forecaster; only the
//! state means are propagated per path.

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jitter, companion, lyapunov, spectral_radius, symmetrize};
use crate::model::DfmParams;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Cap on geometric-series terms for the VAR(1) stationary covariance.
const MAX_SERIES_TERMS: usize = 5000;

/// The VAR(p) factor model as a VAR(1) on the stacked state
/// `(Y_t, .., Y_{t-p+1})` observed through `[Λ 0 .. 0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    pub psi_c: DMatrix<f64>,
    pub lambda_c: DMatrix<f64>,
    pub sigma_eta_c: DMatrix<f64>,
    pub sigma_eps: DMatrix<f64>,
    /// Stationary state covariance `Var(Y_0)` (stacked).
    pub q0: DMatrix<f64>,
    pub r: usize,
    pub p: usize,
    /// `Σ_ε⁻¹`, present when the low-rank inversion path is used.
    sigma_eps_inv: Option<DMatrix<f64>>,
}

impl StateSpace {
    pub fn new(params: &DfmParams) -> Result<Self> {
        let (d, r, p) = (params.d(), params.r(), params.p());
        if params.psi.iter().any(|m| m.shape() != (r, r)) || params.sigma_eps.shape() != (d, d) {
            return Err(Error::Shape("inconsistent model dimensions".into()));
        }
        let psi_c = companion(&params.psi);
        let rho = spectral_radius(&psi_c);
        if !(rho < 1.0) {
            return Err(Error::Stability(rho));
        }
        let mut lambda_c = DMatrix::zeros(d, r * p);
        lambda_c.view_mut((0, 0), (d, r)).copy_from(&params.lambda);
        let mut sigma_eta_c = DMatrix::zeros(r * p, r * p);
        sigma_eta_c
            .view_mut((0, 0), (r, r))
            .copy_from(&params.sigma_eta);

        let q0 = if p == 1 {
            geometric_covariance(&psi_c, &sigma_eta_c)?
        } else {
            lyapunov(&psi_c, &sigma_eta_c)?
        };

        let sigma_eps_inv = if d > 3 * r {
            nalgebra::Cholesky::new(symmetrize(&params.sigma_eps)).map(|c| c.inverse())
        } else {
            None
        };
        Ok(StateSpace {
            psi_c,
            lambda_c,
            sigma_eta_c,
            sigma_eps: params.sigma_eps.clone(),
            q0,
            r,
            p,
            sigma_eps_inv,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.psi_c.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.lambda_c.nrows()
    }

    /// True when `R̂⁻¹` is formed by the Woodbury identity.
    pub fn uses_low_rank_inverse(&self) -> bool {
        self.sigma_eps_inv.is_some()
    }

    /// Covariances for one forecast/update cycle from `Q̃_{t-1|t-1}`.
    pub fn covariance_step(&self, q_filt_prev: &DMatrix<f64>) -> Result<KalmanCovs> {
        let q_pred =
            symmetrize(&(&self.psi_c * q_filt_prev * self.psi_c.transpose() + &self.sigma_eta_c));
        self.update_covariances(q_pred)
    }

    fn update_covariances(&self, q_pred: DMatrix<f64>) -> Result<KalmanCovs> {
        let lq = &self.lambda_c * &q_pred;
        let r_pred = symmetrize(&(&lq * self.lambda_c.transpose() + &self.sigma_eps));
        // K' = R̂⁻¹ Λ Q̂
        let gain_t = self.solve_innovation(&q_pred, &r_pred, &lq)?;
        let gain = gain_t.transpose();
        let q_filt = symmetrize(&(&q_pred - &gain * &lq));
        Ok(KalmanCovs {
            q_pred,
            q_filt,
            r_pred,
            gain,
            converged: false,
            iterations: 0,
        })
    }

    /// `R̂⁻¹ B` for the innovation covariance `R̂ = ΛQ̂Λ' + Σ_ε`.
    fn solve_innovation(
        &self,
        q_pred: &DMatrix<f64>,
        r_pred: &DMatrix<f64>,
        b: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        if let Some(se_inv) = &self.sigma_eps_inv {
            // R̂⁻¹ = S⁻¹ − S⁻¹Λ (I + Q₁₁ Λ'S⁻¹Λ)⁻¹ Q₁₁ Λ'S⁻¹ with Λ the d×r loadings.
            let r = self.r;
            let lam = self.lambda_c.columns(0, r);
            let q11 = q_pred.view((0, 0), (r, r));
            let sl = se_inv * lam;
            let core = DMatrix::identity(r, r) + q11 * lam.transpose() * &sl;
            let slb = se_inv * b;
            let inner = q11 * lam.transpose() * &slb;
            if let Some(x) = core.lu().solve(&inner) {
                return Ok(slb - sl * x);
            }
        }
        let chol = cholesky_jitter(r_pred)
            .map_err(|_| Error::Numeric("innovation covariance is singular".into()))?;
        Ok(chol.solve(b))
    }

    /// Initial covariances with `Q̃_{0|0} = Var(Y_0)`.
    pub fn initial_covs(&self) -> KalmanCovs {
        let n = self.state_dim();
        let d = self.obs_dim();
        KalmanCovs {
            q_pred: self.q0.clone(),
            q_filt: self.q0.clone(),
            r_pred: DMatrix::zeros(d, d),
            gain: DMatrix::zeros(n, d),
            converged: false,
            iterations: 0,
        }
    }

    /// Forecast step for a state mean: `Ŷ = Ψ_c ỹ`, `Ẑ = Λ_c Ŷ`.
    pub fn forecast_mean(&self, y_filt: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let y_pred = &self.psi_c * y_filt;
        let z_pred = &self.lambda_c * &y_pred;
        (y_pred, z_pred)
    }

    /// Update step for a state mean given the current gain.
    pub fn update_mean(
        &self,
        covs: &KalmanCovs,
        y_pred: &DVector<f64>,
        z_pred: &DVector<f64>,
        z_obs: &DVector<f64>,
    ) -> DVector<f64> {
        y_pred + &covs.gain * (z_obs - z_pred)
    }
}

/// `Σ_{m>=0} Ψ^m Q (Ψ')^m`, summed until a term's norm falls below 1e-12.
fn geometric_covariance(psi: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut sum = q.clone();
    let mut term = q.clone();
    for _ in 0..MAX_SERIES_TERMS {
        term = psi * term * psi.transpose();
        sum += &term;
        if term.norm() < 1e-12 {
            return Ok(symmetrize(&sum));
        }
    }
    // Slowly mixing chains: fall back to the doubling solver.
    lyapunov(psi, q)
}

pub fn build_state_space(params: &DfmParams) -> Result<StateSpace> {
    StateSpace::new(params)
}

/// Covariances of one Kalman cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanCovs {
    /// `Q̂_{t|t-1}`
    pub q_pred: DMatrix<f64>,
    /// `Q̃_{t|t}`
    pub q_filt: DMatrix<f64>,
    /// `R̂_{t|t-1}`
    pub r_pred: DMatrix<f64>,
    /// `K_t`
    pub gain: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Output of the forecast half of [`kalman_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepForecast {
    pub y_pred: DVector<f64>,
    pub z_pred: DVector<f64>,
}

/// One forecast/update cycle. `covs.q_filt` is taken as `Q̃_{t-1|t-1}`.
pub fn kalman_step(
    ss: &StateSpace,
    covs: &KalmanCovs,
    y_filt: &DVector<f64>,
    z_obs: &DVector<f64>,
) -> Result<(StepForecast, KalmanCovs, DVector<f64>)> {
    if z_obs.len() != ss.obs_dim() || y_filt.len() != ss.state_dim() {
        return Err(Error::Shape(
            "state or observation has the wrong length".into(),
        ));
    }
    let next = ss.covariance_step(&covs.q_filt)?;
    let (y_pred, z_pred) = ss.forecast_mean(y_filt);
    let y_new = ss.update_mean(&next, &y_pred, &z_pred, z_obs);
    Ok((StepForecast { y_pred, z_pred }, next, y_new))
}

/// Iterates the prediction covariance to its Riccati fixed point starting
/// from `Q̂_{1|0} = Ψ Q₀ Ψ' + Σ_η`.
pub fn dare_converge(ss: &StateSpace, tol: f64, max_iter: usize) -> Result<KalmanCovs> {
    let mut covs = ss.covariance_step(&ss.q0)?;
    for it in 1..=max_iter {
        let q_next =
            symmetrize(&(&ss.psi_c * &covs.q_filt * ss.psi_c.transpose() + &ss.sigma_eta_c));
        let change = (&q_next - &covs.q_pred).norm();
        if change < tol {
            covs.converged = true;
            covs.iterations = it;
            return Ok(covs);
        }
        covs = ss.update_covariances(q_next)?;
        covs.iterations = it;
    }
    Ok(covs)
}

/// `h`-step prediction from time `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub y: DVector<f64>,
    pub q: DMatrix<f64>,
    pub z: DVector<f64>,
    pub r: DMatrix<f64>,
}

/// Shared `h`-step covariances `(Q̂_{T+h|T}, R̂_{T+h|T})` for `h = 1..=horizon`.
pub fn predict_covariances(
    ss: &StateSpace,
    q_filt: &DMatrix<f64>,
    horizon: usize,
) -> Vec<(DMatrix<f64>, DMatrix<f64>)> {
    let mut q = q_filt.clone();
    (0..horizon)
        .map(|_| {
            q = symmetrize(&(&ss.psi_c * &q * ss.psi_c.transpose() + &ss.sigma_eta_c));
            let r = symmetrize(&(&ss.lambda_c * &q * ss.lambda_c.transpose() + &ss.sigma_eps));
            (q.clone(), r)
        })
        .collect()
}

pub fn predict_horizon(
    ss: &StateSpace,
    covs: &KalmanCovs,
    y_filt: &DVector<f64>,
    horizon: usize,
) -> Vec<Prediction> {
    let covs_h = predict_covariances(ss, &covs.q_filt, horizon);
    let mut y = y_filt.clone();
    covs_h
        .into_iter()
        .map(|(q, r)| {
            y = &ss.psi_c * &y;
            let z = &ss.lambda_c * &y;
            Prediction {
                y: y.clone(),
                q,
                z,
                r,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar(psi: f64, eta: f64, eps: f64) -> DfmParams {
        DfmParams {
            lambda: DMatrix::identity(1, 1),
            psi: vec![DMatrix::from_element(1, 1, psi)],
            sigma_eps: DMatrix::from_element(1, 1, eps),
            sigma_eta: DMatrix::from_element(1, 1, eta),
        }
    }

    #[test]
    fn companion_shapes_and_q0() {
        let ss = StateSpace::new(&scalar(0.7, 1.0, 1.0)).unwrap();
        assert_eq!(ss.psi_c, DMatrix::from_element(1, 1, 0.7));
        assert!((ss.q0[(0, 0)] - 1.0 / 0.51).abs() < 1e-10);

        let mut p = scalar(0.5, 1.0, 1.0);
        p.psi.push(DMatrix::from_element(1, 1, -0.2));
        let ss = StateSpace::new(&p).unwrap();
        assert_eq!(
            ss.psi_c,
            DMatrix::from_row_slice(2, 2, &[0.5, -0.2, 1.0, 0.0])
        );
        let resid = &ss.q0 - &ss.psi_c * &ss.q0 * ss.psi_c.transpose() - &ss.sigma_eta_c;
        assert!(resid.norm() < 1e-10);
        assert!(matches!(
            StateSpace::new(&scalar(1.2, 1.0, 1.0)),
            Err(Error::Stability(_))
        ));
    }

    #[test]
    fn perfect_observation() {
        let p = DfmParams {
            lambda: DMatrix::identity(2, 2),
            psi: vec![DMatrix::identity(2, 2) * 0.5],
            sigma_eps: DMatrix::zeros(2, 2),
            sigma_eta: DMatrix::identity(2, 2),
        };
        let ss = StateSpace::new(&p).unwrap();
        let z = DVector::from_vec(vec![0.3, -1.2]);
        let (_, covs, y) = kalman_step(&ss, &ss.initial_covs(), &DVector::zeros(2), &z).unwrap();
        assert!((&covs.gain - DMatrix::<f64>::identity(2, 2)).amax() < 1e-8);
        assert!((y - z).amax() < 1e-8);
        assert!(covs.q_filt.amax() < 1e-8);
    }

    #[test]
    fn uninformative_observation() {
        let ss = StateSpace::new(&scalar(0.7, 1.0, 1e12)).unwrap();
        let y0 = DVector::from_element(1, 2.0);
        let (fc, covs, y) = kalman_step(
            &ss,
            &ss.initial_covs(),
            &y0,
            &DVector::from_element(1, 50.0),
        )
        .unwrap();
        assert!(covs.gain.amax() < 1e-10);
        assert!((y - fc.y_pred).amax() < 1e-8);
    }

    fn random_model(rng: &mut ChaCha8Rng, d: usize, r: usize, p: usize) -> DfmParams {
        loop {
            let mut lambda = DMatrix::from_fn(d, r, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            lambda.view_mut((0, 0), (r, r)).fill_with_identity();
            let psi: Vec<DMatrix<f64>> = (0..p)
                .map(|_| DMatrix::from_fn(r, r, |_, _| (rng.random::<f64>() - 0.5) * 0.8))
                .collect();
            let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
            let b = DMatrix::from_fn(r, r, |_, _| rng.random::<f64>() - 0.5);
            let params = DfmParams {
                lambda,
                psi,
                sigma_eps: &a * a.transpose() + DMatrix::identity(d, d) * 0.1,
                sigma_eta: &b * b.transpose() + DMatrix::identity(r, r) * 0.5,
            };
            if params.validate().is_empty() && spectral_radius(&companion(&params.psi)) < 0.95 {
                return params;
            }
        }
    }

    /// Joint covariance of `(Z_1..Z_T)` stacked, from the factor ACVF.
    fn joint_cov(params: &DfmParams, t: usize) -> DMatrix<f64> {
        let d = params.d();
        let g = params.factor_acvf(t).unwrap();
        let l = &params.lambda;
        DMatrix::from_fn(t * d, t * d, |a, b| {
            let (s, i) = (a / d, a % d);
            let (u, j) = (b / d, b % d);
            let block = if s >= u {
                l * &g[s - u] * l.transpose()
            } else {
                l * g[u - s].transpose() * l.transpose()
            };
            block[(i, j)]
                + if s == u {
                    params.sigma_eps[(i, j)]
                } else {
                    0.0
                }
        })
    }

    fn simulate_latent(params: &DfmParams, t: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
        let cov = joint_cov(params, t);
        let n_all = cov.nrows();
        let l = cov.cholesky().unwrap().l();
        let n = DVector::from_fn(n_all, |_, _| rng.sample(StandardNormal));
        let z = l * n;
        let d = params.d();
        (0..t).map(|s| z.rows(s * d, d).clone_owned()).collect()
    }

    #[test]
    fn one_step_predictions_match_gaussian_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..6 {
            let (d, r, p) = (2 + case % 3, 1 + case % 2, 1 + (case / 2) % 2);
            let params = random_model(&mut rng, d.max(r), r, p);
            let t = 15;
            let zs = simulate_latent(&params, t, &mut rng);
            let ss = StateSpace::new(&params).unwrap();
            let cov = joint_cov(&params, t);
            let mut covs = ss.initial_covs();
            let mut y = DVector::zeros(ss.state_dim());
            for s in 0..t {
                let (fc, next, y_new) = kalman_step(&ss, &covs, &y, &zs[s]).unwrap();
                let dd = params.d();
                let expected = if s == 0 {
                    DVector::zeros(dd)
                } else {
                    let past = s * dd;
                    let s11 = cov.view((0, 0), (past, past)).clone_owned();
                    let s21 = cov.view((past, 0), (dd, past)).clone_owned();
                    let zpast = DVector::from_iterator(
                        past,
                        zs[..s].iter().flat_map(|v| v.iter().copied()),
                    );
                    s21 * s11.lu().solve(&zpast).unwrap()
                };
                assert!((fc.z_pred - expected).amax() < 1e-8, "case {case} t={s}");
                assert!(min_eigenvalue(&next.q_filt) > -1e-10);
                covs = next;
                y = y_new;
            }
        }
    }

    #[test]
    fn filtered_means_match_conditioning_d3_r1() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = random_model(&mut rng, 3, 1, 1);
        let t = 20;
        let zs = simulate_latent(&params, t, &mut rng);
        let ss = StateSpace::new(&params).unwrap();
        let cov = joint_cov(&params, t);
        let g = params.factor_acvf(t).unwrap();
        let mut covs = ss.initial_covs();
        let mut y = DVector::zeros(1);
        for s in 0..t {
            let (_, next, y_new) = kalman_step(&ss, &covs, &y, &zs[s]).unwrap();
            let n = (s + 1) * 3;
            // Cov(Y_s, Z_u) = Σ_Y(s-u) Λ'
            let cyz = DMatrix::from_fn(1, n, |_, b| {
                let (u, j) = (b / 3, b % 3);
                (&g[s - u] * params.lambda.transpose())[(0, j)]
            });
            let zpast = DVector::from_iterator(n, zs[..=s].iter().flat_map(|v| v.iter().copied()));
            let s11 = cov.view((0, 0), (n, n)).clone_owned();
            let expected = cyz * s11.lu().solve(&zpast).unwrap();
            assert!((&y_new - expected).amax() < 1e-8, "t={s}");
            covs = next;
            y = y_new;
        }
    }

    #[test]
    fn low_rank_inverse_agrees_with_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = random_model(&mut rng, 8, 2, 1);
        let ss = StateSpace::new(&params).unwrap();
        assert!(ss.uses_low_rank_inverse());
        let mut direct = ss.clone();
        direct.sigma_eps_inv = None;
        let a = ss.covariance_step(&ss.q0).unwrap();
        let b = direct.covariance_step(&ss.q0).unwrap();
        assert!((a.gain - b.gain).amax() < 1e-10);
    }

    #[test]
    fn dare_scalar_matches_quadratic_root() {
        let (psi, lam) = (0.7, 1.3);
        let ss = StateSpace::new(&scalar(psi, lam, lam)).unwrap();
        let covs = dare_converge(&ss, 1e-12, 100).unwrap();
        assert!(covs.converged);
        // q = ψ²(q − q²/(q+λ)) + λ  ⇔  q² + (λ − ψ²λ − λ)q − λ² = 0 ⇒ q² − ψ²λ q − λ² = 0.
        let b = -psi * psi * lam;
        let root = (-b + (b * b + 4.0 * lam * lam).sqrt()) / 2.0;
        assert!((covs.q_pred[(0, 0)] - root).abs() < 1e-10);
    }

    #[test]
    fn dare_white_noise_and_residual() {
        let ss = StateSpace::new(&scalar(0.0, 2.0, 1.0)).unwrap();
        let covs = dare_converge(&ss, 1e-12, 100).unwrap();
        assert!(covs.converged && covs.iterations <= 2);
        assert!((covs.q_pred[(0, 0)] - 2.0).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = random_model(&mut rng, 4, 2, 2);
        let ss = StateSpace::new(&params).unwrap();
        let covs = dare_converge(&ss, 1e-12, 500).unwrap();
        assert!(covs.converged);
        let next = ss.covariance_step(&covs.q_filt).unwrap();
        assert!((next.q_pred - &covs.q_pred).norm() < 1e-10);
    }

    #[test]
    fn prediction_limits() {
        let p = DfmParams {
            lambda: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.4, 0.6]),
            psi: vec![DMatrix::identity(2, 2) * 0.7],
            sigma_eps: DMatrix::identity(3, 3),
            sigma_eta: DMatrix::identity(2, 2),
        };
        let ss = StateSpace::new(&p).unwrap();
        let covs = ss.covariance_step(&ss.q0).unwrap();
        let y = DVector::from_vec(vec![2.0, -1.0]);
        let preds = predict_horizon(&ss, &covs, &y, 200);
        let last = preds.last().unwrap();
        assert!(last.y.amax() < 1e-6);
        assert!((&last.q - &ss.q0).amax() < 1e-6);

        let (fc, _, _) = kalman_step(&ss, &covs, &y, &DVector::zeros(3)).unwrap();
        assert!((&preds[0].z - fc.z_pred).amax() < 1e-14);

        let mut w = p.clone();
        w.psi[0] = DMatrix::zeros(2, 2);
        let ss = StateSpace::new(&w).unwrap();
        let expected = &w.lambda * &w.sigma_eta * w.lambda.transpose() + &w.sigma_eps;
        for pr in predict_horizon(&ss, &ss.initial_covs(), &y, 5) {
            assert!(pr.y.amax() == 0.0);
            assert!((&pr.r - &expected).amax() < 1e-12);
        }
    }
}
