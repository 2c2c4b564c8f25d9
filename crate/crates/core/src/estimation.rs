//! Moment-based estimation: sample correlations, inverse links, PCA of the
//! latent correlation matrix, and Yule-Walker for the factor VAR.

use crate::error::{Error, Result};
use crate::linalg::{condition_number, min_eigenvalue, psd_clip, sym_eigen_desc, symmetrize};
use crate::link::{LinkCache, LinkGrid, DEFAULT_KNOTS};
use crate::marginals::{fit_marginal, Family, Marginal, DEFAULT_HERMITE_ORDER};
use crate::model::{stationary_acvf_to, DfmParams, LatentAcfSet};
use crate::CountMatrix;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Toeplitz systems with a larger condition number are rejected.
pub const MAX_TOEPLITZ_COND: f64 = 1e12;

/// Margin added above `|λ_min|` when shifting an indefinite correlation matrix.
pub const PSD_SHIFT_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub hermite_order: usize,
    pub knots: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            hermite_order: DEFAULT_HERMITE_ORDER,
            knots: DEFAULT_KNOTS,
        }
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub params: DfmParams,
    pub marginals: Vec<Marginal>,
    /// `R̂_Z(0..=p)` and `Σ̂_Y(0..=p)` as used by estimation.
    pub latent_acf: LatentAcfSet,
    /// Eigenvalue shift applied to the forecasting copy of `R̂_Z(0)`.
    pub psd_shift: f64,
    /// Eigenvalues of `R̂_Z(0)` in descending order.
    pub eigenvalues: Vec<f64>,
}

impl FittedModel {
    /// Wraps known parameters (no sampling error, no shift).
    pub fn from_params(params: DfmParams, marginals: Vec<Marginal>) -> Result<Self> {
        if marginals.len() != params.d() {
            return Err(Error::Shape(format!(
                "{} marginals for {} series",
                marginals.len(),
                params.d()
            )));
        }
        let latent_acf = stationary_acvf_to(&params, params.p())?;
        let eigenvalues = sym_eigen_desc(&latent_acf.r_z[0]).0;
        Ok(FittedModel {
            params,
            marginals,
            latent_acf,
            psd_shift: 0.0,
            eigenvalues,
        })
    }

    /// `R̂_Z(0)` after the eigenvalue shift, rescaled to unit diagonal.
    pub fn forecast_rz0(&self) -> DMatrix<f64> {
        let c = self.psd_shift;
        let d = self.latent_acf.r_z[0].nrows();
        (&self.latent_acf.r_z[0] + DMatrix::identity(d, d) * c) / (1.0 + c)
    }

    /// Parameters whose implied `Var(Z)` equals [`forecast_rz0`](Self::forecast_rz0).
    ///
    /// The shift `c` enters as `Σ_ε ← (Σ̂_ε + cI)/(1+c)` and
    /// `Σ_η ← Σ̂_η/(1+c)`; the transitions are unchanged.
    pub fn forecast_params(&self) -> DfmParams {
        let c = self.psd_shift;
        let d = self.params.d();
        let p = &self.params;
        DfmParams {
            lambda: p.lambda.clone(),
            psi: p.psi.clone(),
            sigma_eps: psd_clip(&((&p.sigma_eps + DMatrix::identity(d, d) * c) / (1.0 + c))),
            sigma_eta: psd_clip(&(&p.sigma_eta / (1.0 + c))),
        }
    }
}

/// `R̂_X(h)_{ij}` = sample correlation of `(X_{i,t+h}, X_{j,t})` with
/// full-sample means, variances and denominator `T`.
pub fn sample_cross_correlation(x: &DMatrix<f64>, h: usize) -> Result<DMatrix<f64>> {
    let (t, d) = x.shape();
    if h >= t {
        return Err(Error::InvalidParameter(format!(
            "lag {h} >= sample length {t}"
        )));
    }
    let (centered, sd) = standardize_columns(x)?;
    let mut out = centered.rows(h, t - h).transpose() * centered.rows(0, t - h);
    for i in 0..d {
        for j in 0..d {
            out[(i, j)] /= t as f64 * sd[i] * sd[j];
        }
    }
    if h == 0 {
        out = symmetrize(&out);
        out.fill_diagonal(1.0);
    }
    Ok(out)
}

/// Cross-correlation at lag `h` using only the rows in `segments`
/// (half-open `(start, end)` ranges). Means and variances pool all
/// segment rows; lagged pairs never straddle two segments. The denominator
/// is the pooled row count.
pub fn segment_cross_correlation(
    x: &DMatrix<f64>,
    segments: &[(usize, usize)],
    h: usize,
) -> Result<DMatrix<f64>> {
    let d = x.ncols();
    let n: usize = segments.iter().map(|(a, b)| b - a).sum();
    if n == 0 {
        return Err(Error::EmptyInput("no rows in segments".into()));
    }
    if segments.iter().all(|(a, b)| b - a <= h) {
        return Err(Error::InvalidParameter(format!(
            "lag {h} exceeds every segment"
        )));
    }
    let mut mean = vec![0.0; d];
    for &(a, b) in segments {
        for t in a..b {
            for j in 0..d {
                mean[j] += x[(t, j)];
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for &(a, b) in segments {
        for t in a..b {
            for j in 0..d {
                var[j] += (x[(t, j)] - mean[j]).powi(2);
            }
        }
    }
    let sd: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    if let Some(j) = sd.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::DegenerateSeries(format!("column {j} is constant")));
    }
    let mut out = DMatrix::zeros(d, d);
    for &(a, b) in segments {
        if b - a <= h {
            continue;
        }
        let c = DMatrix::from_fn(b - a, d, |t, j| x[(a + t, j)] - mean[j]);
        out += c.rows(h, b - a - h).transpose() * c.rows(0, b - a - h);
    }
    for i in 0..d {
        for j in 0..d {
            out[(i, j)] /= n as f64 * sd[i] * sd[j];
        }
    }
    if h == 0 {
        out = symmetrize(&out);
        out.fill_diagonal(1.0);
    }
    Ok(out)
}

fn standardize_columns(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (t, d) = x.shape();
    let mut centered = x.clone();
    let mut sd = vec![0.0; d];
    for j in 0..d {
        let mean = x.column(j).sum() / t as f64;
        let mut ss = 0.0;
        for i in 0..t {
            let v = x[(i, j)] - mean;
            centered[(i, j)] = v;
            ss += v * v;
        }
        sd[j] = (ss / t as f64).sqrt();
        if !(sd[j] > 0.0) {
            return Err(Error::DegenerateSeries(format!("column {j} is constant")));
        }
    }
    Ok((centered, sd))
}

/// Output of [`pca_factor_estimate`].
#[derive(Debug, Clone, PartialEq)]
pub struct PcaEstimate {
    pub lambda: DMatrix<f64>,
    pub sigma_y0: DMatrix<f64>,
    pub sigma_eps: DMatrix<f64>,
    /// All eigenvalues of the input, descending.
    pub eigenvalues: Vec<f64>,
    /// Leading `r` eigenvectors.
    pub u_r: DMatrix<f64>,
}

/// Splits `R̂_Z(0)` into a rank-`r` factor part and a residual.
///
/// With `B = U_r E_r^{1/2}` split into top `B₁` (r×r) and bottom `B₂`,
/// `Λ̂ = [I; B₂B₁⁻¹]`, `Σ̂_Y(0) = B₁B₁'` and `Σ̂_ε = R − U_rE_rU_r'`.
pub fn pca_factor_estimate(rz0: &DMatrix<f64>, r: usize) -> Result<PcaEstimate> {
    let d = rz0.nrows();
    if rz0.ncols() != d {
        return Err(Error::Shape(
            "latent correlation matrix must be square".into(),
        ));
    }
    if r == 0 || r >= d {
        return Err(Error::Rank(format!("need 1 <= r < d, got r={r}, d={d}")));
    }
    let (vals, vecs) = sym_eigen_desc(rz0);
    if !(vals[r - 1] > 0.0) {
        return Err(Error::Rank(format!(
            "eigenvalue {} of the latent correlation is {:.3e}, not positive",
            r,
            vals[r - 1]
        )));
    }
    let u_r = vecs.columns(0, r).clone_owned();
    let mut b = u_r.clone();
    for k in 0..r {
        let s = vals[k].sqrt();
        b.column_mut(k).scale_mut(s);
    }
    let b1 = b.rows(0, r).clone_owned();
    let cond = condition_number(&b1);
    let b1_inv = b1
        .clone()
        .try_inverse()
        .filter(|_| cond < 1e12)
        .ok_or_else(|| {
            Error::Identifiability(format!(
                "top block of the leading eigenvectors is singular (condition {cond:.3e})"
            ))
        })?;
    let mut lambda = DMatrix::zeros(d, r);
    lambda.view_mut((0, 0), (r, r)).fill_with_identity();
    if d > r {
        let lower = b.rows(r, d - r) * &b1_inv;
        lambda.view_mut((r, 0), (d - r, r)).copy_from(&lower);
    }
    let sigma_y0 = symmetrize(&(&b1 * b1.transpose()));
    let sigma_eps = symmetrize(&(rz0 - &b * b.transpose()));
    Ok(PcaEstimate {
        lambda,
        sigma_y0,
        sigma_eps,
        eigenvalues: vals,
        u_r,
    })
}

/// `Σ̂_Y(h) = (Λ̂'Λ̂)⁻¹ Λ̂' R̂_Z(h) Λ̂ (Λ̂'Λ̂)⁻¹`.
pub fn factor_lag_cov(lambda: &DMatrix<f64>, rzh: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = lambda.transpose() * lambda;
    let ginv = gram
        .try_inverse()
        .ok_or_else(|| Error::Singular("loadings Gram matrix".into()))?;
    let proj = &ginv * lambda.transpose();
    Ok(&proj * rzh * proj.transpose())
}

/// Solves the block Toeplitz Yule-Walker system for `Ψ₁..Ψ_p` given
/// `Σ_Y(0..=p)` and returns `Σ_η = Σ_Y(0) − Σ_h Ψ_h Σ_Y(h)'`.
pub fn yule_walker(sigma_y: &[DMatrix<f64>]) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
    if sigma_y.len() < 2 {
        return Err(Error::InvalidParameter(
            "need Sigma_Y at lags 0..=p with p >= 1".into(),
        ));
    }
    let p = sigma_y.len() - 1;
    let r = sigma_y[0].nrows();
    let gamma = |lag: isize| -> DMatrix<f64> {
        if lag >= 0 {
            sigma_y[lag as usize].clone()
        } else {
            sigma_y[(-lag) as usize].transpose()
        }
    };
    // Row block h, column block k: Σ_Y(h-k)' = Σ_Y(k-h).
    let mut g = DMatrix::zeros(r * p, r * p);
    let mut rhs = DMatrix::zeros(r * p, r);
    for h in 0..p {
        for k in 0..p {
            g.view_mut((h * r, k * r), (r, r))
                .copy_from(&gamma(k as isize - h as isize));
        }
        rhs.view_mut((h * r, 0), (r, r))
            .copy_from(&sigma_y[h + 1].transpose());
    }
    let cond = condition_number(&g);
    if !(cond < MAX_TOEPLITZ_COND) {
        return Err(Error::NearSingularToeplitz { cond });
    }
    let sol = g
        .lu()
        .solve(&rhs)
        .ok_or(Error::NearSingularToeplitz { cond })?;
    let psi: Vec<DMatrix<f64>> = (0..p)
        .map(|h| sol.view((h * r, 0), (r, r)).transpose())
        .collect();
    let mut eta = sigma_y[0].clone();
    for (h, m) in psi.iter().enumerate() {
        eta -= m * sigma_y[h + 1].transpose();
    }
    Ok((psi, symmetrize(&eta)))
}

/// Fits marginals to each column.
pub fn fit_marginals(x: &CountMatrix, families: &[Family]) -> Result<Vec<Marginal>> {
    if families.len() != x.ncols() {
        return Err(Error::Shape(format!(
            "{} families for {} series",
            families.len(),
            x.ncols()
        )));
    }
    families
        .iter()
        .enumerate()
        .map(|(j, fam)| {
            let col: Vec<u32> = x.column(j).iter().copied().collect();
            fit_marginal(&col, *fam).map_err(|e| match e {
                Error::DegenerateMarginal(msg) => {
                    Error::DegenerateMarginal(format!("series {j}: {msg}"))
                }
                other => other,
            })
        })
        .collect()
}

/// `R̂_Z(h) = L⁻¹(R̂_X(h))` for `h = 0..=max_lag`.
pub fn latent_correlations(
    x: &DMatrix<f64>,
    links: &LinkGrid,
    max_lag: usize,
) -> Result<Vec<DMatrix<f64>>> {
    (0..=max_lag)
        .map(|h| {
            let rx = sample_cross_correlation(x, h)?;
            links.inverse_matrix(&rx, h == 0)
        })
        .collect()
}

/// Estimates parameters from latent correlation matrices `R_Z(0..=p)`.
pub fn estimate_from_latent(
    rz: &[DMatrix<f64>],
    r: usize,
) -> Result<(DfmParams, LatentAcfSet, Vec<f64>)> {
    let pca = pca_factor_estimate(&rz[0], r).map_err(|e| e.at("pca"))?;
    let mut sigma_y = vec![pca.sigma_y0.clone()];
    for m in &rz[1..] {
        sigma_y.push(factor_lag_cov(&pca.lambda, m).map_err(|e| e.at("lag covariance"))?);
    }
    let (psi, sigma_eta) = yule_walker(&sigma_y).map_err(|e| e.at("yule-walker"))?;
    let params = DfmParams {
        lambda: pca.lambda,
        psi,
        sigma_eps: pca.sigma_eps,
        sigma_eta,
    };
    Ok((
        params,
        LatentAcfSet {
            r_z: rz.to_vec(),
            sigma_y,
        },
        pca.eigenvalues,
    ))
}

/// Full estimation pipeline for count data with `r` factors and VAR order `p`.
pub fn fit(
    x: &CountMatrix,
    families: &[Family],
    r: usize,
    p: usize,
    opts: &FitOptions,
) -> Result<FittedModel> {
    let cache = LinkCache::new(opts.hermite_order, opts.knots);
    fit_with_cache(x, families, r, p, &cache)
}

pub fn fit_with_cache(
    x: &CountMatrix,
    families: &[Family],
    r: usize,
    p: usize,
    cache: &LinkCache,
) -> Result<FittedModel> {
    let t = x.nrows();
    if p == 0 || t <= p {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= p < T, got p={p}, T={t}"
        )));
    }
    let marginals = fit_marginals(x, families).map_err(|e| e.at("marginals"))?;
    let links = LinkGrid::build(&marginals, cache).map_err(|e| e.at("links"))?;
    let xf = x.map(|v| v as f64);
    let rz = latent_correlations(&xf, &links, p).map_err(|e| e.at("correlation"))?;
    let (params, latent_acf, eigenvalues) = estimate_from_latent(&rz, r)?;
    let lmin = min_eigenvalue(&rz[0]);
    let psd_shift = if lmin < 0.0 {
        lmin.abs() + PSD_SHIFT_MARGIN
    } else {
        0.0
    };
    Ok(FittedModel {
        params,
        marginals,
        latent_acf,
        psd_shift,
        eigenvalues,
    })
}
