//! Choosing the number of factors and the VAR lag order.

use crate::error::{Error, Result};
use crate::estimation::{
    factor_lag_cov, fit_marginals, latent_correlations, pca_factor_estimate,
    segment_cross_correlation, yule_walker,
};
use crate::linalg::sym_eigen_desc;
use crate::link::{LinkCache, LinkGrid};
use crate::marginals::Family;
use crate::CountMatrix;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub const DEFAULT_FOLDS: usize = 5;
const ED_MAX_ITER: usize = 20;

/// `B` consecutive, near-equal blocks of `0..T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockFolds {
    pub blocks: Vec<(usize, usize)>,
}

impl BlockFolds {
    pub fn new(t: usize, b: usize) -> Result<Self> {
        if b < 2 || b > t {
            return Err(Error::InvalidParameter(format!(
                "need 2 <= B <= T, got B={b}, T={t}"
            )));
        }
        let (base, extra) = (t / b, t % b);
        let mut start = 0;
        let blocks = (0..b)
            .map(|k| {
                let len = base + usize::from(k < extra);
                let blk = (start, start + len);
                start += len;
                blk
            })
            .collect();
        Ok(BlockFolds { blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Test segment of fold `b`.
    pub fn test(&self, b: usize) -> Vec<(usize, usize)> {
        vec![self.blocks[b]]
    }

    /// Training segments of fold `b`: the runs before and after block `b`.
    pub fn train(&self, b: usize) -> Vec<(usize, usize)> {
        let (s, e) = self.blocks[b];
        let t = self.blocks.last().map(|x| x.1).unwrap_or(0);
        [(0, s), (e, t)]
            .into_iter()
            .filter(|(a, z)| z > a)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMethod {
    Ed,
    Ic1,
    Ic2,
    Ic3,
    BcvPc,
}

impl RankMethod {
    pub const ALL: [RankMethod; 5] = [
        RankMethod::Ed,
        RankMethod::Ic1,
        RankMethod::Ic2,
        RankMethod::Ic3,
        RankMethod::BcvPc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RankMethod::Ed => "ED",
            RankMethod::Ic1 => "IC1",
            RankMethod::Ic2 => "IC2",
            RankMethod::Ic3 => "IC3",
            RankMethod::BcvPc => "BCV_PC",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagMethod {
    Aic,
    Hq,
    Sc,
    Fpe,
    Bcv,
}

impl LagMethod {
    pub const ALL: [LagMethod; 5] = [
        LagMethod::Aic,
        LagMethod::Hq,
        LagMethod::Sc,
        LagMethod::Fpe,
        LagMethod::Bcv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LagMethod::Aic => "AIC",
            LagMethod::Hq => "HQ",
            LagMethod::Sc => "SC",
            LagMethod::Fpe => "FPE",
            LagMethod::Bcv => "BCV",
        }
    }
}

/// Outcome of a selection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub chosen: usize,
    pub candidates: Vec<usize>,
    /// One score per candidate (lower is better, except ED where it is the
    /// eigenvalue gap). Skipped candidates score `+∞`.
    pub scores: Vec<f64>,
    /// Per-fold contributions for cross-validation methods, `[fold][candidate]`.
    pub fold_scores: Vec<Vec<f64>>,
    /// Calibrated gap threshold (ED only).
    pub delta: Option<f64>,
}

/// Rank penalties `g_1..g_3`.
pub fn rank_penalty(method: RankMethod, d: usize, t: usize) -> f64 {
    let (d, t) = (d as f64, t as f64);
    let c2 = d.min(t);
    match method {
        RankMethod::Ic1 => (d + t) / (d * t) * (d * t / (d + t)).ln(),
        RankMethod::Ic2 => (d + t) / (d * t) * c2.ln(),
        RankMethod::Ic3 => c2.ln() / c2,
        _ => 0.0,
    }
}

/// Lag penalties for the information criteria.
pub fn lag_penalty(method: LagMethod, l: usize, r: usize, t: usize) -> f64 {
    let (l, r, t) = (l as f64, r as f64, t as f64);
    match method {
        LagMethod::Aic => 2.0 / t * l * r * r,
        LagMethod::Hq => 2.0 * t.ln().ln() / t * l * r * r,
        LagMethod::Sc => t.ln() / t * l * r * r,
        LagMethod::Fpe => 2.0 * r * (r * l + 1.0) / t,
        LagMethod::Bcv => 0.0,
    }
}

/// Edge-distribution rank estimate with the iterative calibration of the
/// gap threshold. Returns `(r̂, δ)`; `r̂ = 0` means no gap cleared `δ`.
pub fn ed_estimate(eigs: &[f64], r_max: usize) -> Result<(usize, f64)> {
    let d = eigs.len();
    if r_max == 0 || r_max >= d {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= r_max < d, got r_max={r_max}, d={d}"
        )));
    }
    let pick = |delta: f64| {
        (1..=r_max)
            .rev()
            .find(|&k| eigs[k - 1] - eigs[k] >= delta)
            .unwrap_or(0)
    };
    let mut j = r_max + 1;
    let mut delta = 0.0;
    let mut r_hat = 0;
    for _ in 0..ED_MAX_ITER {
        // Regress ê_j..ê_{j+4} on (j-1)^{2/3}..(j+3)^{2/3}.
        let idx: Vec<usize> = (j..j + 5).filter(|&k| k <= d).collect();
        if idx.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "too few eigenvalues beyond r_max={r_max} to calibrate the gap threshold"
            )));
        }
        let xs: Vec<f64> = idx
            .iter()
            .map(|&k| ((k - 1) as f64).powf(2.0 / 3.0))
            .collect();
        let ys: Vec<f64> = idx.iter().map(|&k| eigs[k - 1]).collect();
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        // A perfectly flat bulk gives δ = 0; keep rounding-level gaps out.
        delta = (2.0 * (sxy / sxx).abs()).max(1e-9 * eigs[0].abs());
        r_hat = pick(delta);
        let next = r_hat + 1;
        if next == j {
            break;
        }
        j = next;
    }
    Ok((r_hat, delta))
}

fn fold_err(fold: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::DegenerateSeries(reason) => Error::FoldDegenerate { fold, reason },
        other => other,
    }
}

fn argmin(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, s) in scores.iter().enumerate() {
        if s.is_finite() && best.is_none_or(|b| *s < scores[b]) {
            best = Some(k);
        }
    }
    best
}

/// Selects the number of factors. Links are built once from full-sample
/// marginal fits and reused for every fold.
pub fn select_rank(
    x: &CountMatrix,
    families: &[Family],
    method: RankMethod,
    r_max: usize,
    folds: usize,
    cache: &LinkCache,
) -> Result<Selection> {
    let (t, d) = x.shape();
    if r_max == 0 || r_max >= d {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= r_max < d, got r_max={r_max}, d={d}"
        )));
    }
    let marginals = fit_marginals(x, families).map_err(|e| e.at("marginals"))?;
    let links = LinkGrid::build(&marginals, cache).map_err(|e| e.at("links"))?;
    let xf = x.map(|v| v as f64);
    let candidates: Vec<usize> = (1..=r_max).collect();

    match method {
        RankMethod::Ed => {
            let rz0 = latent_correlations(&xf, &links, 0)?.remove(0);
            let eigs = sym_eigen_desc(&rz0).0;
            let (r_hat, delta) = ed_estimate(&eigs, r_max)?;
            let chosen = if r_hat == 0 {
                log::warn!("ED found no eigenvalue gap above {delta:.4}; using r = 1");
                1
            } else {
                r_hat
            };
            Ok(Selection {
                chosen,
                scores: candidates.iter().map(|&k| eigs[k - 1] - eigs[k]).collect(),
                candidates,
                fold_scores: vec![],
                delta: Some(delta),
            })
        }
        RankMethod::Ic1 | RankMethod::Ic2 | RankMethod::Ic3 => {
            let rz0 = latent_correlations(&xf, &links, 0)?.remove(0);
            let g = rank_penalty(method, d, t);
            let scores = candidates
                .iter()
                .map(|&q| {
                    let pca = pca_factor_estimate(&rz0, q)?;
                    Ok((pca.sigma_eps.norm_squared() / (d * t) as f64).ln() + q as f64 * g)
                })
                .collect::<Result<Vec<f64>>>()?;
            let best =
                argmin(&scores).ok_or_else(|| Error::Numeric("no finite IC score".into()))?;
            Ok(Selection {
                chosen: candidates[best],
                candidates,
                scores,
                fold_scores: vec![],
                delta: None,
            })
        }
        RankMethod::BcvPc => {
            let bf = BlockFolds::new(t, folds)?;
            let mut fold_scores = Vec::with_capacity(bf.len());
            for b in 0..bf.len() {
                let rx_test =
                    segment_cross_correlation(&xf, &bf.test(b), 0).map_err(fold_err(b))?;
                let rx_train =
                    segment_cross_correlation(&xf, &bf.train(b), 0).map_err(fold_err(b))?;
                let rz_test = links.inverse_matrix(&rx_test, true)?;
                let rz_train = links.inverse_matrix(&rx_train, true)?;
                let row = candidates
                    .iter()
                    .map(|&q| {
                        let pca = pca_factor_estimate(&rz_train, q)?;
                        let mut recon = &pca.lambda * &pca.sigma_y0 * pca.lambda.transpose();
                        for i in 0..d {
                            recon[(i, i)] += pca.sigma_eps[(i, i)];
                        }
                        Ok((&rz_test - recon).norm_squared())
                    })
                    .collect::<Result<Vec<f64>>>()?;
                fold_scores.push(row);
            }
            let scores: Vec<f64> = (0..candidates.len())
                .map(|k| fold_scores.iter().map(|r| r[k]).sum::<f64>() / bf.len() as f64)
                .collect();
            let best =
                argmin(&scores).ok_or_else(|| Error::Numeric("no finite BCV score".into()))?;
            Ok(Selection {
                chosen: candidates[best],
                candidates,
                scores,
                fold_scores,
                delta: None,
            })
        }
    }
}

/// Block Toeplitz Gram matrix and right-hand side of the Yule-Walker
/// system of order `l` built from `Σ_Y(0..=l)`.
fn yw_system(sigma_y: &[DMatrix<f64>], l: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let r = sigma_y[0].nrows();
    let gamma = |lag: isize| -> DMatrix<f64> {
        if lag >= 0 {
            sigma_y[lag as usize].clone()
        } else {
            sigma_y[(-lag) as usize].transpose()
        }
    };
    let mut g = DMatrix::zeros(r * l, r * l);
    let mut rhs = DMatrix::zeros(r * l, r);
    for h in 0..l {
        for k in 0..l {
            g.view_mut((h * r, k * r), (r, r))
                .copy_from(&gamma(k as isize - h as isize));
        }
        rhs.view_mut((h * r, 0), (r, r))
            .copy_from(&sigma_y[h + 1].transpose());
    }
    (g, rhs)
}

/// Cross-validated one-step error of stacked transitions `Ψ = [Ψ₁'; …; Ψ_l']`
/// against test moments, dropping the term that does not involve `Ψ`:
/// `n (−2 tr(Ψ'γ) + tr(Ψ'ΓΨ))`.
pub fn bcv_lag_objective(psi: &[DMatrix<f64>], test_sigma_y: &[DMatrix<f64>], n: f64) -> f64 {
    let l = psi.len();
    let r = psi[0].nrows();
    let (g, rhs) = yw_system(test_sigma_y, l);
    let mut stacked = DMatrix::zeros(r * l, r);
    for (h, m) in psi.iter().enumerate() {
        stacked
            .view_mut((h * r, 0), (r, r))
            .copy_from(&m.transpose());
    }
    let cross = (stacked.transpose() * &rhs).trace();
    let quad = (stacked.transpose() * &g * &stacked).trace();
    n * (-2.0 * cross + quad)
}

/// Selects the VAR order for `r` factors over candidates `1..=p_max`.
pub fn select_lag(
    x: &CountMatrix,
    families: &[Family],
    r: usize,
    method: LagMethod,
    p_max: usize,
    folds: usize,
    cache: &LinkCache,
) -> Result<Selection> {
    let (t, d) = x.shape();
    if p_max == 0 || 4 * p_max >= t {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= p_max < T/4, got p_max={p_max}, T={t}"
        )));
    }
    if r == 0 || r >= d {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= r < d, got r={r}, d={d}"
        )));
    }
    let marginals = fit_marginals(x, families).map_err(|e| e.at("marginals"))?;
    let links = LinkGrid::build(&marginals, cache).map_err(|e| e.at("links"))?;
    let xf = x.map(|v| v as f64);
    let candidates: Vec<usize> = (1..=p_max).collect();

    if method != LagMethod::Bcv {
        let rz = latent_correlations(&xf, &links, p_max)?;
        let pca = pca_factor_estimate(&rz[0], r)?;
        let mut sigma_y = vec![pca.sigma_y0.clone()];
        for m in &rz[1..] {
            sigma_y.push(factor_lag_cov(&pca.lambda, m)?);
        }
        let scores: Vec<f64> = candidates
            .iter()
            .map(|&l| match yule_walker(&sigma_y[..=l]) {
                Ok((_, eta)) => {
                    let det = eta.determinant();
                    if det > 0.0 {
                        det.ln() + lag_penalty(method, l, r, t)
                    } else {
                        log::warn!(
                            "lag {l}: innovation covariance determinant {det:.3e} <= 0; skipped"
                        );
                        f64::INFINITY
                    }
                }
                Err(e) => {
                    log::warn!("lag {l}: {e}; skipped");
                    f64::INFINITY
                }
            })
            .collect();
        let best = argmin(&scores)
            .ok_or_else(|| Error::Numeric("every lag candidate was skipped".into()))?;
        return Ok(Selection {
            chosen: candidates[best],
            candidates,
            scores,
            fold_scores: vec![],
            delta: None,
        });
    }

    let bf = BlockFolds::new(t, folds)?;
    let mut fold_scores = Vec::with_capacity(bf.len());
    for b in 0..bf.len() {
        let train = bf.train(b);
        let test = bf.test(b);
        let n_test = test[0].1 - test[0].0;
        let rz_train = (0..=p_max)
            .map(|h| {
                let rx = segment_cross_correlation(&xf, &train, h).map_err(fold_err(b))?;
                links.inverse_matrix(&rx, h == 0)
            })
            .collect::<Result<Vec<_>>>()?;
        let rz_test = (0..=p_max)
            .map(|h| {
                let rx = segment_cross_correlation(&xf, &test, h).map_err(fold_err(b))?;
                links.inverse_matrix(&rx, h == 0)
            })
            .collect::<Result<Vec<_>>>()?;
        let pca = pca_factor_estimate(&rz_train[0], r)?;
        let mut sy_train = vec![pca.sigma_y0.clone()];
        for m in &rz_train[1..] {
            sy_train.push(factor_lag_cov(&pca.lambda, m)?);
        }
        // Test-block factor moments through the training loadings.
        let sy_test = rz_test
            .iter()
            .map(|m| factor_lag_cov(&pca.lambda, m))
            .collect::<Result<Vec<_>>>()?;
        let row: Vec<f64> = candidates
            .iter()
            .map(|&l| match yule_walker(&sy_train[..=l]) {
                Ok((psi, _)) => bcv_lag_objective(&psi, &sy_test[..=l], (n_test - l) as f64),
                Err(e) => {
                    log::warn!("fold {b}, lag {l}: {e}; skipped");
                    f64::INFINITY
                }
            })
            .collect();
        fold_scores.push(row);
    }
    let scores: Vec<f64> = (0..candidates.len())
        .map(|k| fold_scores.iter().map(|r| r[k]).sum::<f64>())
        .collect();
    let best =
        argmin(&scores).ok_or_else(|| Error::Numeric("every lag candidate was skipped".into()))?;
    Ok(Selection {
        chosen: candidates[best],
        candidates,
        scores,
        fold_scores,
        delta: None,
    })
}

/// BCV lag scores from given factor autocovariances (training and test),
/// bypassing the link step. Used to check the objective on exact moments.
pub fn bcv_lag_scores_from_moments(
    train: &[DMatrix<f64>],
    test: &[DMatrix<f64>],
    p_max: usize,
    n: f64,
) -> Result<Vec<f64>> {
    (1..=p_max)
        .map(|l| {
            let (psi, _) = yule_walker(&train[..=l])?;
            Ok(bcv_lag_objective(&psi, &test[..=l], n - l as f64))
        })
        .collect()
}
