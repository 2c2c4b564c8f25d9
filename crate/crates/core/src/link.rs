//! Correlation links between latent Gaussian and observed count
//! correlations, and their numeric inverses.

use crate::error::{Error, Result};
use crate::marginals::{HermiteCoeffs, Marginal};
use crate::spline::NaturalSpline;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

/// Default number of spline intervals for the inverse link.
pub const DEFAULT_KNOTS: usize = 200;

/// Knot dips smaller than this are pruned; larger ones are an error. The
/// truncated series wiggles by up to about 1e-2 near `u = ±1`.
const MONOTONE_SLACK: f64 = 2e-2;

/// `L(u) = Σ_{k=1..K} ℓ_k u^k`, mapping a latent correlation `u` to the
/// correlation of the two transformed counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkFunction {
    /// `coeffs[k-1] = ℓ_k`.
    pub coeffs: Vec<f64>,
    pub rho_minus: f64,
    pub rho_plus: f64,
}

impl LinkFunction {
    pub fn new(gi: &HermiteCoeffs, gj: &HermiteCoeffs) -> Result<Self> {
        if gi.truncation_k != gj.truncation_k {
            return Err(Error::InvalidParameter(format!(
                "Hermite orders differ: {} vs {}",
                gi.truncation_k, gj.truncation_k
            )));
        }
        if !(gi.variance > 0.0 && gj.variance > 0.0) {
            return Err(Error::DegenerateMarginal("zero variance in link".into()));
        }
        let denom = (gi.variance * gj.variance).sqrt();
        let coeffs: Vec<f64> = (1..=gi.truncation_k)
            .map(|k| gi.scaled[k] * gj.scaled[k] / denom)
            .collect();
        let mut link = LinkFunction {
            coeffs,
            rho_minus: 0.0,
            rho_plus: 0.0,
        };
        // Evaluated the same way as every other point of the link.
        link.rho_plus = link.eval_unchecked(1.0);
        link.rho_minus = link.eval_unchecked(-1.0);
        Ok(link)
    }

    /// Horner evaluation; `|u| <= 1` is required.
    pub fn eval(&self, u: f64) -> Result<f64> {
        if !(u.abs() <= 1.0) {
            return Err(Error::Domain(format!("link argument {u} outside [-1,1]")));
        }
        Ok(self.eval_unchecked(u))
    }

    pub fn eval_unchecked(&self, u: f64) -> f64 {
        let mut acc = 0.0;
        for c in self.coeffs.iter().rev() {
            acc = acc * u + c;
        }
        acc * u
    }
}

/// Links for a pair of marginals, built from their Hermite expansions.
pub fn build_link(gi: &HermiteCoeffs, gj: &HermiteCoeffs) -> Result<LinkFunction> {
    LinkFunction::new(gi, gj)
}

/// Exact attainable correlation range `(ρ₋, ρ₊)` of two count marginals
/// under a Gaussian copula, computed from comonotone and countermonotone
/// couplings rather than a truncated series.
pub fn attainable_bounds(mi: &Marginal, mj: &Marginal) -> Result<(f64, f64)> {
    mi.validate()?;
    mj.validate()?;
    let (ci, oi) = (mi.cdf_table(), mi.support_offset() as f64);
    let (cj, oj) = (mj.cdf_table(), mj.support_offset() as f64);
    let sd = (mi.variance() * mj.variance()).sqrt();
    let mean_prod = mi.mean() * mj.mean();

    let upper = coupling_moment(&ci, oi, &cj, oj, false);
    let lower = coupling_moment(&ci, oi, &cj, oj, true);
    Ok(((lower - mean_prod) / sd, (upper - mean_prod) / sd))
}

/// `∫₀¹ F_i⁻¹(u) F_j⁻¹(u or 1-u) du` by merging cumulative tables.
fn coupling_moment(ci: &[f64], oi: f64, cj: &[f64], oj: f64, counter: bool) -> f64 {
    // Breakpoints of F_j⁻¹(1-u) are 1 - C_j, visited in reverse order.
    let cj_eff: Vec<f64> = if counter {
        let mut v: Vec<f64> = cj[..cj.len() - 1].iter().rev().map(|c| 1.0 - c).collect();
        v.push(1.0);
        v
    } else {
        cj.to_vec()
    };
    let value_j = |idx: usize| {
        if counter {
            oj + (cj.len() - 1 - idx) as f64
        } else {
            oj + idx as f64
        }
    };
    let (mut a, mut b, mut prev, mut acc) = (0usize, 0usize, 0.0, 0.0);
    while a < ci.len() && b < cj_eff.len() {
        let next = ci[a].min(cj_eff[b]);
        acc += (next - prev) * (oi + a as f64) * value_j(b);
        prev = next;
        if ci[a] <= next {
            a += 1;
        }
        if cj_eff[b] <= next {
            b += 1;
        }
    }
    acc
}

/// Natural-cubic-spline inverse of a link on a Chebyshev grid of `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseLinkTable {
    pub spline: NaturalSpline,
    /// Knots dropped because the truncated series was not strictly monotone.
    pub pruned: usize,
}

impl InverseLinkTable {
    pub fn knots_v(&self) -> &[f64] {
        &self.spline.x
    }

    pub fn knots_u(&self) -> &[f64] {
        &self.spline.y
    }

    /// `L⁻¹(v)`, returning `-1` below the first knot and `+1` above the last.
    pub fn eval(&self, v: f64) -> f64 {
        let x = &self.spline.x;
        if v <= x[0] {
            return -1.0;
        }
        if v >= x[x.len() - 1] {
            return 1.0;
        }
        self.spline.eval(v).clamp(-1.0, 1.0)
    }
}

/// Builds the inverse link on knots `u_m = -cos(πm/M)`.
///
/// The truncated series for pairs involving a Bernoulli or a very sparse
/// count wiggles near `u = ±1`; such knots are dropped (walking outward from `u = 0`) and
/// the outermost surviving knots are mapped to `∓1`.
pub fn build_inverse(link: &LinkFunction, m: usize) -> Result<InverseLinkTable> {
    if m < 10 {
        return Err(Error::InvalidParameter(format!(
            "need at least 10 knots, got {m}"
        )));
    }
    let u: Vec<f64> = (0..=m)
        .map(|i| -(std::f64::consts::PI * i as f64 / m as f64).cos())
        .collect();
    let v: Vec<f64> = u.iter().map(|&x| link.eval_unchecked(x)).collect();
    let center = u
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap();

    let mut right = vec![center];
    for i in center + 1..=m {
        let last = v[*right.last().unwrap()];
        if v[i] > last {
            right.push(i);
        } else if v[i] < last - MONOTONE_SLACK {
            return Err(Error::LinkMonotonicity(format!(
                "L({:.4}) = {:.6} drops below {:.6}",
                u[i], v[i], last
            )));
        }
    }
    let mut left = vec![];
    let mut last = v[center];
    for i in (0..center).rev() {
        if v[i] < last {
            left.push(i);
            last = v[i];
        } else if v[i] > last + MONOTONE_SLACK {
            return Err(Error::LinkMonotonicity(format!(
                "L({:.4}) = {:.6} rises above {:.6}",
                u[i], v[i], last
            )));
        }
    }
    left.reverse();
    let kept: Vec<usize> = left.into_iter().chain(right).collect();
    if kept.len() < 4 || kept.len() * 2 < m {
        return Err(Error::LinkMonotonicity(format!(
            "only {} of {} knots are monotone",
            kept.len(),
            m + 1
        )));
    }
    let xs: Vec<f64> = kept.iter().map(|&i| v[i]).collect();
    let mut ys: Vec<f64> = kept.iter().map(|&i| u[i]).collect();
    ys[0] = -1.0;
    *ys.last_mut().unwrap() = 1.0;
    Ok(InverseLinkTable {
        spline: NaturalSpline::fit(xs, ys)?,
        pruned: m + 1 - kept.len(),
    })
}

/// A link with its inverse table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLink {
    pub link: LinkFunction,
    pub inverse: InverseLinkTable,
}

impl PairLink {
    pub fn build(gi: &HermiteCoeffs, gj: &HermiteCoeffs, knots: usize) -> Result<Self> {
        let link = build_link(gi, gj)?;
        let inverse = build_inverse(&link, knots)?;
        Ok(PairLink { link, inverse })
    }
}

/// Hashable identity of a marginal's parameters.
type ThetaKey = (u8, Vec<u64>);

fn theta_key(m: &Marginal) -> ThetaKey {
    let tag = match m {
        Marginal::Bernoulli { .. } => 0,
        Marginal::Poisson { .. } => 1,
        Marginal::NegBinomial { .. } => 2,
        Marginal::Multinomial { .. } => 3,
    };
    let mut bits: Vec<u64> = m.params().iter().map(|x| x.to_bits()).collect();
    if let Marginal::NegBinomial { size, .. } = m {
        bits.push(*size as u64);
    }
    (tag, bits)
}

/// Cache of pair links keyed by the two marginals' parameters.
///
/// Lookups are thread-safe; concurrent builders of the same key may both
/// compute it, and the first insert wins.
#[derive(Debug)]
pub struct LinkCache {
    order: usize,
    knots: usize,
    hermite: Mutex<HashMap<ThetaKey, Arc<HermiteCoeffs>>>,
    pairs: Mutex<HashMap<(ThetaKey, ThetaKey), Arc<PairLink>>>,
}

impl Default for LinkCache {
    fn default() -> Self {
        LinkCache::new(crate::marginals::DEFAULT_HERMITE_ORDER, DEFAULT_KNOTS)
    }
}

impl LinkCache {
    pub fn new(order: usize, knots: usize) -> Self {
        LinkCache {
            order,
            knots,
            hermite: Mutex::new(HashMap::new()),
            pairs: Mutex::new(HashMap::new()),
        }
    }

    pub fn hermite(&self, m: &Marginal) -> Result<Arc<HermiteCoeffs>> {
        let key = theta_key(m);
        if let Some(h) = self.hermite.lock().unwrap().get(&key) {
            return Ok(h.clone());
        }
        let h = Arc::new(m.hermite_coefficients(self.order)?);
        Ok(self.hermite.lock().unwrap().entry(key).or_insert(h).clone())
    }

    pub fn pair(&self, mi: &Marginal, mj: &Marginal) -> Result<Arc<PairLink>> {
        let key = (theta_key(mi), theta_key(mj));
        if let Some(p) = self.pairs.lock().unwrap().get(&key) {
            return Ok(p.clone());
        }
        let (gi, gj) = (self.hermite(mi)?, self.hermite(mj)?);
        let built = Arc::new(PairLink::build(&gi, &gj, self.knots)?);
        Ok(self
            .pairs
            .lock()
            .unwrap()
            .entry(key)
            .or_insert(built)
            .clone())
    }
}

/// Symmetric grid of pair links for `d` series.
#[derive(Debug, Clone)]
pub struct LinkGrid {
    d: usize,
    // Upper triangle including the diagonal, row-major.
    pairs: Vec<Arc<PairLink>>,
}

impl LinkGrid {
    pub fn build(marginals: &[Marginal], cache: &LinkCache) -> Result<Self> {
        let d = marginals.len();
        let mut pairs = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in i..d {
                pairs.push(
                    cache
                        .pair(&marginals[i], &marginals[j])
                        .map_err(|e| match e {
                            Error::LinkMonotonicity(msg) => {
                                Error::LinkMonotonicity(format!("pair ({i},{j}): {msg}"))
                            }
                            other => other,
                        })?,
                );
            }
        }
        Ok(LinkGrid { d, pairs })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize) -> &PairLink {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        let idx = packed_index(self.d, a, b);
        &self.pairs[idx]
    }

    /// Entrywise `L⁻¹` of a count correlation matrix; for `lag0` the
    /// diagonal is set to exactly 1.
    pub fn inverse_matrix(&self, rx: &DMatrix<f64>, lag0: bool) -> Result<DMatrix<f64>> {
        if rx.nrows() != self.d || rx.ncols() != self.d {
            return Err(Error::Shape(format!(
                "correlation matrix is {}x{}, links are for d={}",
                rx.nrows(),
                rx.ncols(),
                self.d
            )));
        }
        Ok(DMatrix::from_fn(self.d, self.d, |i, j| {
            if lag0 && i == j {
                1.0
            } else {
                self.get(i, j).inverse.eval(rx[(i, j)])
            }
        }))
    }

    /// Entrywise `L` of a latent correlation matrix.
    pub fn forward_matrix(&self, rz: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.d, self.d, |i, j| {
            self.get(i, j)
                .link
                .eval_unchecked(rz[(i, j)].clamp(-1.0, 1.0))
        })
    }
}

fn packed_index(d: usize, a: usize, b: usize) -> usize {
    // Rows 0..a hold d + (d-1) + ... + (d-a+1) entries.
    a * d - a * a.saturating_sub(1) / 2 + (b - a)
}

/// Entrywise inverse link of `rx` with the given grid.
pub fn inverse_link_matrix(
    rx: &DMatrix<f64>,
    links: &LinkGrid,
    lag0: bool,
) -> Result<DMatrix<f64>> {
    links.inverse_matrix(rx, lag0)
}
