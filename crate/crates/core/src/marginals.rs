//! Parametric count marginals and their Gaussian-copula representation.
//!
//! A count `X = F⁻¹(Φ(Z))` is a step function of a standard normal `Z`. Each
//! marginal exposes the cumulative table `C_n = F(n)`, the latent bins
//! `(Φ⁻¹(C_{n-1}), Φ⁻¹(C_n)]`, and the Hermite coefficients of the step
//! function, which drive the correlation link.

use crate::error::{Error, Result};
use crate::normal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

/// Unbounded supports are cut at the first `n` with `1 - C_n` below this.
pub const TAIL_TOLERANCE: f64 = 1e-12;

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` when a fitted
/// cell would otherwise be empty.
pub const PROB_CLAMP: f64 = 1e-6;

/// Default Hermite truncation order.
pub const DEFAULT_HERMITE_ORDER: usize = 100;

const MAX_POISSON_RATE: f64 = 500.0;

/// Family selector used when fitting a marginal to data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Bernoulli,
    Poisson,
    /// Number of failures before `size` successes.
    NegBinomial {
        size: u32,
    },
    /// Categorical values on `{1, .., categories}`.
    Multinomial {
        categories: usize,
    },
}

/// A fitted or specified count marginal `Fᵢ(θᵢ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Marginal {
    Bernoulli { p: f64 },
    Poisson { lambda: f64 },
    NegBinomial { size: u32, p: f64 },
    Multinomial { probs: Vec<f64> },
}

impl Marginal {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        match self {
            Marginal::Bernoulli { p } if !open_unit(*p) => Err(Error::InvalidParameter(format!(
                "Bernoulli p={p} must lie in (0,1)"
            ))),
            Marginal::Poisson { lambda } if !(*lambda > 0.0 && *lambda <= MAX_POISSON_RATE) => {
                Err(Error::InvalidParameter(format!(
                    "Poisson rate {lambda} must lie in (0,{MAX_POISSON_RATE}]"
                )))
            }
            Marginal::NegBinomial { size, p } if *size == 0 || !open_unit(*p) => {
                Err(Error::InvalidParameter(format!(
                    "negative binomial needs size >= 1 and p in (0,1), got size={size}, p={p}"
                )))
            }
            Marginal::Multinomial { probs } => {
                if probs.len() < 2 {
                    return Err(Error::InvalidParameter(
                        "multinomial needs at least two categories".into(),
                    ));
                }
                if probs.iter().any(|&q| !open_unit(q)) {
                    return Err(Error::InvalidParameter(
                        "multinomial cell probabilities must lie in (0,1)".into(),
                    ));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidParameter(format!(
                        "multinomial probabilities sum to {total}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn family(&self) -> Family {
        match self {
            Marginal::Bernoulli { .. } => Family::Bernoulli,
            Marginal::Poisson { .. } => Family::Poisson,
            Marginal::NegBinomial { size, .. } => Family::NegBinomial { size: *size },
            Marginal::Multinomial { probs } => Family::Multinomial {
                categories: probs.len(),
            },
        }
    }

    /// Smallest support value: 0 for ℕ₀ families, 1 for multinomial.
    pub fn support_offset(&self) -> u32 {
        match self {
            Marginal::Multinomial { .. } => 1,
            _ => 0,
        }
    }

    /// Estimated parameters stacked as a vector (the size of a negative
    /// binomial is fixed and excluded).
    pub fn params(&self) -> Vec<f64> {
        match self {
            Marginal::Bernoulli { p } => vec![*p],
            Marginal::Poisson { lambda } => vec![*lambda],
            Marginal::NegBinomial { p, .. } => vec![*p],
            Marginal::Multinomial { probs } => probs.clone(),
        }
    }

    /// Probability masses over the (truncated) support, starting at
    /// [`support_offset`](Self::support_offset). The last entry absorbs the
    /// truncated tail so the masses sum to one.
    pub fn pmf_table(&self) -> Vec<f64> {
        let mut pmf = match self {
            Marginal::Bernoulli { p } => vec![1.0 - p, *p],
            Marginal::Multinomial { probs } => probs.clone(),
            Marginal::Poisson { lambda } => {
                let mut out = vec![(-lambda).exp()];
                tail_scan(&mut out, |n, prev| prev * lambda / n as f64);
                out
            }
            Marginal::NegBinomial { size, p } => {
                let r = *size as f64;
                let mut out = vec![p.powf(r)];
                tail_scan(&mut out, |n, prev| {
                    prev * (n as f64 + r - 1.0) / n as f64 * (1.0 - p)
                });
                out
            }
        };
        let head: f64 = pmf[..pmf.len() - 1].iter().sum();
        if let Some(last) = pmf.last_mut() {
            *last = (1.0 - head).max(0.0);
        }
        pmf
    }

    /// Cumulative table `C_n`, with the final entry exactly 1.
    pub fn cdf_table(&self) -> Vec<f64> {
        let pmf = self.pmf_table();
        let mut acc = 0.0;
        let mut c: Vec<f64> = pmf
            .iter()
            .map(|q| {
                acc += q;
                acc.min(1.0)
            })
            .collect();
        if let Some(last) = c.last_mut() {
            *last = 1.0;
        }
        c
    }

    /// Largest support value kept after tail truncation.
    pub fn max_value(&self) -> u32 {
        self.support_offset() + self.pmf_table().len() as u32 - 1
    }

    pub fn mean(&self) -> f64 {
        match self {
            Marginal::Bernoulli { p } => *p,
            Marginal::Poisson { lambda } => *lambda,
            Marginal::NegBinomial { size, p } => *size as f64 * (1.0 - p) / p,
            Marginal::Multinomial { probs } => probs
                .iter()
                .enumerate()
                .map(|(i, q)| (i + 1) as f64 * q)
                .sum(),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            Marginal::Bernoulli { p } => p * (1.0 - p),
            Marginal::Poisson { lambda } => *lambda,
            Marginal::NegBinomial { size, p } => *size as f64 * (1.0 - p) / (p * p),
            Marginal::Multinomial { probs } => {
                let m = self.mean();
                probs
                    .iter()
                    .enumerate()
                    .map(|(i, q)| q * ((i + 1) as f64 - m).powi(2))
                    .sum()
            }
        }
    }

    /// Most likely value; ties resolve to the smaller count.
    pub fn mode(&self) -> u32 {
        let pmf = self.pmf_table();
        let mut best = 0;
        for (i, &q) in pmf.iter().enumerate() {
            // Relative slack so rounding cannot split exact ties like Poisson(1).
            if q > pmf[best] * (1.0 + 1e-9) {
                best = i;
            }
        }
        self.support_offset() + best as u32
    }

    /// Generalized inverse `inf{v : F(v) >= u}`.
    pub fn quantile(&self, u: f64) -> Result<u32> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Domain(format!("quantile level {u} outside (0,1)")));
        }
        self.validate()?;
        Ok(quantile_in(&self.cdf_table(), self.support_offset(), u))
    }

    /// Latent interval `(Φ⁻¹(C_{n-1}), Φ⁻¹(C_n)]` mapped to the count `n`.
    pub fn bin_bounds(&self, n: u32) -> Result<(f64, f64)> {
        self.validate()?;
        bin_in(&self.cdf_table(), self.support_offset(), n).ok_or_else(|| {
            Error::Domain(format!(
                "value {n} outside support {}..={}",
                self.support_offset(),
                self.max_value()
            ))
        })
    }

    /// Precomputed thresholds for repeated bin lookups.
    pub fn thresholds(&self) -> Result<Thresholds> {
        self.validate()?;
        let cdf = self.cdf_table();
        let cuts = cdf[..cdf.len() - 1]
            .iter()
            .map(|&c| normal::quantile(c))
            .collect();
        Ok(Thresholds {
            offset: self.support_offset(),
            cdf,
            cuts,
        })
    }

    /// Hermite coefficients `g_k`, `k = 0..=order`, of `G(z) = F⁻¹(Φ(z))`.
    pub fn hermite_coefficients(&self, order: usize) -> Result<HermiteCoeffs> {
        if order < 1 {
            return Err(Error::InvalidParameter("Hermite order must be >= 1".into()));
        }
        self.validate()?;
        let cdf = self.cdf_table();
        // Cut points with C_n in {0,1} contribute nothing.
        let cuts: Vec<f64> = cdf
            .iter()
            .filter(|&&c| c > 0.0 && c < 1.0)
            .map(|&c| normal::quantile(c))
            .collect();
        let weights: Vec<f64> = cuts.iter().map(|&z| (-0.5 * z * z).exp()).collect();

        // Normalized Hermite values h_k(z) = H_k(z)/sqrt(k!) per cut point.
        let mut h_prev = vec![0.0; cuts.len()];
        let mut h_cur = vec![1.0; cuts.len()];
        let mut scaled = vec![0.0; order + 1];
        let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        for k in 1..=order {
            // h_cur holds h_{k-1}.
            let s: f64 = weights.iter().zip(&h_cur).map(|(w, h)| w * h).sum();
            scaled[k] = inv_sqrt_2pi * s / (k as f64).sqrt();
            let km1 = (k - 1) as f64;
            for i in 0..cuts.len() {
                let next = (cuts[i] * h_cur[i] - km1.sqrt() * h_prev[i]) / (k as f64).sqrt();
                h_prev[i] = h_cur[i];
                h_cur[i] = next;
            }
        }
        let mut g = vec![0.0; order + 1];
        g[0] = self.mean();
        for k in 1..=order {
            let c = scaled[k];
            g[k] = if c == 0.0 {
                0.0
            } else {
                c.signum() * (c.abs().ln() - 0.5 * ln_gamma(k as f64 + 1.0)).exp()
            };
        }
        Ok(HermiteCoeffs {
            g,
            scaled,
            variance: self.variance(),
            truncation_k: order,
        })
    }
}

fn tail_scan(out: &mut Vec<f64>, next: impl Fn(usize, f64) -> f64) {
    let mut total: f64 = out.iter().sum();
    let mut n = out.len();
    while 1.0 - total >= TAIL_TOLERANCE {
        let q = next(n, *out.last().unwrap());
        out.push(q);
        total += q;
        n += 1;
        if n > 1_000_000 {
            break;
        }
    }
}

fn quantile_in(cdf: &[f64], offset: u32, u: f64) -> u32 {
    let idx = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
    offset + idx as u32
}

fn bin_in(cdf: &[f64], offset: u32, n: u32) -> Option<(f64, f64)> {
    let idx = n.checked_sub(offset)? as usize;
    if idx >= cdf.len() {
        return None;
    }
    let lo = if idx == 0 { 0.0 } else { cdf[idx - 1] };
    Some((normal::quantile(lo), normal::quantile(cdf[idx])))
}

/// Latent cut points of a marginal, cached for hot loops.
#[derive(Debug, Clone)]
pub struct Thresholds {
    offset: u32,
    cdf: Vec<f64>,
    cuts: Vec<f64>,
}

impl Thresholds {
    pub fn offset(&self) -> u32 {
        self.offset
    }

    pub fn support_len(&self) -> usize {
        self.cdf.len()
    }

    pub fn bin(&self, n: u32) -> Option<(f64, f64)> {
        let idx = n.checked_sub(self.offset)? as usize;
        if idx >= self.cdf.len() {
            return None;
        }
        let lo = if idx == 0 {
            f64::NEG_INFINITY
        } else {
            self.cuts[idx - 1]
        };
        let hi = self.cuts.get(idx).copied().unwrap_or(f64::INFINITY);
        Some((lo, hi))
    }

    /// Count whose bin contains `z`.
    pub fn count_for(&self, z: f64) -> u32 {
        self.offset + self.cuts.partition_point(|&c| c < z) as u32
    }
}

/// Hermite coefficients of a marginal's transform.
///
/// `g[k]` is the plain coefficient; `scaled[k] = sqrt(k!)·g[k]` is the
/// overflow-free form used to build links, so `Σ_k scaled[k]²` approaches the
/// variance from below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HermiteCoeffs {
    pub g: Vec<f64>,
    pub scaled: Vec<f64>,
    pub variance: f64,
    pub truncation_k: usize,
}

impl HermiteCoeffs {
    /// `Σ_{k=1..K} k!·g_k²`.
    pub fn explained_variance(&self) -> f64 {
        self.scaled[1..].iter().map(|c| c * c).sum()
    }
}

/// Fits a marginal to an observed count series.
///
/// Bernoulli and multinomial use sample proportions, Poisson the sample mean,
/// and the negative binomial matches the mean with its size held fixed.
pub fn fit_marginal(series: &[u32], family: Family) -> Result<Marginal> {
    let t = series.len();
    if t < 2 {
        return Err(Error::EmptyInput(format!(
            "need at least 2 observations to fit a marginal, got {t}"
        )));
    }
    let mean = series.iter().map(|&x| x as f64).sum::<f64>() / t as f64;
    let degenerate = |what: &str| Err(Error::DegenerateMarginal(format!("series is {what}")));
    match family {
        Family::Bernoulli => {
            if series.iter().any(|&x| x > 1) {
                return Err(Error::Domain("Bernoulli series must be 0/1".into()));
            }
            if mean == 0.0 {
                return degenerate("all zeros");
            }
            if mean == 1.0 {
                return degenerate("all ones");
            }
            Ok(Marginal::Bernoulli { p: mean })
        }
        Family::Poisson => {
            if mean == 0.0 {
                return degenerate("all zeros");
            }
            Ok(Marginal::Poisson { lambda: mean })
        }
        Family::NegBinomial { size } => {
            if size == 0 {
                return Err(Error::InvalidParameter(
                    "negative binomial size must be >= 1".into(),
                ));
            }
            if mean == 0.0 {
                return degenerate("all zeros");
            }
            let r = size as f64;
            Ok(Marginal::NegBinomial {
                size,
                p: r / (r + mean),
            })
        }
        Family::Multinomial { categories } => {
            if categories < 2 {
                return Err(Error::InvalidParameter(
                    "multinomial needs at least two categories".into(),
                ));
            }
            let mut counts = vec![0usize; categories];
            for &x in series {
                if x < 1 || x as usize > categories {
                    return Err(Error::Domain(format!(
                        "value {x} outside multinomial support 1..={categories}"
                    )));
                }
                counts[x as usize - 1] += 1;
            }
            if counts.iter().filter(|&&c| c > 0).count() < 2 {
                return degenerate("constant");
            }
            let raw: Vec<f64> = counts.iter().map(|&c| c as f64 / t as f64).collect();
            Ok(Marginal::Multinomial {
                probs: clamp_simplex(&raw),
            })
        }
    }
}

/// Clamps cells into `[PROB_CLAMP, 1-PROB_CLAMP]` and renormalizes, leaving
/// already-interior vectors untouched.
fn clamp_simplex(probs: &[f64]) -> Vec<f64> {
    if probs
        .iter()
        .all(|q| (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(q))
    {
        return probs.to_vec();
    }
    let clamped: Vec<f64> = probs
        .iter()
        .map(|&q| q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
        .collect();
    let total: f64 = clamped.iter().sum();
    clamped.iter().map(|q| q / total).collect()
}

/// Probabilists' Hermite polynomial `H_k(z)` by the three-term recurrence.
pub fn hermite_poly(k: usize, z: f64) -> f64 {
    let (mut prev, mut cur) = (0.0, 1.0);
    for j in 0..k {
        let next = z * cur - j as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}
