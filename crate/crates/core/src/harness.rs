//! Data and config I/O, evaluation metrics, baselines and the Monte Carlo
//! experiment runner.

use crate::error::{Error, Result};
use crate::estimation::{fit_with_cache, FitOptions, FittedModel};
use crate::kalman::StateSpace;
use crate::link::LinkCache;
use crate::marginals::{Family, Marginal};
use crate::model::{preset_params, simulate, DfmParams, LatentAcfSet, MarginalGroup, PsiSet};
use crate::selection::{select_lag, select_rank, LagMethod, RankMethod, DEFAULT_FOLDS};
use crate::smc::{
    forecast_distribution, observed_support, point_forecast, run_sisr, ParticleEnsemble,
    SisrOptions,
};
use crate::CountMatrix;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Formatting

/// Formats with 6 significant digits, `%g` style.
pub fn fmt_sig(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mant))
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

// ---------------------------------------------------------------------------
// CSV

/// Reads a header row plus integer cells; rows are time points.
pub fn load_csv(path: impl AsRef<Path>) -> Result<(CountMatrix, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if names.is_empty() || names.iter().all(|n| n.is_empty()) {
        return Err(Error::EmptyInput("missing header row".into()));
    }
    let d = names.len();
    let mut cells = Vec::new();
    let mut rows = 0;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        if rec.len() != d {
            return Err(Error::Format(format!(
                "row {row} has {} fields, header has {d}",
                rec.len()
            )));
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: u32 = cell.parse().map_err(|_| Error::Parse {
                row,
                col: j + 1,
                msg: format!(
                    "'{cell}' in column '{}' is not a non-negative integer",
                    names[j]
                ),
            })?;
            cells.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyInput("no data rows".into()));
    }
    Ok((CountMatrix::from_row_slice(rows, d, &cells), names))
}

pub fn write_counts_csv(
    path: impl AsRef<Path>,
    x: &CountMatrix,
    names: Option<&[String]>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let header: Vec<String> = match names {
        Some(n) => n.to_vec(),
        None => (1..=x.ncols()).map(|j| format!("x{j}")).collect(),
    };
    w.write_record(&header)?;
    for t in 0..x.nrows() {
        w.write_record(x.row(t).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// JSON model files

/// Dense matrix stored row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixJson {
    fn from(m: &DMatrix<f64>) -> Self {
        MatrixJson {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().iter().copied().collect(),
        }
    }
}

impl MatrixJson {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Format(format!(
                "matrix declares {}x{} but holds {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsJson {
    pub lambda: MatrixJson,
    pub psi: Vec<MatrixJson>,
    pub sigma_eps: MatrixJson,
    pub sigma_eta: MatrixJson,
}

impl From<&DfmParams> for ParamsJson {
    fn from(p: &DfmParams) -> Self {
        ParamsJson {
            lambda: (&p.lambda).into(),
            psi: p.psi.iter().map(MatrixJson::from).collect(),
            sigma_eps: (&p.sigma_eps).into(),
            sigma_eta: (&p.sigma_eta).into(),
        }
    }
}

impl ParamsJson {
    pub fn to_params(&self) -> Result<DfmParams> {
        let p = DfmParams {
            lambda: self.lambda.to_matrix()?,
            psi: self
                .psi
                .iter()
                .map(MatrixJson::to_matrix)
                .collect::<Result<_>>()?,
            sigma_eps: self.sigma_eps.to_matrix()?,
            sigma_eta: self.sigma_eta.to_matrix()?,
        };
        p.check()?;
        Ok(p)
    }
}

/// On-disk form of a [`FittedModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub layout: String,
    pub d: usize,
    pub r: usize,
    pub p: usize,
    pub params: ParamsJson,
    pub marginals: Vec<Marginal>,
    pub r_z: Vec<MatrixJson>,
    pub sigma_y: Vec<MatrixJson>,
    pub psd_shift: f64,
    pub eigenvalues: Vec<f64>,
}

impl From<&FittedModel> for ModelFile {
    fn from(m: &FittedModel) -> Self {
        ModelFile {
            schema_version: SCHEMA_VERSION,
            layout: "row-major".into(),
            d: m.params.d(),
            r: m.params.r(),
            p: m.params.p(),
            params: (&m.params).into(),
            marginals: m.marginals.clone(),
            r_z: m.latent_acf.r_z.iter().map(MatrixJson::from).collect(),
            sigma_y: m.latent_acf.sigma_y.iter().map(MatrixJson::from).collect(),
            psd_shift: m.psd_shift,
            eigenvalues: m.eigenvalues.clone(),
        }
    }
}

impl ModelFile {
    pub fn to_model(&self) -> Result<FittedModel> {
        check_schema(self.schema_version)?;
        if self.layout != "row-major" {
            return Err(Error::Format(format!(
                "unsupported matrix layout '{}'",
                self.layout
            )));
        }
        let params = self.params.to_params()?;
        if (params.d(), params.r(), params.p()) != (self.d, self.r, self.p) {
            return Err(Error::Shape(
                "model dimensions disagree with its matrices".into(),
            ));
        }
        for m in &self.marginals {
            m.validate()?;
        }
        Ok(FittedModel {
            params,
            marginals: self.marginals.clone(),
            latent_acf: LatentAcfSet {
                r_z: self
                    .r_z
                    .iter()
                    .map(MatrixJson::to_matrix)
                    .collect::<Result<_>>()?,
                sigma_y: self
                    .sigma_y
                    .iter()
                    .map(MatrixJson::to_matrix)
                    .collect::<Result<_>>()?,
            },
            psd_shift: self.psd_shift,
            eigenvalues: self.eigenvalues.clone(),
        })
    }
}

fn check_schema(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "schema_version {v} is not supported (expected {SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

pub fn save_model(path: impl AsRef<Path>, model: &FittedModel) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(&ModelFile::from(model))?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FittedModel> {
    let file: ModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    file.to_model()
}

// ---------------------------------------------------------------------------
// Experiment configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Simulation-study design: diagonal transitions, unit noise, `U(0,1)`
    /// lower loadings drawn once per experiment.
    Preset {
        psi: PsiSet,
        marginals: MarginalGroup,
    },
    Explicit {
        params: ParamsJson,
        marginals: Vec<Marginal>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastSettings {
    pub horizon: usize,
    pub holdout: usize,
    pub window: usize,
    pub sisr: SisrOptions,
}

impl Default for ForecastSettings {
    fn default() -> Self {
        ForecastSettings {
            horizon: 5,
            holdout: 5,
            window: 10,
            sisr: SisrOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionSettings {
    pub rank_methods: Vec<RankMethod>,
    pub lag_methods: Vec<LagMethod>,
    pub r_max: usize,
    pub p_max: usize,
    pub folds: usize,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        SelectionSettings {
            rank_methods: RankMethod::ALL.to_vec(),
            lag_methods: LagMethod::ALL.to_vec(),
            r_max: 8,
            p_max: 6,
            folds: DEFAULT_FOLDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    pub model: ModelSpec,
    pub d: usize,
    pub r: usize,
    /// Sample length including any forecast holdout.
    pub t: usize,
    /// VAR order used for fitting; defaults to the true order.
    #[serde(default)]
    pub p: Option<usize>,
    pub replications: usize,
    pub seed: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_true")]
    pub estimate: bool,
    #[serde(default)]
    pub forecast: Option<ForecastSettings>,
    #[serde(default)]
    pub selection: Option<SelectionSettings>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub output_dir: Option<String>,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_burn_in() -> usize {
    crate::model::DEFAULT_BURN_IN
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn preset(
        psi: PsiSet,
        marginals: MarginalGroup,
        d: usize,
        r: usize,
        t: usize,
        replications: usize,
        seed: u64,
    ) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            name: default_name(),
            model: ModelSpec::Preset { psi, marginals },
            d,
            r,
            t,
            p: None,
            replications,
            seed,
            burn_in: default_burn_in(),
            estimate: true,
            forecast: None,
            selection: None,
            fit: FitOptions::default(),
            output_dir: None,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        check_schema(cfg.schema_version)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Seed of replication `k`; distinct for distinct `k`.
    pub fn replication_seed(&self, k: usize) -> u64 {
        splitmix64(self.seed.wrapping_add(k as u64))
    }

    /// True parameters on the unit-variance latent scale, plus marginals.
    pub fn truth(&self) -> Result<(DfmParams, DfmParams, Vec<Marginal>)> {
        let (raw, marginals) = match &self.model {
            ModelSpec::Preset { psi, marginals } => {
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ 0x5eed_0f7a_u64));
                (
                    preset_params(self.d, self.r, *psi, &mut rng),
                    marginals.assign(self.d),
                )
            }
            ModelSpec::Explicit { params, marginals } => (params.to_params()?, marginals.clone()),
        };
        if raw.d() != self.d || raw.r() != self.r || marginals.len() != self.d {
            return Err(Error::Shape(format!(
                "config says d={}, r={} but the model has d={}, r={} and {} marginals",
                self.d,
                self.r,
                raw.d(),
                raw.r(),
                marginals.len()
            )));
        }
        let (std, _) = raw.standardized()?;
        Ok((raw, std, marginals))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Metrics

/// Parameters compared in the loss tables, in reporting order.
pub const PARAMETER_NAMES: [&str; 5] = ["theta", "Lambda", "Sigma_eps", "Psi", "Sigma_eta"];

/// Flattened parameter blocks of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet(pub Vec<DMatrix<f64>>);

impl ParamSet {
    pub fn new(params: &DfmParams, marginals: &[Marginal]) -> Self {
        let theta: Vec<f64> = marginals.iter().flat_map(|m| m.params()).collect();
        let r = params.r();
        let mut psi = DMatrix::zeros(r, r * params.p());
        for (h, m) in params.psi.iter().enumerate() {
            psi.view_mut((0, h * r), (r, r)).copy_from(m);
        }
        ParamSet(vec![
            DMatrix::from_column_slice(theta.len(), 1, &theta),
            params.lambda.clone(),
            params.sigma_eps.clone(),
            psi,
            params.sigma_eta.clone(),
        ])
    }
}

/// One row of the estimation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRow {
    pub parameter: String,
    /// `mean ‖â − a‖_F / ‖a‖_F`.
    pub loss: f64,
    /// `‖mean(â) − a‖₁ / ‖a‖₁` (entrywise ℓ₁).
    pub bias: f64,
    /// `mean ‖â − a‖₁ / ‖a‖₁`.
    pub mean_l1: f64,
    pub n: usize,
}

fn l1(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

/// Relative losses and biases of `estimates` against `truth`.
pub fn estimation_losses(estimates: &[ParamSet], truth: &ParamSet) -> Result<Vec<LossRow>> {
    if estimates.is_empty() {
        return Ok(vec![]);
    }
    for e in estimates {
        if e.0.len() != truth.0.len()
            || e.0
                .iter()
                .zip(&truth.0)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Shape(
                "estimate and truth blocks differ in shape".into(),
            ));
        }
    }
    let n = estimates.len() as f64;
    Ok(truth
        .0
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let fro = a.norm();
            let one = l1(a);
            let loss = estimates.iter().map(|e| (&e.0[k] - a).norm()).sum::<f64>() / n / fro;
            let mean_l1 = estimates.iter().map(|e| l1(&(&e.0[k] - a))).sum::<f64>() / n / one;
            let mean = estimates
                .iter()
                .fold(DMatrix::zeros(a.nrows(), a.ncols()), |acc, e| acc + &e.0[k])
                / n;
            LossRow {
                parameter: PARAMETER_NAMES.get(k).unwrap_or(&"block").to_string(),
                loss,
                bias: l1(&(mean - a)) / one,
                mean_l1,
                n: estimates.len(),
            }
        })
        .collect())
}

/// Fraction of coordinates forecast exactly.
pub fn sensitivity(pred: &[u32], actual: &[u32]) -> f64 {
    let hits = pred.iter().zip(actual).filter(|(a, b)| a == b).count();
    hits as f64 / actual.len() as f64
}

/// Repeats the final observed row `h` times.
pub fn last_baseline(history: &CountMatrix, horizon: usize) -> CountMatrix {
    let last = history.nrows() - 1;
    CountMatrix::from_fn(horizon, history.ncols(), |_, j| history[(last, j)])
}

/// Most frequent historical value per series (ties to the smaller value).
pub fn marginal_baseline(history: &CountMatrix, horizon: usize) -> CountMatrix {
    let modes: Vec<u32> = (0..history.ncols())
        .map(|j| {
            let mut counts = std::collections::BTreeMap::new();
            for &v in history.column(j).iter() {
                *counts.entry(v).or_insert(0usize) += 1;
            }
            let mut best = (0u32, 0usize);
            for (v, c) in counts {
                if c > best.1 {
                    best = (v, c);
                }
            }
            best.0
        })
        .collect();
    CountMatrix::from_fn(horizon, history.ncols(), |_, j| modes[j])
}

/// Forecast errors of one replication, indexed by horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastErrors {
    pub rmfe_y: Vec<f64>,
    pub rmfe_z: Vec<f64>,
    pub rmfe_x: Vec<f64>,
    pub sens: Vec<f64>,
    pub sens_last: Vec<f64>,
    pub sens_marginal: Vec<f64>,
}

/// Truth and history needed to score a forecast.
pub struct ForecastTruth<'a> {
    pub x_hist: &'a CountMatrix,
    pub y_hist: &'a DMatrix<f64>,
    pub z_hist: &'a DMatrix<f64>,
    pub x_future: &'a CountMatrix,
    pub y_future: &'a DMatrix<f64>,
    pub z_future: &'a DMatrix<f64>,
}

fn mean_sq_norm(m: &DMatrix<f64>) -> f64 {
    m.norm_squared() / m.nrows() as f64
}

/// Root mean forecast errors (particle averages with `1/N`), sensitivity
/// and baseline sensitivities for horizons `1..=H`.
pub fn forecast_errors(
    ens: &ParticleEnsemble,
    model: &FittedModel,
    point: &CountMatrix,
    truth: &ForecastTruth<'_>,
) -> Result<ForecastErrors> {
    let horizon = point.nrows();
    let (d, r) = (model.params.d(), model.params.r());
    if truth.x_future.nrows() < horizon
        || truth.x_future.ncols() != d
        || truth.y_future.ncols() != r
        || truth.z_future.ncols() != d
        || truth.x_hist.ncols() != d
    {
        return Err(Error::Shape(
            "forecast truth does not match the model dimensions".into(),
        ));
    }
    let ss = StateSpace::new(&model.forecast_params())?;
    let den_y = mean_sq_norm(truth.y_hist);
    let den_z = mean_sq_norm(truth.z_hist);
    let den_x = mean_sq_norm(&truth.x_hist.map(|v| v as f64));
    let last = last_baseline(truth.x_hist, horizon);
    let marg = marginal_baseline(truth.x_hist, horizon);
    let n = ens.len() as f64;
    let mut states = ens.states.clone();
    let mut out = ForecastErrors {
        rmfe_y: vec![],
        rmfe_z: vec![],
        rmfe_x: vec![],
        sens: vec![],
        sens_last: vec![],
        sens_marginal: vec![],
    };
    for h in 0..horizon {
        let mut sy = 0.0;
        let mut sz = 0.0;
        let y_true = truth.y_future.row(h).transpose();
        let z_true = truth.z_future.row(h).transpose();
        for y in states.iter_mut() {
            *y = &ss.psi_c * &*y;
            sy += (y.rows(0, r) - &y_true).norm_squared();
            sz += (&ss.lambda_c * &*y - &z_true).norm_squared();
        }
        out.rmfe_y.push((sy / n / den_y).sqrt());
        out.rmfe_z.push((sz / n / den_z).sqrt());
        let actual: Vec<u32> = truth.x_future.row(h).iter().copied().collect();
        let pred: Vec<u32> = point.row(h).iter().copied().collect();
        let sx: f64 = pred
            .iter()
            .zip(&actual)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum();
        out.rmfe_x.push((sx / den_x).sqrt());
        out.sens.push(sensitivity(&pred, &actual));
        out.sens_last.push(sensitivity(
            &last.row(h).iter().copied().collect::<Vec<_>>(),
            &actual,
        ));
        out.sens_marginal.push(sensitivity(
            &marg.row(h).iter().copied().collect::<Vec<_>>(),
            &actual,
        ));
    }
    Ok(out)
}

/// Per-horizon averages of [`ForecastErrors`] across replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastRow {
    pub h: usize,
    pub rmfe_y: f64,
    pub rmfe_z: f64,
    pub rmfe_x: f64,
    pub sens: f64,
    pub sens_last: f64,
    pub sens_marginal: f64,
    pub n: usize,
}

pub fn aggregate_forecasts(errs: &[ForecastErrors]) -> Vec<ForecastRow> {
    let Some(first) = errs.first() else {
        return vec![];
    };
    let n = errs.len() as f64;
    let avg = |f: &dyn Fn(&ForecastErrors) -> f64| errs.iter().map(f).sum::<f64>() / n;
    (0..first.sens.len())
        .map(|h| ForecastRow {
            h: h + 1,
            rmfe_y: avg(&|e| e.rmfe_y[h]),
            rmfe_z: avg(&|e| e.rmfe_z[h]),
            rmfe_x: avg(&|e| e.rmfe_x[h]),
            sens: avg(&|e| e.sens[h]),
            sens_last: avg(&|e| e.sens_last[h]),
            sens_marginal: avg(&|e| e.sens_marginal[h]),
            n: errs.len(),
        })
        .collect()
}

/// Everything reported for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub table1: Vec<LossRow>,
    pub table2: Vec<ForecastRow>,
}

/// Estimation losses against the truth plus averaged forecast errors.
pub fn compute_metrics(
    estimates: &[ParamSet],
    truth: &ParamSet,
    forecasts: &[ForecastErrors],
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        table1: estimation_losses(estimates, truth)?,
        table2: aggregate_forecasts(forecasts),
    })
}

// ---------------------------------------------------------------------------
// Experiment runner

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub replication: usize,
    pub stage: String,
    pub message: String,
}

/// Outcome of one replication.
#[derive(Debug, Clone)]
pub struct ReplicationResult {
    pub index: usize,
    pub seed: u64,
    pub estimate: Option<ParamSet>,
    pub forecast: Option<ForecastErrors>,
    pub rank: Vec<(RankMethod, Option<usize>)>,
    pub lag: Vec<(LagMethod, Option<usize>)>,
    pub failures: Vec<Failure>,
}

/// Selection counts for one method: `counts[c - 1]` replications chose `c`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyRow {
    pub method: String,
    pub counts: Vec<usize>,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub metrics: MetricsReport,
    pub rank_frequencies: Vec<FrequencyRow>,
    pub lag_frequencies: Vec<FrequencyRow>,
    pub failures: Vec<Failure>,
    pub replications: Vec<ReplicationResult>,
    pub truth: ParamSet,
}

fn families_of(marginals: &[Marginal]) -> Vec<Family> {
    marginals.iter().map(Marginal::family).collect()
}

/// Simulates, fits, selects and forecasts one replication.
pub fn run_replication(
    cfg: &ExperimentConfig,
    raw: &DfmParams,
    truth_marginals: &[Marginal],
    index: usize,
) -> ReplicationResult {
    let seed = cfg.replication_seed(index);
    let mut res = ReplicationResult {
        index,
        seed,
        estimate: None,
        forecast: None,
        rank: vec![],
        lag: vec![],
        failures: vec![],
    };
    let fail = |res: &mut ReplicationResult, stage: &str, e: Error| {
        log::warn!("replication {index}: {stage}: {e}");
        res.failures.push(Failure {
            replication: index,
            stage: stage.to_string(),
            message: e.to_string(),
        });
    };
    let sim = match simulate(raw, truth_marginals, cfg.t, cfg.burn_in, seed) {
        Ok(s) => s,
        Err(e) => {
            fail(&mut res, "simulate", e);
            return res;
        }
    };
    let families = families_of(truth_marginals);
    let p = cfg.p.unwrap_or(raw.p());
    let cache = LinkCache::new(cfg.fit.hermite_order, cfg.fit.knots);

    if cfg.estimate {
        match fit_with_cache(&sim.x, &families, cfg.r, p, &cache) {
            Ok(m) => res.estimate = Some(ParamSet::new(&m.params, &m.marginals)),
            Err(e) => fail(&mut res, "fit", e),
        }
    }

    if let Some(sel) = &cfg.selection {
        for &m in &sel.rank_methods {
            match select_rank(
                &sim.x,
                &families,
                m,
                sel.r_max.min(cfg.d - 1),
                sel.folds,
                &cache,
            ) {
                Ok(s) => res.rank.push((m, Some(s.chosen))),
                Err(e) => {
                    fail(&mut res, &format!("rank {}", m.name()), e);
                    res.rank.push((m, None));
                }
            }
        }
        for &m in &sel.lag_methods {
            let p_max = sel.p_max.min((cfg.t - 1) / 4);
            match select_lag(&sim.x, &families, cfg.r, m, p_max, sel.folds, &cache) {
                Ok(s) => res.lag.push((m, Some(s.chosen))),
                Err(e) => {
                    fail(&mut res, &format!("lag {}", m.name()), e);
                    res.lag.push((m, None));
                }
            }
        }
    }

    if let Some(fc) = &cfg.forecast {
        match forecast_replication(&sim, &families, cfg.r, p, fc, &cache, seed) {
            Ok(f) => res.forecast = Some(f),
            Err(e) => fail(&mut res, "forecast", e),
        }
    }
    res
}

fn forecast_replication(
    sim: &crate::model::Simulation,
    families: &[Family],
    r: usize,
    p: usize,
    fc: &ForecastSettings,
    cache: &LinkCache,
    seed: u64,
) -> Result<ForecastErrors> {
    let t = sim.x.nrows();
    if fc.holdout < fc.horizon || fc.holdout >= t || fc.window == 0 || fc.window > t - fc.holdout {
        return Err(Error::InvalidParameter(format!(
            "holdout {} / horizon {} / window {} do not fit T={t}",
            fc.holdout, fc.horizon, fc.window
        )));
    }
    let t_fit = t - fc.holdout;
    let x_hist = sim.x.rows(0, t_fit).into_owned();
    let model = fit_with_cache(&x_hist, families, r, p, cache)?;
    let window = x_hist.rows(t_fit - fc.window, fc.window).into_owned();
    let ens = run_sisr(&window, &model, &fc.sisr, splitmix64(seed ^ 0x00f0_ca57))?;
    let seen = observed_support(&x_hist, &model);
    let dist = forecast_distribution(&ens, &model, fc.horizon, Some(&seen))?;
    let point = point_forecast(&dist);
    let truth = ForecastTruth {
        x_hist: &x_hist,
        y_hist: &sim.y.rows(0, t_fit).into_owned(),
        z_hist: &sim.z.rows(0, t_fit).into_owned(),
        x_future: &sim.x.rows(t_fit, fc.horizon).into_owned(),
        y_future: &sim.y.rows(t_fit, fc.horizon).into_owned(),
        z_future: &sim.z.rows(t_fit, fc.horizon).into_owned(),
    };
    forecast_errors(&ens, &model, &point, &truth)
}

fn frequencies<M: Copy + PartialEq>(
    methods: &[M],
    results: &[ReplicationResult],
    get: impl Fn(&ReplicationResult) -> &[(M, Option<usize>)],
    max: usize,
    name: impl Fn(M) -> &'static str,
) -> Vec<FrequencyRow> {
    methods
        .iter()
        .map(|&m| {
            let mut counts = vec![0; max];
            let mut failed = 0;
            for res in results {
                match get(res).iter().find(|(k, _)| *k == m).and_then(|x| x.1) {
                    Some(c) if c >= 1 && c <= max => counts[c - 1] += 1,
                    _ => failed += 1,
                }
            }
            FrequencyRow {
                method: name(m).to_string(),
                counts,
                failed,
            }
        })
        .collect()
}

/// Runs every replication (in parallel on the current rayon pool) and
/// aggregates the tables.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    check_schema(cfg.schema_version)?;
    if cfg.r == 0 || cfg.r >= cfg.d {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= r < d, got r={}, d={}",
            cfg.r, cfg.d
        )));
    }
    let (raw, std_truth, marginals) = cfg.truth()?;
    let results: Vec<ReplicationResult> = (0..cfg.replications)
        .into_par_iter()
        .map(|k| run_replication(cfg, &raw, &marginals, k))
        .collect();
    let truth = ParamSet::new(&std_truth, &marginals);
    let estimates: Vec<ParamSet> = results.iter().filter_map(|r| r.estimate.clone()).collect();
    let forecasts: Vec<ForecastErrors> =
        results.iter().filter_map(|r| r.forecast.clone()).collect();
    let metrics = compute_metrics(&estimates, &truth, &forecasts)?;
    let (rank_frequencies, lag_frequencies) = match &cfg.selection {
        Some(sel) => (
            frequencies(
                &sel.rank_methods,
                &results,
                |r| &r.rank,
                sel.r_max.min(cfg.d - 1),
                RankMethod::name,
            ),
            frequencies(
                &sel.lag_methods,
                &results,
                |r| &r.lag,
                sel.p_max,
                LagMethod::name,
            ),
        ),
        None => (vec![], vec![]),
    };
    let failures = results.iter().flat_map(|r| r.failures.clone()).collect();
    Ok(ExperimentReport {
        config: cfg.clone(),
        metrics,
        rank_frequencies,
        lag_frequencies,
        failures,
        replications: results,
        truth,
    })
}

/// Column orders of the report files.
pub const TABLE1_HEADER: [&str; 5] = ["parameter", "loss", "bias", "mean_l1", "n"];
pub const TABLE2_HEADER: [&str; 8] = [
    "h",
    "rmfe_y",
    "rmfe_z",
    "rmfe_x",
    "sens",
    "sens_last",
    "sens_marginal",
    "n",
];
pub const FAILURES_HEADER: [&str; 3] = ["replication", "stage", "message"];
pub const REPLICATIONS_HEADER: [&str; 8] = [
    "replication",
    "seed",
    "loss_theta",
    "loss_Lambda",
    "loss_Sigma_eps",
    "loss_Psi",
    "loss_Sigma_eta",
    "sens_mean",
];

fn freq_header(max: usize, label: &str) -> Vec<String> {
    let mut h = vec!["method".to_string()];
    h.extend((1..=max).map(|c| format!("{label}{c}")));
    h.push("failed".into());
    h
}

/// Writes `table1.csv`, `table2.csv`, `rank_selection.csv`,
/// `lag_selection.csv`, `failures.csv` and `replications.csv`.
pub fn write_report(report: &ExperimentReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let t1: Vec<Vec<String>> = report
        .metrics
        .table1
        .iter()
        .map(|r| {
            vec![
                r.parameter.clone(),
                fmt_sig(r.loss),
                fmt_sig(r.bias),
                fmt_sig(r.mean_l1),
                r.n.to_string(),
            ]
        })
        .collect();
    write_table(&dir.join("table1.csv"), &TABLE1_HEADER, &t1)?;
    let t2: Vec<Vec<String>> = report
        .metrics
        .table2
        .iter()
        .map(|r| {
            vec![
                r.h.to_string(),
                fmt_sig(r.rmfe_y),
                fmt_sig(r.rmfe_z),
                fmt_sig(r.rmfe_x),
                fmt_sig(r.sens),
                fmt_sig(r.sens_last),
                fmt_sig(r.sens_marginal),
                r.n.to_string(),
            ]
        })
        .collect();
    write_table(&dir.join("table2.csv"), &TABLE2_HEADER, &t2)?;

    let sel = report.config.selection.clone().unwrap_or_default();
    for (file, rows, max, label) in [
        (
            "rank_selection.csv",
            &report.rank_frequencies,
            sel.r_max.min(report.config.d.saturating_sub(1)),
            "r",
        ),
        ("lag_selection.csv", &report.lag_frequencies, sel.p_max, "p"),
    ] {
        let header = freq_header(max, label);
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|f| {
                let mut v = vec![f.method.clone()];
                v.extend(f.counts.iter().map(|c| c.to_string()));
                v.push(f.failed.to_string());
                v
            })
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_table(&dir.join(file), &header, &body)?;
    }

    let fl: Vec<Vec<String>> = report
        .failures
        .iter()
        .map(|f| {
            vec![
                f.replication.to_string(),
                f.stage.clone(),
                f.message.clone(),
            ]
        })
        .collect();
    write_table(&dir.join("failures.csv"), &FAILURES_HEADER, &fl)?;

    let reps: Vec<Vec<String>> = report
        .replications
        .iter()
        .map(|r| {
            let mut v = vec![r.index.to_string(), r.seed.to_string()];
            match &r.estimate {
                Some(e) => v.extend(
                    e.0.iter()
                        .zip(&report.truth.0)
                        .map(|(a, b)| fmt_sig((a - b).norm() / b.norm())),
                ),
                None => v.extend(std::iter::repeat_n(String::new(), 5)),
            }
            v.push(match &r.forecast {
                Some(f) => fmt_sig(f.sens.iter().sum::<f64>() / f.sens.len() as f64),
                None => String::new(),
            });
            v
        })
        .collect();
    write_table(&dir.join("replications.csv"), &REPLICATIONS_HEADER, &reps)?;
    Ok(())
}

/// Forecast pmfs as long-format rows `(h, series, value, probability)` and
/// point forecasts as `H × d`.
pub fn write_forecast(
    dir: impl AsRef<Path>,
    dist: &crate::smc::ForecastDistribution,
    point: &CountMatrix,
    names: Option<&[String]>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut rows = vec![];
    for h in 0..dist.horizon {
        for (i, pmf) in dist.pmf[h].iter().enumerate() {
            for (k, p) in pmf.iter().enumerate() {
                rows.push(vec![
                    (h + 1).to_string(),
                    (i + 1).to_string(),
                    (dist.offsets[i] + k as u32).to_string(),
                    fmt_sig(*p),
                ]);
            }
        }
    }
    write_table(
        &dir.join("forecast_pmf.csv"),
        &["h", "series", "value", "probability"],
        &rows,
    )?;
    write_counts_csv(dir.join("point_forecast.csv"), point, names)
}

/// Selection scores as `(method, candidate, fold, score)`; fold is empty
/// for the pooled score.
pub fn selection_rows(method: &str, sel: &crate::selection::Selection) -> Vec<Vec<String>> {
    let mut rows = vec![];
    for (k, c) in sel.candidates.iter().enumerate() {
        rows.push(vec![
            method.to_string(),
            c.to_string(),
            String::new(),
            fmt_sig(sel.scores[k]),
        ]);
        for (b, fold) in sel.fold_scores.iter().enumerate() {
            rows.push(vec![
                method.to_string(),
                c.to_string(),
                (b + 1).to_string(),
                fmt_sig(fold[k]),
            ]);
        }
    }
    rows
}

pub fn write_selection(path: impl AsRef<Path>, rows: &[Vec<String>]) -> Result<()> {
    write_table(
        path.as_ref(),
        &["method", "candidate", "fold", "score"],
        rows,
    )
}

/// Convenience for fitting from a count matrix with explicit options.
pub fn fit_counts(
    x: &CountMatrix,
    families: &[Family],
    r: usize,
    p: usize,
    opts: &FitOptions,
) -> Result<FittedModel> {
    let cache = LinkCache::new(opts.hermite_order, opts.knots);
    fit_with_cache(x, families, r, p, &cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn significant_digits() {
        assert_eq!(fmt_sig(0.0983127), "0.0983127");
        assert_eq!(fmt_sig(0.09831274), "0.0983127");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(123456.7), "123457");
        assert_eq!(fmt_sig(1234567.0), "1.23457e6");
        assert_eq!(fmt_sig(-2.5e-7), "-2.5e-7");
        assert_eq!(fmt_sig(12.5), "12.5");
        assert_eq!(fmt_sig(0.0), "0");
    }

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_examples() {
        let f = write("a,b\n1,2\n3,4\n5,6\n");
        let (x, names) = load_csv(f.path()).unwrap();
        assert_eq!(x.shape(), (3, 2));
        assert_eq!(x[(2, 1)], 6);
        assert_eq!(names, vec!["a", "b"]);

        let f = write("a,b\n1,2\n3,2.5\n");
        match load_csv(f.path()).unwrap_err() {
            Error::Parse { row, col, .. } => assert_eq!((row, col), (2, 2)),
            e => panic!("{e}"),
        }
        let f = write("a,b\n");
        assert!(matches!(
            load_csv(f.path()).unwrap_err(),
            Error::EmptyInput(_)
        ));
        let f = write("a,b\n1,2\n3\n");
        assert!(matches!(load_csv(f.path()).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn losses_and_baselines() {
        let a = ParamSet(vec![DMatrix::from_row_slice(2, 1, &[1.0, 2.0])]);
        let rows = estimation_losses(&[a.clone(), a.clone()], &a).unwrap();
        assert_eq!((rows[0].loss, rows[0].bias), (0.0, 0.0));
        let up = ParamSet(vec![DMatrix::from_row_slice(2, 1, &[1.5, 2.0])]);
        let dn = ParamSet(vec![DMatrix::from_row_slice(2, 1, &[0.5, 2.0])]);
        let rows = estimation_losses(&[up, dn], &a).unwrap();
        assert!((rows[0].loss - 0.5 / 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rows[0].bias, 0.0);
        assert!((rows[0].mean_l1 - 0.5 / 3.0).abs() < 1e-15);

        let hist = CountMatrix::from_row_slice(4, 2, &[1, 0, 2, 0, 2, 1, 1, 1]);
        assert_eq!(
            last_baseline(&hist, 2)
                .row(1)
                .iter()
                .copied()
                .collect::<Vec<_>>(),
            vec![1, 1]
        );
        // Ties go to the smaller value.
        assert_eq!(
            marginal_baseline(&hist, 1)
                .row(0)
                .iter()
                .copied()
                .collect::<Vec<_>>(),
            vec![1, 0]
        );
        assert_eq!(sensitivity(&[1, 2, 3], &[1, 2, 3]), 1.0);
    }

    #[test]
    fn config_round_trip() {
        let mut cfg = ExperimentConfig::preset(
            PsiSet::Positive,
            MarginalGroup::Bernoulli,
            15,
            2,
            200,
            3,
            42,
        );
        cfg.forecast = Some(ForecastSettings::default());
        cfg.selection = Some(SelectionSettings::default());
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&s).unwrap(), cfg);
        let seeds: std::collections::HashSet<u64> =
            (0..1000).map(|k| cfg.replication_seed(k)).collect();
        assert_eq!(seeds.len(), 1000);
        let bad = s.replace("\"schema_version\":1", "\"schema_version\":9");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let cfg = ExperimentConfig::preset(PsiSet::Var2, MarginalGroup::Poisson, 6, 2, 200, 1, 1);
        let (_, params, marginals) = cfg.truth().unwrap();
        let model = FittedModel::from_params(params, marginals).unwrap();
        let file = ModelFile::from(&model);
        assert_eq!(file.params.lambda.data[..2], [1.0, 0.0]);
        let json = serde_json::to_string(&file).unwrap();
        let back: ModelFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_model().unwrap(), model);
    }

    #[test]
    fn zero_replications_give_headers_only() {
        let cfg =
            ExperimentConfig::preset(PsiSet::Positive, MarginalGroup::Poisson, 6, 2, 100, 0, 1);
        let rep = run_experiment(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(&rep, dir.path()).unwrap();
        let t1 = fs::read_to_string(dir.path().join("table1.csv")).unwrap();
        assert_eq!(t1.trim(), TABLE1_HEADER.join(","));
    }

    #[test]
    fn small_experiment_is_deterministic() {
        let mut cfg =
            ExperimentConfig::preset(PsiSet::Positive, MarginalGroup::Poisson, 6, 2, 120, 3, 7);
        cfg.selection = Some(SelectionSettings {
            r_max: 3,
            p_max: 2,
            ..Default::default()
        });
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        for row in a.rank_frequencies.iter().chain(&a.lag_frequencies) {
            assert_eq!(row.counts.iter().sum::<usize>() + row.failed, 3);
        }
        assert_eq!(a.metrics.table1.len(), 5);
        assert!(a.metrics.table1.iter().all(|r| r.loss >= 0.0));
    }
}
