use clap::{Args, Parser, Subcommand, ValueEnum};
use lgdfm::harness::{
    fmt_sig, load_csv, load_model, run_experiment, save_model, selection_rows, write_counts_csv,
    write_forecast, write_report, write_selection, ExperimentConfig, ModelFile,
};
use lgdfm::model::simulate;
use lgdfm::selection::{select_lag, select_rank, LagMethod, RankMethod, DEFAULT_FOLDS};
use lgdfm::smc::{forecast_distribution, observed_support, point_forecast, run_sisr, SisrOptions};
use lgdfm::{fit, Error, Family, FitOptions, LinkCache};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "lgdfm",
    version,
    about = "Latent Gaussian dynamic factor models for count time series"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one sample from an experiment config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (counts.csv, latent.csv, model.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a count CSV.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        r: usize,
        #[arg(long, default_value_t = 1)]
        p: usize,
        /// JSON file with fit options (hermite_order, knots).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output model JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Select the number of factors or the VAR order.
    Select {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        target: Target,
        /// Method names, comma separated (ed, ic1, ic2, ic3, bcv_pc or aic, hq, sc, fpe, bcv).
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Largest candidate.
        #[arg(long, default_value_t = 8)]
        max: usize,
        /// Number of factors (lag selection only).
        #[arg(long)]
        r: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_FOLDS)]
        folds: usize,
        /// Output CSV of scores.
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast from a fitted model and the tail of a count CSV.
    Forecast {
        /// Count CSV; the last `window` rows are filtered.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
        #[arg(long, default_value_t = 10)]
        window: usize,
        /// JSON file with particle filter options.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (forecast_pmf.csv, point_forecast.csv).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a Monte Carlo experiment and write report tables.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; falls back to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Count CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Marginal families: one for all columns or one per column
    /// (bernoulli, poisson, negbin:SIZE, multinomial:K).
    #[arg(long, value_delimiter = ',', required = true)]
    family: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Rank,
    Lag,
}

fn parse_family(s: &str) -> Result<Family, Error> {
    let bad = || Error::InvalidParameter(format!("unknown family '{s}'"));
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a.parse::<u32>().map_err(|_| bad())?)),
        None => (s, None),
    };
    match (name.to_ascii_lowercase().as_str(), arg) {
        ("bernoulli", None) => Ok(Family::Bernoulli),
        ("poisson", None) => Ok(Family::Poisson),
        ("negbin" | "neg_binomial", Some(size)) => Ok(Family::NegBinomial { size }),
        ("multinomial", Some(k)) => Ok(Family::Multinomial {
            categories: k as usize,
        }),
        _ => Err(bad()),
    }
}

fn families(spec: &[String], d: usize) -> Result<Vec<Family>, Error> {
    let parsed = spec
        .iter()
        .map(|s| parse_family(s.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    match parsed.len() {
        1 => Ok(vec![parsed[0]; d]),
        n if n == d => Ok(parsed),
        n => Err(Error::Shape(format!("{n} families given for {d} columns"))),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn method_by_name<M: Copy>(
    all: &[M],
    name: impl Fn(M) -> &'static str,
    s: &str,
) -> Result<M, Error> {
    all.iter()
        .copied()
        .find(|&m| name(m).eq_ignore_ascii_case(s.trim()))
        .ok_or_else(|| Error::InvalidParameter(format!("unknown method '{s}'")))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (raw, std, marginals) = cfg.truth()?;
            let sim = simulate(
                &raw,
                &marginals,
                cfg.t,
                cfg.burn_in,
                cfg.replication_seed(0),
            )?;
            fs::create_dir_all(&out)?;
            write_counts_csv(out.join("counts.csv"), &sim.x, None)?;
            let mut w = csv_writer(&out.join("latent.csv"))?;
            let mut header: Vec<String> = (1..=sim.z.ncols()).map(|j| format!("z{j}")).collect();
            header.extend((1..=sim.y.ncols()).map(|j| format!("y{j}")));
            w.write_record(&header).map_err(Error::from)?;
            for t in 0..sim.z.nrows() {
                let row: Vec<String> = sim
                    .z
                    .row(t)
                    .iter()
                    .chain(sim.y.row(t).iter())
                    .map(|v| fmt_sig(*v))
                    .collect();
                w.write_record(&row).map_err(Error::from)?;
            }
            w.flush()?;
            let truth = lgdfm::FittedModel::from_params(std, marginals)?;
            save_model(out.join("model.json"), &truth)?;
            log::info!(
                "simulated {} x {} counts into {}",
                sim.x.nrows(),
                sim.x.ncols(),
                out.display()
            );
        }
        Command::Fit {
            data,
            r,
            p,
            config,
            out,
        } => {
            let (x, _) = load_csv(&data.data)?;
            let fams = families(&data.family, x.ncols())?;
            let opts: FitOptions = match config {
                Some(c) => read_json(&c)?,
                None => FitOptions::default(),
            };
            let model = fit(&x, &fams, r, p, &opts)?;
            if model.psd_shift > 0.0 {
                log::warn!(
                    "latent correlation matrix was shifted by {:.3e} to be positive definite",
                    model.psd_shift
                );
            }
            save_model(&out, &model)?;
        }
        Command::Select {
            data,
            target,
            methods,
            max,
            r,
            folds,
            out,
        } => {
            let (x, _) = load_csv(&data.data)?;
            let fams = families(&data.family, x.ncols())?;
            let cache = LinkCache::default();
            let mut rows = vec![];
            match target {
                Target::Rank => {
                    let ms = match methods {
                        Some(v) => v
                            .iter()
                            .map(|s| method_by_name(&RankMethod::ALL, RankMethod::name, s))
                            .collect::<Result<Vec<_>, _>>()?,
                        None => RankMethod::ALL.to_vec(),
                    };
                    for m in ms {
                        let sel = select_rank(&x, &fams, m, max, folds, &cache)?;
                        println!("{}: r = {}", m.name(), sel.chosen);
                        rows.extend(selection_rows(m.name(), &sel));
                    }
                }
                Target::Lag => {
                    let r = r.ok_or_else(|| {
                        Error::InvalidParameter("--r is required for lag selection".into())
                    })?;
                    let ms = match methods {
                        Some(v) => v
                            .iter()
                            .map(|s| method_by_name(&LagMethod::ALL, LagMethod::name, s))
                            .collect::<Result<Vec<_>, _>>()?,
                        None => LagMethod::ALL.to_vec(),
                    };
                    for m in ms {
                        let sel = select_lag(&x, &fams, r, m, max, folds, &cache)?;
                        println!("{}: p = {}", m.name(), sel.chosen);
                        rows.extend(selection_rows(m.name(), &sel));
                    }
                }
            }
            write_selection(&out, &rows)?;
        }
        Command::Forecast {
            data,
            model,
            horizon,
            window,
            config,
            seed,
            out,
        } => {
            let (x, names) = load_csv(&data)?;
            let model = load_model(&model)?;
            if window == 0 || window > x.nrows() {
                return Err(Error::InvalidParameter(format!(
                    "window {window} does not fit {} rows",
                    x.nrows()
                )));
            }
            let opts: SisrOptions = match config {
                Some(c) => read_json(&c)?,
                None => SisrOptions::default(),
            };
            let tail = x.rows(x.nrows() - window, window).into_owned();
            let ens = run_sisr(&tail, &model, &opts, seed)?;
            let seen = observed_support(&x, &model);
            let dist = forecast_distribution(&ens, &model, horizon, Some(&seen))?;
            write_forecast(&out, &dist, &point_forecast(&dist), Some(&names))?;
        }
        Command::Experiment { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = out
                .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
                .ok_or_else(|| {
                    Error::InvalidParameter(
                        "no output directory: pass --out or set output_dir".into(),
                    )
                })?;
            let report = run_experiment(&cfg)?;
            write_report(&report, &dir)?;
            if !report.failures.is_empty() {
                log::warn!(
                    "{} replication stages failed; see failures.csv",
                    report.failures.len()
                );
            }
            // Record the resolved truth next to the tables.
            let (_, std, marginals) = cfg.truth()?;
            let truth = lgdfm::FittedModel::from_params(std, marginals)?;
            fs::write(
                dir.join("truth.json"),
                serde_json::to_string_pretty(&ModelFile::from(&truth))?,
            )?;
        }
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, Error> {
    Ok(csv::Writer::from_path(path)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 3 })
        }
    }
}
