//! Command-line front end: `solve`, `simulate`, `sweep` and `verify`.
//!
//! Values come from explicit flags, then from the `--config` JSON file, then
//! from built-in defaults. The effective configuration is written into every
//! artifact: as a `# config: {...}` first line in CSV files and as a `config`
//! member in JSON files. The output directory itself is not echoed, so runs
//! that differ only in `--output` produce identical files.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equilibrium::solve;
use crate::error::KyleError;
use crate::model::{EquilibriumSolution, ModelParams, Tolerances};
use crate::simulator::{check_estimate, estimate_moments, BestResponseConfig, MomentEstimate, SimConfig};
use crate::sweep::{consecutive_gaps, solve_horizons, NoiseScale};
use crate::verify::{verify_solution, Check, VerificationReport, VerifyConfig};

pub const DEFAULT_SIGMA_A: f64 = 3.0;
pub const DEFAULT_SIGMA_V: f64 = 1.0;
pub const DEFAULT_RHO: f64 = 1.0 / 3.0;
pub const DEFAULT_PATHS: usize = 100_000;
pub const DEFAULT_SIM_SEED: u64 = 42;
pub const DEFAULT_VERIFY_SEED: u64 = 7;
pub const DEFAULT_SIM_DEVIATIONS: usize = 10;
pub const DEFAULT_PERTURBATIONS: usize = 100;

#[derive(Debug, Parser)]
#[command(name = "kyle-eq", version, about = "Linear equilibrium of the constrained-trader Kyle model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the equilibrium and write the solution and coefficient table
    Solve(SolveArgs),
    /// Monte Carlo estimates and statistical checks of a solved equilibrium
    Simulate(SimulateArgs),
    /// Solve several horizons and write the lambda and r sequences
    Sweep(SweepArgs),
    /// Identity, inequality and best-response checks
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaWRule {
    /// sigma_w = 1 / sqrt(N)
    InvSqrtN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub sigma_a: Option<f64>,
    #[arg(long)]
    pub sigma_v: Option<f64>,
    #[arg(long, conflicts_with = "sigma_w_rule")]
    pub sigma_w: Option<f64>,
    #[arg(long, value_enum)]
    pub sigma_w_rule: Option<SigmaWRule>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Relative tolerance of the date-0 boundary match
    #[arg(long)]
    pub tol_shoot: Option<f64>,
    /// JSON file with default values for any flag
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing)
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Format of tabular artifacts
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub antithetic: bool,
    /// Random deviations whose simulated cost is compared with the exact cost
    #[arg(long)]
    pub perturbations: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    pub n_list: Option<Vec<usize>>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub n: Option<usize>,
    /// Seed of the random best-response deviations
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub perturbations: Option<usize>,
    /// Verify a stored solution instead of solving
    #[arg(long)]
    pub solution: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub n: Option<usize>,
    pub n_list: Option<Vec<usize>>,
    pub sigma_a: Option<f64>,
    pub sigma_v: Option<f64>,
    pub sigma_w: Option<f64>,
    pub sigma_w_rule: Option<SigmaWRule>,
    pub rho: Option<f64>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub antithetic: Option<bool>,
    pub tol_shoot: Option<f64>,
    pub perturbations: Option<usize>,
    pub output: Option<PathBuf>,
    pub format: Option<Format>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Model(#[from] KyleError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Model(e) if e.is_input_error() => 2,
            CliError::Model(_) => 3,
            CliError::Config(_) => 2,
            CliError::Io { .. } => 1,
            CliError::Verification(_) => 4,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Effective configuration of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_list: Option<Vec<usize>>,
    pub sigma_a: f64,
    pub sigma_v: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_w: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_w_rule: Option<SigmaWRule>,
    pub rho: f64,
    pub tol_shoot: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub antithetic: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perturbations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solution: Option<PathBuf>,
    pub format: Format,
    #[serde(skip)]
    pub output: PathBuf,
}

impl Settings {
    fn base(command: &'static str, model: &ModelArgs, file: &FileConfig) -> CliResult<Self> {
        let rule_flag = model.sigma_w_rule.is_some();
        let (sigma_w, sigma_w_rule) = if model.sigma_w.is_some() || rule_flag {
            (model.sigma_w, model.sigma_w_rule)
        } else if file.sigma_w.is_some() && file.sigma_w_rule.is_some() {
            return Err(CliError::Config(
                "config file sets both sigma_w and sigma_w_rule".into(),
            ));
        } else if file.sigma_w.is_some() || file.sigma_w_rule.is_some() {
            (file.sigma_w, file.sigma_w_rule)
        } else {
            (None, Some(SigmaWRule::InvSqrtN))
        };
        let tol_shoot = model
            .tol_shoot
            .or(file.tol_shoot)
            .unwrap_or(Tolerances::default().shoot);
        if !(tol_shoot > 0.0 && tol_shoot.is_finite()) {
            return Err(CliError::Config(format!("tol_shoot must be positive, got {tol_shoot}")));
        }
        Ok(Settings {
            command,
            n: None,
            n_list: None,
            sigma_a: model.sigma_a.or(file.sigma_a).unwrap_or(DEFAULT_SIGMA_A),
            sigma_v: model.sigma_v.or(file.sigma_v).unwrap_or(DEFAULT_SIGMA_V),
            sigma_w,
            sigma_w_rule,
            rho: model.rho.or(file.rho).unwrap_or(DEFAULT_RHO),
            tol_shoot,
            seed: None,
            paths: None,
            antithetic: None,
            perturbations: None,
            solution: None,
            format: model.format.or(file.format).unwrap_or_default(),
            output: model
                .output
                .clone()
                .or_else(|| file.output.clone())
                .unwrap_or_else(|| PathBuf::from(".")),
        })
    }

    fn noise(&self) -> NoiseScale {
        match self.sigma_w {
            Some(s) => NoiseScale::Fixed(s),
            None => NoiseScale::InvSqrtN,
        }
    }

    /// Fixes `n` and replaces an `sigma_w` rule by its value, so the echoed
    /// configuration states the `sigma_w` actually used.
    fn with_n(mut self, n: Option<usize>) -> CliResult<Self> {
        let n = n.ok_or_else(|| CliError::Config("--n is required".into()))?;
        self.n = Some(n);
        if self.sigma_w.is_none() && n > 0 {
            self.sigma_w = Some(self.noise().sigma_w(n));
        }
        Ok(self)
    }

    pub fn params(&self) -> CliResult<ModelParams> {
        let n = self.n.ok_or_else(|| CliError::Config("--n is required".into()))?;
        let sigma_w = self.noise().sigma_w(n.max(1));
        Ok(ModelParams::new(n, self.sigma_a, self.sigma_v, sigma_w, self.rho)?)
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances {
            shoot: self.tol_shoot,
            ..Tolerances::default()
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn prepare_output(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    config: &'a Settings,
    #[serde(flatten)]
    body: T,
}

fn write_json<T: Serialize>(path: &Path, settings: &Settings, body: T) -> CliResult<()> {
    let artifact = Artifact {
        config: settings,
        body,
    };
    let mut text = serde_json::to_string_pretty(&artifact).expect("artifact serialises");
    text.push('\n');
    write(path, &text)
}

/// One cell of a tabular artifact.
#[derive(Debug, Clone, Copy)]
enum Cell {
    Int(usize),
    Num(f64),
    Empty,
}

impl Cell {
    fn opt(x: Option<f64>) -> Self {
        x.map_or(Cell::Empty, Cell::Num)
    }

    fn csv(&self) -> String {
        match *self {
            Cell::Int(k) => k.to_string(),
            Cell::Num(x) => format!("{x:.16e}"),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> serde_json::Value {
        match *self {
            Cell::Int(k) => k.into(),
            Cell::Num(x) => x.into(),
            Cell::Empty => serde_json::Value::Null,
        }
    }
}

struct Table {
    columns: &'static [&'static str],
    rows: Vec<Vec<Cell>>,
}

/// Writes `<stem>.csv` or `<stem>.json` depending on the configured format.
fn write_table(dir: &Path, stem: &str, settings: &Settings, table: &Table) -> CliResult<PathBuf> {
    match settings.format {
        Format::Csv => {
            let path = dir.join(format!("{stem}.csv"));
            let config = serde_json::to_string(settings).expect("settings serialise");
            let mut out = format!("# config: {config}\n").into_bytes();
            {
                let mut w = csv::Writer::from_writer(&mut out);
                let io_err = |e: csv::Error| CliError::Io {
                    path: path.clone(),
                    source: e.into(),
                };
                w.write_record(table.columns).map_err(io_err)?;
                for row in &table.rows {
                    w.write_record(row.iter().map(Cell::csv)).map_err(io_err)?;
                }
                w.flush().map_err(|source| CliError::Io {
                    path: path.clone(),
                    source,
                })?;
            }
            write(&path, &String::from_utf8(out).expect("csv output is utf-8"))?;
            Ok(path)
        }
        Format::Json => {
            let path = dir.join(format!("{stem}.json"));
            let rows: Vec<Vec<serde_json::Value>> =
                table.rows.iter().map(|r| r.iter().map(Cell::json).collect()).collect();
            write_json(
                &path,
                settings,
                serde_json::json!({ "columns": table.columns, "rows": rows }),
            )?;
            Ok(path)
        }
    }
}

/// Per-date coefficients. Moment and value columns of row `n` hold the state
/// entering date `n`, i.e. `Sigma_{n-1}` and `(I, J, K)_{n-1}`.
pub const COEFFICIENT_COLUMNS: &[&str] =
    &["n", "xi", "beta", "alpha", "lambda", "r", "sigma1", "sigma2", "I", "J", "K"];

fn coefficient_table(sol: &EquilibriumSolution) -> Table {
    let rows = sol
        .stages
        .iter()
        .map(|st| {
            let m = sol.moments[st.n() - 1];
            let v = sol.values[st.n() - 1];
            vec![
                Cell::Int(st.n()),
                Cell::opt(st.xi()),
                Cell::Num(st.beta()),
                Cell::Num(st.alpha()),
                Cell::Num(st.lambda()),
                Cell::Num(st.r()),
                Cell::Num(m.sigma1),
                Cell::Num(m.sigma2),
                Cell::Num(v.i),
                Cell::Num(v.j),
                Cell::Num(v.k),
            ]
        })
        .collect();
    Table {
        columns: COEFFICIENT_COLUMNS,
        rows,
    }
}

pub const ESTIMATE_COLUMNS: &[&str] = &[
    "n",
    "sigma1_hat",
    "sigma1_se",
    "sigma1",
    "sigma2_hat",
    "sigma2_se",
    "sigma2",
    "dp_mean",
    "dp_mean_se",
    "dp_sq_mean",
    "dp_sq_se",
    "dp_sq",
];

/// Rows for dates `0..=N`; moment columns are empty at `N`, price columns at 0.
fn estimate_table(sol: &EquilibriumSolution, est: &MomentEstimate) -> Table {
    let w2 = sol.params.noise_var();
    let rows = (0..=sol.dates())
        .map(|n| {
            let mut row = vec![Cell::Int(n)];
            match est.sigma.get(n) {
                Some(d) => row.extend([
                    Cell::Num(d.sigma1.mean),
                    Cell::Num(d.sigma1.se),
                    Cell::Num(sol.moments[n].sigma1),
                    Cell::Num(d.sigma2.mean),
                    Cell::Num(d.sigma2.se),
                    Cell::Num(sol.moments[n].sigma2),
                ]),
                None => row.extend([Cell::Empty; 6]),
            }
            match n.checked_sub(1).and_then(|k| est.price_changes.get(k)) {
                Some(pc) => {
                    let st = &sol.stages[n - 1];
                    let prev = sol.moments[n - 1];
                    let exact = st.lambda().powi(2) * (st.beta().powi(2) * prev.sigma1 + w2);
                    row.extend([
                        Cell::Num(pc.mean.mean),
                        Cell::Num(pc.mean.se),
                        Cell::Num(pc.second_moment.mean),
                        Cell::Num(pc.second_moment.se),
                        Cell::Num(exact),
                    ]);
                }
                None => row.extend([Cell::Empty; 5]),
            }
            row
        })
        .collect();
    Table {
        columns: ESTIMATE_COLUMNS,
        rows,
    }
}

pub const SEQUENCE_COLUMNS: &[&str] = &["N", "n", "t", "value"];

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Verify(args) => cmd_verify(args),
    }
}

fn solve_logged(settings: &Settings) -> CliResult<EquilibriumSolution> {
    let params = settings.params()?;
    info!("solving N = {} (sigma_w = {})", params.n, params.sigma_w);
    let sol = solve(&params, settings.tolerances())?;
    for w in &sol.warnings {
        warn!("{w}");
    }
    Ok(sol)
}

fn cmd_solve(args: SolveArgs) -> CliResult<()> {
    let file = load_config(args.model.config.as_deref())?;
    let settings = Settings::base("solve", &args.model, &file)?.with_n(args.n.or(file.n))?;
    let sol = solve_logged(&settings)?;

    prepare_output(&settings.output)?;
    write_json(
        &settings.output.join("solution.json"),
        &settings,
        serde_json::json!({ "solution": sol }),
    )?;
    write_table(&settings.output, "coefficients", &settings, &coefficient_table(&sol))?;
    println!(
        "N = {}: a_hat = {:.16e}, b_hat = {:.16e}, residual_phi = {:.3e}, residual_psi = {:.3e}",
        sol.dates(),
        sol.a_hat,
        sol.b_hat,
        sol.residual_phi,
        sol.residual_psi
    );
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> CliResult<()> {
    let file = load_config(args.model.config.as_deref())?;
    let mut settings = Settings::base("simulate", &args.model, &file)?.with_n(args.n.or(file.n))?;
    let paths = args.paths.or(file.paths).unwrap_or(DEFAULT_PATHS);
    let seed = args.seed.or(file.seed).unwrap_or(DEFAULT_SIM_SEED);
    let antithetic = args.antithetic || file.antithetic.unwrap_or(false);
    let deviations = args
        .perturbations
        .or(file.perturbations)
        .unwrap_or(DEFAULT_SIM_DEVIATIONS);
    settings.paths = Some(paths);
    settings.seed = Some(seed);
    settings.antithetic = Some(antithetic);
    settings.perturbations = Some(deviations);

    let config = SimConfig::new(paths, seed, antithetic)?;
    let sol = solve_logged(&settings)?;
    info!("simulating {paths} paths with seed {seed}");
    let est = estimate_moments(&sol, &config);
    let report = check_estimate(&sol, &est, &config, deviations)?;

    prepare_output(&settings.output)?;
    write_table(&settings.output, "estimates", &settings, &estimate_table(&sol, &est))?;
    write_json(
        &settings.output.join("report.json"),
        &settings,
        serde_json::json!({ "report": report }),
    )?;
    println!(
        "{} statistics, {} outside 3 SE on the first run, {} persistent violations; \
         terminal position error {:e}, terminal belief {:e}",
        report.checks.len(),
        report.first_pass_failures,
        report.violations,
        report.max_terminal_position_error,
        report.max_terminal_belief
    );
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<String> = report
            .checks
            .iter()
            .filter(|c| c.violation)
            .map(|c| format!("{}{}", c.name, date_suffix(c.n, c.k)))
            .collect();
        let mut msg = failed.join(", ");
        if !report.pathwise_exact {
            msg.insert_str(0, "pathwise terminal conditions; ");
        }
        Err(CliError::Verification(msg))
    }
}

fn date_suffix(n: Option<usize>, k: Option<usize>) -> String {
    match (n, k) {
        (Some(n), Some(k)) => format!("[{n},{k}]"),
        (Some(n), None) => format!("[{n}]"),
        _ => String::new(),
    }
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    let file = load_config(args.model.config.as_deref())?;
    let mut settings = Settings::base("sweep", &args.model, &file)?;
    let horizons = args
        .n_list
        .or(file.n_list)
        .ok_or_else(|| CliError::Config("--n-list is required".into()))?;
    if horizons.is_empty() {
        return Err(CliError::Config("--n-list is empty".into()));
    }
    settings.n_list = Some(horizons.clone());

    info!("solving horizons {horizons:?}");
    let solutions = solve_horizons(
        settings.sigma_a,
        settings.sigma_v,
        settings.rho,
        settings.noise(),
        &horizons,
        settings.tolerances(),
    )?;

    let sequence = |f: fn(&crate::model::StageCoefficients) -> f64| Table {
        columns: SEQUENCE_COLUMNS,
        rows: solutions
            .iter()
            .flat_map(|sol| {
                let big_n = sol.dates();
                sol.stages.iter().map(move |st| {
                    vec![
                        Cell::Int(big_n),
                        Cell::Int(st.n()),
                        Cell::Num(st.n() as f64 / big_n as f64),
                        Cell::Num(f(st)),
                    ]
                })
            })
            .collect(),
    };
    let gaps = consecutive_gaps(&solutions);
    let decreasing = |f: fn(&crate::sweep::HorizonGap) -> f64| {
        gaps.windows(2).all(|w| f(&w[1]) < f(&w[0]))
    };

    prepare_output(&settings.output)?;
    write_table(&settings.output, "lambda", &settings, &sequence(|s| s.lambda()))?;
    write_table(&settings.output, "r", &settings, &sequence(|s| s.r()))?;
    write_json(
        &settings.output.join("gaps.json"),
        &settings,
        serde_json::json!({
            "window": [crate::sweep::gap_window_start(&solutions), 1.0],
            "gaps": gaps,
            "lambda_gap_decreasing": decreasing(|g| g.lambda),
            "r_gap_decreasing": decreasing(|g| g.r),
        }),
    )?;
    for g in &gaps {
        println!(
            "N = {} vs {}: sup gap lambda {:.6e}, r {:.6e}",
            g.n_coarse, g.n_fine, g.lambda, g.r
        );
    }
    Ok(())
}

/// A stored solution, either bare or wrapped in a `solve` artifact.
#[derive(Deserialize)]
#[serde(untagged)]
enum StoredSolution {
    Wrapped { solution: EquilibriumSolution },
    Bare(EquilibriumSolution),
}

fn cmd_verify(args: VerifyArgs) -> CliResult<()> {
    let file = load_config(args.model.config.as_deref())?;
    let mut settings = Settings::base("verify", &args.model, &file)?;
    let seed = args.seed.or(file.seed).unwrap_or(DEFAULT_VERIFY_SEED);
    let perturbations = args
        .perturbations
        .or(file.perturbations)
        .unwrap_or(DEFAULT_PERTURBATIONS);
    settings.seed = Some(seed);
    settings.perturbations = Some(perturbations);

    let config = VerifyConfig {
        tol: settings.tolerances(),
        best_response: BestResponseConfig {
            perturbations,
            seed,
            ..BestResponseConfig::default()
        },
        ..VerifyConfig::default()
    };

    let report = match &args.solution {
        Some(path) => {
            settings.solution = Some(path.clone());
            let text = read(path)?;
            match serde_json::from_str::<StoredSolution>(&text) {
                Ok(StoredSolution::Wrapped { solution } | StoredSolution::Bare(solution)) => {
                    settings.n = Some(solution.dates());
                    settings.sigma_a = solution.params.sigma_a;
                    settings.sigma_v = solution.params.sigma_v;
                    settings.sigma_w = Some(solution.params.sigma_w);
                    settings.sigma_w_rule = None;
                    settings.rho = solution.params.rho;
                    verify_solution(&solution, &config)?
                }
                Err(e) => unreadable_solution(format!("{}: {e}", path.display())),
            }
        }
        None => {
            settings = settings.with_n(args.n.or(file.n))?;
            verify_solution(&solve_logged(&settings)?, &config)?
        }
    };

    prepare_output(&settings.output)?;
    write_json(
        &settings.output.join("report.json"),
        &settings,
        serde_json::json!({ "report": report }),
    )?;
    for c in &report.checks {
        println!(
            "{:<18} {}  worst {:.3e}  tol {:.1e}{}",
            c.name,
            if c.passed { "ok  " } else { "FAIL" },
            c.worst_residual,
            c.tolerance,
            c.detail.as_deref().map(|d| format!("  ({d})")).unwrap_or_default()
        );
    }
    if let Some(br) = &report.best_response {
        println!("{}/{} deviations weakly costlier", br.weakly_costlier, br.evaluated);
    }
    if report.passed {
        Ok(())
    } else {
        let names: Vec<&str> = report.failed().map(|c| c.name.as_str()).collect();
        Err(CliError::Verification(format!("failed checks: {}", names.join(", "))))
    }
}

/// Report for a solution file that does not parse; it fails the `structure` check.
fn unreadable_solution(reason: String) -> VerificationReport {
    VerificationReport {
        params: ModelParams {
            n: 0,
            sigma_a: f64::NAN,
            sigma_v: f64::NAN,
            sigma_w: f64::NAN,
            rho: f64::NAN,
        },
        checks: vec![Check {
            name: "structure".into(),
            worst_residual: 1.0,
            tolerance: 0.0,
            worst_date: None,
            evaluated: 1,
            passed: false,
            detail: Some(reason),
        }],
        best_response: None,
        worst_identity_residual: 0.0,
        passed: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelArgs {
        ModelArgs::default()
    }

    #[test]
    fn defaults_and_inv_sqrt_rule() {
        let s = Settings::base("solve", &model(), &FileConfig::default())
            .unwrap()
            .with_n(Some(4))
            .unwrap();
        let p = s.params().unwrap();
        assert_eq!((p.sigma_a, p.sigma_v, p.rho), (3.0, 1.0, 1.0 / 3.0));
        assert_eq!(p.sigma_w, 0.5);
        assert_eq!(s.sigma_w, Some(0.5));
    }

    #[test]
    fn flags_override_file() {
        let file = FileConfig {
            sigma_a: Some(2.0),
            rho: Some(0.5),
            sigma_w: Some(0.7),
            ..FileConfig::default()
        };
        let m = ModelArgs {
            rho: Some(0.9),
            sigma_w_rule: Some(SigmaWRule::InvSqrtN),
            ..model()
        };
        let s = Settings::base("solve", &m, &file).unwrap().with_n(Some(9)).unwrap();
        let p = s.params().unwrap();
        assert_eq!(p.sigma_a, 2.0);
        assert_eq!(p.rho, 0.9);
        assert!((p.sigma_w - 1.0 / 3.0).abs() < 1e-16);
    }

    #[test]
    fn file_with_both_noise_settings_is_rejected() {
        let file = FileConfig {
            sigma_w: Some(0.7),
            sigma_w_rule: Some(SigmaWRule::InvSqrtN),
            ..FileConfig::default()
        };
        let err = Settings::base("solve", &model(), &file).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn exit_codes() {
        let invalid = KyleError::InvalidParameter {
            name: "n",
            reason: String::new(),
        };
        assert_eq!(CliError::from(invalid).exit_code(), 2);
        assert_eq!(CliError::from(KyleError::NoBracket { doublings: 200 }).exit_code(), 3);
        assert_eq!(CliError::Verification(String::new()).exit_code(), 4);
    }

    #[test]
    fn cells_round_trip() {
        let x = 0.1f64 + 0.2;
        let s = Cell::Num(x).csv();
        assert_eq!(s.parse::<f64>().unwrap(), x);
        assert_eq!(Cell::Empty.csv(), "");
    }

    #[test]
    fn parses_flag_set() {
        let cli = Cli::try_parse_from([
            "kyle-eq", "sweep", "--n-list", "5,10,30", "--rho", "0.3333333333",
            "--sigma-w-rule", "inv-sqrt-n",
        ])
        .unwrap();
        match cli.command {
            Command::Sweep(a) => assert_eq!(a.n_list, Some(vec![5, 10, 30])),
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from([
            "kyle-eq", "solve", "--n", "3", "--sigma-w", "1", "--sigma-w-rule", "inv-sqrt-n"
        ])
        .is_err());
    }
}
