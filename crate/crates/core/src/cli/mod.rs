//! Command-line front end: `solve`, `evaluate` and `sweep`.

use crate::case_io::{load_case, Network};
use crate::error::{Error, Result};
use crate::opfcore::{solve_with_enforcement, Method, SolveConfig, Solution, StrategyFile};
use crate::simlab::{accuracy_csv, evaluate_strategy, generate_samples, model_accuracy_report, read_samples_csv, write_samples_csv, EvalModel, EvaluationReport, RngProtocol};
use crate::wasserstein::ForecastErrors;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Environment variable that takes precedence over `--cache-dir`.
pub const CACHE_ENV: &str = "WDRO_OPF_CACHE";

#[derive(Debug, Parser)]
#[command(name = "wdro-opf", version, about = "Distributionally robust chance-constrained AC optimal power flow")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute an operating strategy and write strategy.json and summary.txt.
    Solve,
    /// Monte Carlo evaluation of a strategy file.
    Evaluate {
        /// Strategy JSON written by `solve`.
        strategy: PathBuf,
        /// Response model: full-ac, approx, lpf or dc.
        #[arg(default_value = "full-ac")]
        model: String,
    },
    /// Solve and evaluate every method at every training-sample size.
    Sweep {
        /// Response model used for the out-of-sample evaluation.
        #[arg(default_value = "approx")]
        model: String,
    },
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// Case file (MATPOWER .m or JSON).
    #[arg(long, global = true)]
    pub case: Option<PathBuf>,
    /// Forecast errors in per-unit, one column per wind farm headed by its bus id.
    #[arg(long, global = true, conflicts_with = "protocol")]
    pub samples: Option<PathBuf>,
    /// Sample-generation protocol: a JSON file or inline JSON.
    #[arg(long, global = true)]
    pub protocol: Option<String>,
    /// Method, or a comma-separated list for `sweep`.
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// Violation level, or four comma-separated levels (reserve, voltage, reactive, flow).
    #[arg(long, global = true, default_value = "0.05")]
    pub rho: String,
    /// Confidence level of the Wasserstein radius.
    #[arg(long, global = true, default_value_t = 0.9)]
    pub beta: f64,
    /// Half-width of the standardized support box.
    #[arg(long = "sigma-max", global = true, default_value_t = 10.0)]
    pub sigma_max: f64,
    /// Monte Carlo trials for evaluation.
    #[arg(long = "n-mc", global = true, default_value_t = 100_000)]
    pub n_mc: usize,
    /// Overrides the protocol seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long = "cache-dir", global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (sweep cells and Monte Carlo chunks).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

/// Protocol file: the generator recipe plus the training-set sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolFile {
    #[serde(flatten)]
    pub rng: RngProtocol,
    /// Training samples drawn by `solve`.
    #[serde(default = "default_training")]
    pub training_samples: usize,
    /// Training-set sizes visited by `sweep`.
    #[serde(default = "default_sizes")]
    pub sample_sizes: Vec<usize>,
}

fn default_training() -> usize {
    1000
}

fn default_sizes() -> Vec<usize> {
    vec![100, 1000, 10_000]
}

/// Evaluation draws come from a stream independent of the training draws.
pub fn evaluation_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

impl RunArgs {
    fn case(&self) -> Result<Network> {
        let path = self.case.as_ref().ok_or_else(|| Error::Input("--case is required".into()))?;
        load_case(path)
    }

    fn protocol(&self) -> Result<Option<ProtocolFile>> {
        let Some(p) = &self.protocol else { return Ok(None) };
        let text = if p.trim_start().starts_with('{') { p.clone() } else { fs::read_to_string(p)? };
        // Validates the generator part.
        RngProtocol::from_json(&text)?;
        let mut file: ProtocolFile = serde_json::from_str(&text)?;
        if let Some(seed) = self.seed {
            file.rng.seed = seed;
        }
        Ok(Some(file))
    }

    fn rho(&self) -> Result<[f64; 4]> {
        let vals: Vec<f64> = self
            .rho
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Input(format!("invalid --rho value '{s}'"))))
            .collect::<Result<_>>()?;
        match vals.as_slice() {
            [r] => Ok([*r; 4]),
            [a, b, c, d] => Ok([*a, *b, *c, *d]),
            _ => Err(Error::Input("--rho takes one value or four comma-separated values".into())),
        }
    }

    fn methods(&self, default: &str) -> Result<Vec<Method>> {
        self.method.as_deref().unwrap_or(default).split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
    }

    fn cache_dir(&self) -> Option<PathBuf> {
        match std::env::var_os(CACHE_ENV) {
            Some(v) if !v.is_empty() => Some(PathBuf::from(v)),
            _ => self.cache_dir.clone(),
        }
    }

    fn config(&self, method: Method) -> Result<SolveConfig> {
        let config = SolveConfig { method, rho: self.rho()?, beta: self.beta, sigma_max: self.sigma_max, cache_dir: self.cache_dir(), ..SolveConfig::default() };
        config.validate()?;
        Ok(config)
    }

    fn training_samples(&self, net: &Network) -> Result<ForecastErrors> {
        if let Some(path) = &self.samples {
            return read_samples_csv(fs::File::open(path)?, net);
        }
        match self.protocol()? {
            Some(p) => generate_samples(&p.rng, net, p.training_samples),
            None => Err(Error::Input("one of --samples or --protocol is required".into())),
        }
    }

    fn evaluation_samples(&self, net: &Network) -> Result<ForecastErrors> {
        if let Some(path) = &self.samples {
            return read_samples_csv(fs::File::open(path)?, net);
        }
        let rng = match self.protocol()? {
            Some(p) => p.rng,
            None => RngProtocol { seed: self.seed.unwrap_or(0), ..RngProtocol::default() },
        };
        generate_samples(&rng.with_seed(evaluation_seed(rng.seed)), net, self.n_mc)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }
}

/// Human-readable solve summary (costs in case units, powers in MW).
pub fn solve_summary(net: &Network, sol: &Solution) -> String {
    let r = &sol.report;
    let s = &sol.strategy;
    let mw = net.base_mva;
    let mut t = String::new();
    let _ = writeln!(t, "case            {}", net.name);
    let _ = writeln!(t, "method          {}", r.method);
    let _ = writeln!(t, "converged       {}", r.converged);
    let _ = writeln!(t, "objective       {:.4}", r.objective);
    let _ = writeln!(t, "generation cost {:.4}", r.generation_cost);
    let _ = writeln!(t, "reserve cost    {:.4}", r.reserve_cost);
    let _ = writeln!(t, "worst case      {:.4} (bound {:.4}, sample average {:.4})", r.worst_case_exact, r.worst_case_bound, r.sample_average);
    let _ = writeln!(t, "radius          {:.6}", r.epsilon);
    let _ = writeln!(t, "reserve up      {:.3} MW", s.r_up.iter().sum::<f64>() * mw);
    let _ = writeln!(t, "reserve down    {:.3} MW", s.r_dn.iter().sum::<f64>() * mw);
    let _ = writeln!(t, "sum alpha       {:.9}", s.alpha_sum());
    let _ = writeln!(t, "rounds          {} ({} records, {} active quantities)", r.rounds, r.n_records, r.active.len());
    let _ = writeln!(t, "kkt residual    {:.3e}", r.kkt_residual);
    let _ = writeln!(t, "sizing          {} computed, {} cached", r.sizing_computed, r.sizing_cached);
    let _ = writeln!(t, "time            {:.3} s", r.timings.total_s);
    t
}

pub fn evaluation_summary(net: &Network, rep: &EvaluationReport) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "model              {}", rep.model.as_str());
    let _ = writeln!(t, "trials             {} ({} failed)", rep.trials, rep.failed);
    let _ = writeln!(t, "mean cost          {:.4} (se {:.4})", rep.mean_cost, rep.cost_std_error);
    let _ = writeln!(
        t,
        "lowest reliability {:.5} ({}, se {:.5})",
        rep.lowest_reliability,
        rep.lowest_key.as_deref().unwrap_or("-"),
        rep.lowest_std_error()
    );
    let _ = writeln!(t, "reserves           {:.3} MW up, {:.3} MW down", rep.reserve_up_total * net.base_mva, rep.reserve_down_total * net.base_mva);
    t
}

fn cmd_solve(args: &RunArgs) -> Result<()> {
    let net = args.case()?;
    let samples = args.training_samples(&net)?;
    let method = args.methods("wdro")?;
    let [method] = method.as_slice() else {
        return Err(Error::Input("solve takes exactly one --method".into()));
    };
    let config = args.config(*method)?;
    let sol = solve_with_enforcement(&net, &samples, &config)?;
    let out = args.out_dir()?;
    fs::write(out.join("strategy.json"), StrategyFile::new(&net, &samples, &config, &sol).to_json()?)?;
    let summary = solve_summary(&net, &sol);
    fs::write(out.join("summary.txt"), &summary)?;
    if args.samples.is_none() {
        write_samples_csv(fs::File::create(out.join("training_samples.csv"))?, &samples, &net)?;
    }
    print!("{summary}");
    if !sol.report.converged {
        return Err(Error::Solver(format!("constraint enforcement stopped after {} rounds with violations left", sol.report.rounds)));
    }
    Ok(())
}

/// Total forecast-error levels of the model comparison (per-unit).
pub fn accuracy_levels() -> Vec<f64> {
    (-4..=4).map(|k| 0.08 * k as f64).collect()
}

fn cmd_evaluate(args: &RunArgs, strategy_path: &Path, model: &str) -> Result<()> {
    let model: EvalModel = model.parse()?;
    let net = args.case()?;
    let file = StrategyFile::from_json(&fs::read_to_string(strategy_path)?).map_err(|e| Error::Input(format!("unreadable strategy file: {e}")))?;
    let strategy = file.strategy_for(&net)?;
    let samples = args.evaluation_samples(&net)?;
    let rep = evaluate_strategy(&net, &strategy, &samples, model)?;
    let out = args.out_dir()?;
    fs::write(out.join("evaluation.json"), serde_json::to_string_pretty(&rep)?)?;
    fs::write(out.join("reliability.csv"), rep.constraints_csv())?;
    fs::write(out.join("regulation_histogram.csv"), rep.regulation.to_csv(net.base_mva))?;
    match model_accuracy_report(&net, &strategy, &accuracy_levels()) {
        Ok(rows) => fs::write(out.join("model_accuracy.csv"), accuracy_csv(&rows, net.base_mva))?,
        Err(e) => warn!("model comparison skipped: {e}"),
    }
    print!("{}", evaluation_summary(&net, &rep));
    Ok(())
}

/// One cell of the method × sample-size table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub n: usize,
    /// `ok`, `Infeasible` or `Error`.
    pub status: String,
    pub detail: String,
    pub objective: f64,
    pub simulated_cost: f64,
    pub cost_std_error: f64,
    pub reserve_up_mw: f64,
    pub reserve_down_mw: f64,
    pub lowest_reliability: f64,
    pub lowest_key: String,
    pub failed_trials: u64,
    pub solve_s: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "n",
        "status",
        "detail",
        "objective",
        "simulated_cost",
        "cost_std_error",
        "reserve_up_mw",
        "reserve_down_mw",
        "lowest_reliability",
        "lowest_key",
        "failed_trials",
        "solve_s",
    ])?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.n.to_string(),
            r.status.clone(),
            r.detail.clone(),
            r.objective.to_string(),
            r.simulated_cost.to_string(),
            r.cost_std_error.to_string(),
            r.reserve_up_mw.to_string(),
            r.reserve_down_mw.to_string(),
            r.lowest_reliability.to_string(),
            r.lowest_key.clone(),
            r.failed_trials.to_string(),
            r.solve_s.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn sweep_cell(net: &Network, training: &ForecastErrors, eval: &ForecastErrors, config: &SolveConfig, n: usize, model: EvalModel) -> SweepRow {
    let mut row = SweepRow {
        method: config.method,
        n,
        status: "ok".into(),
        detail: String::new(),
        objective: f64::NAN,
        simulated_cost: f64::NAN,
        cost_std_error: f64::NAN,
        reserve_up_mw: f64::NAN,
        reserve_down_mw: f64::NAN,
        lowest_reliability: f64::NAN,
        lowest_key: String::new(),
        failed_trials: 0,
        solve_s: 0.0,
    };
    let t = Instant::now();
    let solved = solve_with_enforcement(net, &training.head(n), config);
    row.solve_s = t.elapsed().as_secs_f64();
    let sol = match solved {
        Ok(s) => s,
        Err(e) => {
            row.status = if e.is_infeasible() { "Infeasible" } else { "Error" }.into();
            row.detail = e.to_string();
            return row;
        }
    };
    row.objective = sol.report.objective;
    if !sol.report.converged {
        row.detail = "round limit reached".into();
    }
    match evaluate_strategy(net, &sol.strategy, eval, model) {
        Ok(rep) => {
            row.simulated_cost = rep.mean_cost;
            row.cost_std_error = rep.cost_std_error;
            row.reserve_up_mw = rep.reserve_up_total * net.base_mva;
            row.reserve_down_mw = rep.reserve_down_total * net.base_mva;
            row.lowest_reliability = rep.lowest_reliability;
            row.lowest_key = rep.lowest_key.unwrap_or_default();
            row.failed_trials = rep.failed;
        }
        Err(e) => {
            row.status = "Error".into();
            row.detail = e.to_string();
        }
    }
    info!("sweep cell {} N={n}: {}", config.method, row.status);
    row
}

/// Runs every method × sample-size cell; per-cell failures are recorded.
pub fn run_sweep(args: &RunArgs, model: EvalModel) -> Result<Vec<SweepRow>> {
    let methods = args.methods("ro,wdro,mdro,gsp")?;
    let protocol = args.protocol()?.ok_or_else(|| Error::Input("sweep requires --protocol".into()))?;
    if methods.is_empty() {
        return Ok(Vec::new());
    }
    let net = args.case()?;
    let configs: Vec<SolveConfig> = methods.iter().map(|&m| args.config(m)).collect::<Result<_>>()?;
    let n_max = protocol.sample_sizes.iter().copied().max().unwrap_or(0);
    // Smaller training sets are prefixes of the largest one.
    let training = generate_samples(&protocol.rng, &net, n_max)?;
    let eval = generate_samples(&protocol.rng.with_seed(evaluation_seed(protocol.rng.seed)), &net, args.n_mc)?;
    let cells: Vec<(usize, usize)> = (0..configs.len()).flat_map(|m| protocol.sample_sizes.iter().map(move |&n| (m, n))).collect();
    let run = || cells.par_iter().map(|&(m, n)| sweep_cell(&net, &training, &eval, &configs[m], n, model)).collect();
    Ok(with_jobs(args.jobs, run))
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match jobs.and_then(|j| rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

fn cmd_sweep(args: &RunArgs, model: &str) -> Result<()> {
    let model: EvalModel = model.parse()?;
    let rows = run_sweep(args, model)?;
    let table = sweep_csv(&rows)?;
    fs::write(args.out_dir()?.join("sweep.csv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Solve => with_jobs(cli.run.jobs, || cmd_solve(&cli.run)),
        Command::Evaluate { strategy, model } => with_jobs(cli.run.jobs, || cmd_evaluate(&cli.run, strategy, model)),
        Command::Sweep { model } => cmd_sweep(&cli.run, model),
    }
}

/// Parses arguments, runs the command and returns the process exit status.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 4,
            };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("wdro-opf").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn rho_accepts_one_or_four_values() {
        assert_eq!(parse(&["solve"]).run.rho().unwrap(), [0.05; 4]);
        assert_eq!(parse(&["solve", "--rho", "0.1,0.2,0.3,0.4"]).run.rho().unwrap(), [0.1, 0.2, 0.3, 0.4]);
        assert!(parse(&["solve", "--rho", "0.1,0.2"]).run.rho().is_err());
        assert!(parse(&["solve", "--rho", "x"]).run.rho().is_err());
    }

    #[test]
    fn method_lists() {
        let c = parse(&["sweep", "--method", "ro, wdro,gsp"]);
        assert_eq!(c.run.methods("").unwrap(), vec![Method::Ro, Method::Wdro, Method::Gsp]);
        assert!(parse(&["sweep", "--method", ""]).run.methods("wdro").unwrap().is_empty());
        assert!(parse(&["sweep", "--method", "lp"]).run.methods("").is_err());
    }

    #[test]
    fn flags_after_subcommand_and_conflicts() {
        let c = parse(&["evaluate", "s.json", "approx", "--n-mc", "10", "--seed", "3"]);
        assert_eq!(c.run.n_mc, 10);
        assert!(matches!(c.command, Command::Evaluate { ref model, .. } if model == "approx"));
        assert!(Cli::try_parse_from(["wdro-opf", "solve", "--samples", "a.csv", "--protocol", "{}"]).is_err());
    }

    #[test]
    fn usage_errors_exit_with_input_code() {
        assert_eq!(main_with(["wdro-opf", "frobnicate"]), 4);
        assert_eq!(main_with(["wdro-opf", "solve"]), 4);
        assert_eq!(main_with(["wdro-opf", "--help"]), 0);
    }

    #[test]
    fn protocol_file_defaults_and_seed_override() {
        let c = parse(&["solve", "--protocol", r#"{"distribution":"gaussian","seed":1}"#, "--seed", "9"]);
        let p = c.run.protocol().unwrap().unwrap();
        assert_eq!(p.rng.seed, 9);
        assert_eq!(p.training_samples, 1000);
        assert_eq!(p.sample_sizes, vec![100, 1000, 10_000]);
    }

    #[test]
    fn accuracy_levels_span_symmetric_range() {
        let l = accuracy_levels();
        assert_eq!(l.len(), 9);
        assert!((l[0] + 0.32).abs() < 1e-12 && l[4] == 0.0 && (l[8] - 0.32).abs() < 1e-12);
    }
}
