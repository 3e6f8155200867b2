//! `rbo`: solve, experiment, benchmark-solution and list-problems commands.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rbo_core::benchmark::{
    benchmark_solution, cached_benchmark, list_problems, problem_by_name, run_experiment, run_method,
    write_experiment_csvs, BenchmarkSolution, CantileverConfig, ExperimentSpec, ExperimentSummary,
};
use rbo_core::driver::Method;
use rbo_core::RboError;
use serde::Serialize;

use crate::config::{apply_overrides, parse_file, Config, ConfigFile, OUTPUT_DIR_ENV};

#[derive(Parser, Debug)]
#[command(name = "rbo", version, about = "Reliability-based optimization with derivative-free trust regions")]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Increase log detail (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one optimization and write result.json and trace.jsonl.
    Solve(CommonArgs),
    /// Run the repeated-run comparison and write runs.csv and summary.csv.
    Experiment {
        #[command(flatten)]
        common: CommonArgs,
        /// Print the planned matrix and exit.
        #[arg(long)]
        dry_run: bool,
        /// Reference solutions file (defaults to the built-in cache).
        #[arg(long)]
        benchmark: Option<PathBuf>,
    },
    /// Compute reference solutions with the score-function solver.
    BenchmarkSolution {
        #[arg(long = "sigma", default_values_t = [0.1, 0.01])]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 5_000_000)]
        n_ref: usize,
        #[arg(long, default_value_t = 20240501)]
        seed: u64,
        #[arg(long, env = OUTPUT_DIR_ENV, default_value = "rbo-output")]
        output_dir: PathBuf,
    },
    /// Print the built-in problems.
    ListProblems,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Configuration file (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Monte Carlo sample size per full evaluation.
    #[arg(long = "n")]
    n_mc: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override any configuration key, e.g. --set omega_minus=0.8.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

enum Failure {
    Config(RboError),
    Run(String),
}

impl From<RboError> for Failure {
    fn from(e: RboError) -> Self {
        match e {
            RboError::Configuration(_) | RboError::InvalidParameter(_) => Failure::Config(e),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Run(format!("{}: {e}", path.display()))
}

fn load_config(args: &CommonArgs) -> Result<Config, Failure> {
    let mut file = match &args.config {
        Some(p) => parse_file(p)?,
        None => ConfigFile::default(),
    };
    if let Some(v) = &args.problem {
        file.problem = Some(v.clone());
    }
    if let Some(v) = args.method {
        file.method = Some(v);
    }
    if let Some(v) = args.sigma {
        file.sigma = Some(v);
    }
    if let Some(v) = args.n_mc {
        file.n_mc = Some(v);
    }
    if let Some(v) = args.seed {
        file.seed = Some(v);
    }
    if let Some(v) = &args.output_dir {
        file.output_dir = Some(v.clone());
    } else if let Some(v) = std::env::var_os(OUTPUT_DIR_ENV) {
        file.output_dir = Some(v.into());
    }
    let file = apply_overrides(file, &args.sets)?;
    Ok(Config::effective(file)?)
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    config: &'a Config,
    result: &'a rbo_core::driver::RunResult,
}

fn cmd_solve(args: &CommonArgs) -> Result<ExitCode, Failure> {
    let cfg = load_config(args)?;
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(ExitCode::SUCCESS);
    }
    let problem = problem_by_name(&cfg.problem, cfg.sigma)?;
    let result = run_method(
        &problem,
        cfg.method,
        &cfg.x0,
        &cfg.tr_params(cfg.n_mc),
        &cfg.sf_params(cfg.n_mc),
        cfg.seed,
    )?;

    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let result_path = dir.join("result.json");
    let mut json = serde_json::to_string_pretty(&SolveOutput {
        config: &cfg,
        result: &result,
    })
    .expect("result serializes");
    json.push('\n');
    std::fs::write(&result_path, json).map_err(io_err(&result_path))?;
    let trace_path = dir.join("trace.jsonl");
    let mut trace = std::io::BufWriter::new(std::fs::File::create(&trace_path).map_err(io_err(&trace_path))?);
    for it in &result.iterations {
        serde_json::to_writer(&mut trace, it).expect("record serializes");
        trace.write_all(b"\n").map_err(io_err(&trace_path))?;
    }
    trace.flush().map_err(io_err(&trace_path))?;

    println!(
        "{} {}: x_opt = {:?}, f_opt = {}, full evaluations = {}, termination = {}",
        cfg.method,
        cfg.problem,
        result.x_opt,
        result.f_opt,
        result.counters.full_evals,
        result.termination.as_str()
    );
    println!("wrote {}", result_path.display());
    if result.termination.is_normal() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("run ended abnormally: {}", result.termination.as_str());
        Ok(ExitCode::from(2))
    }
}

fn load_references(path: Option<&Path>, sigmas: &[f64]) -> Result<Vec<BenchmarkSolution>, Failure> {
    match path {
        None => sigmas.iter().map(|&s| cached_benchmark(s).map_err(Failure::from)).collect(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            let all: Vec<BenchmarkSolution> = serde_json::from_str(&text)
                .map_err(|e| Failure::Config(RboError::Configuration(format!("{}: {e}", p.display()))))?;
            sigmas
                .iter()
                .map(|&s| {
                    all.iter().find(|b| (b.sigma_wt - s).abs() <= 1e-12 * s).cloned().ok_or_else(|| {
                        Failure::Config(RboError::Configuration(format!(
                            "{} has no solution for sigma = {s}",
                            p.display()
                        )))
                    })
                })
                .collect()
        }
    }
}

fn cmd_experiment(args: &CommonArgs, dry_run: bool, benchmark: Option<&Path>) -> Result<ExitCode, Failure> {
    let cfg = load_config(args)?;
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(ExitCode::SUCCESS);
    }
    if cfg.problem != "cantilever" {
        return Err(Failure::Config(RboError::Configuration(format!(
            "problem: experiments are defined for cantilever only, got '{}'",
            cfg.problem
        ))));
    }
    let mut cells = Vec::new();
    for &sigma in &cfg.sigmas {
        for &n in &cfg.n_values {
            for &method in &cfg.methods {
                let mut spec = ExperimentSpec::new(method, sigma, n, cfg.repetitions, cfg.seed_base);
                spec.x_0 = cfg.x0.clone();
                spec.tr_params = cfg.tr_params_for_method(method, n);
                spec.sf_params = cfg.sf_params(n);
                spec.validate()?;
                cells.push(spec);
            }
        }
    }
    if dry_run {
        println!("planned {} cells, {} runs:", cells.len(), cells.len() * cfg.repetitions);
        for c in &cells {
            println!(
                "  method={} sigma={} n_mc={} repetitions={} seeds={}..{}",
                c.method,
                c.sigma_wt,
                c.n_mc,
                c.repetitions,
                c.seed_base,
                c.seed_base + c.repetitions as u64 - 1
            );
        }
        return Ok(ExitCode::SUCCESS);
    }
    let references = load_references(benchmark, &cfg.sigmas)?;
    let mut summaries: Vec<ExperimentSummary> = Vec::new();
    for spec in &cells {
        let reference = references
            .iter()
            .find(|r| r.sigma_wt == spec.sigma_wt)
            .expect("one reference per sigma");
        log::info!("running {} sigma={} n={}", spec.method, spec.sigma_wt, spec.n_mc);
        summaries.push(run_experiment(spec, reference)?);
    }
    write_experiment_csvs(&cfg.output_dir, &summaries)?;
    println!("sigma,n_mc,method,avg_error,avg_full_evals,failure_rate");
    for s in &summaries {
        println!(
            "{},{},{},{:.4},{:.1},{:.2}",
            s.sigma, s.n_mc, s.method, s.avg_error, s.avg_full_evals, s.failure_rate
        );
    }
    println!("wrote {}", cfg.output_dir.display());
    let total = summaries.iter().map(|s| s.rows.len()).sum::<usize>();
    let failed = summaries.iter().flat_map(|s| &s.rows).filter(|r| r.failed).count();
    if failed == total {
        eprintln!("every run failed");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_benchmark_solution(sigmas: &[f64], n_ref: usize, seed: u64, output_dir: &Path) -> Result<ExitCode, Failure> {
    let mut out = Vec::new();
    for &sigma in sigmas {
        let sol = benchmark_solution(&CantileverConfig::with_sigma(sigma), n_ref, seed)?;
        println!("sigma = {sigma}: x = {:?}, f = {}, p_hat = {}", sol.x, sol.f, sol.p_hat);
        out.push(sol);
    }
    std::fs::create_dir_all(output_dir).map_err(io_err(output_dir))?;
    let path = output_dir.join("benchmark_solutions.json");
    let mut json = serde_json::to_string_pretty(&out).expect("solutions serialize");
    json.push('\n');
    std::fs::write(&path, json).map_err(io_err(&path))?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_list_problems() -> ExitCode {
    for p in list_problems() {
        println!("{}\tdim={}\tz_dim={}\t{}", p.name, p.dim, p.z_dim, p.description);
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(w) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w.max(1)).build_global() {
            eprintln!("cannot configure {w} workers: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match &cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Experiment {
            common,
            dry_run,
            benchmark,
        } => cmd_experiment(common, *dry_run, benchmark.as_deref()),
        Command::BenchmarkSolution {
            sigmas,
            n_ref,
            seed,
            output_dir,
        } => cmd_benchmark_solution(sigmas, *n_ref, *seed, output_dir),
        Command::ListProblems => Ok(cmd_list_problems()),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Config(e)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
