//! `kasa`: command-line front end for factorization, truncation, gradient
//! checks, training runs and the benchmark protocols.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric check failed.

mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use kasa_core::checkpoint::Checkpoint;
use kasa_core::harness::{self, least_squares_floor, make_task, MethodRow, SweepResult, SynthTask};
use kasa_core::linalg::io::{self as mio, fmt_f64};
use kasa_core::linalg::{svd, Matrix};
use kasa_core::model::{AdaptedModel, Method};
use kasa_core::objective::{gradient_check, Regularization};
use kasa_core::trainer::{train, RunReport};
use kasa_core::{KasaError, TruncatedBase};

use config::CliConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] KasaError),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Core(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "kasa", version, about = "Singular-value adaptation experiments on dense matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Factor a matrix; print its spectrum and reconstruction error.
    Svd {
        /// Matrix file (text or binary).
        matrix: PathBuf,
        /// Write u.mat, sigma.mat and v.mat into this directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Drop the k smallest singular triplets and report the truncation error.
    Truncate {
        matrix: PathBuf,
        /// Number of singular triplets to remove.
        #[arg(long)]
        k: usize,
        /// Output file for the truncated matrix.
        #[arg(long)]
        out: PathBuf,
        /// Write the binary format instead of text.
        #[arg(long)]
        binary: bool,
    },
    /// Compare analytic gradients with central differences on a seeded problem.
    Gradcheck {
        /// Adapter rank.
        #[arg(long)]
        r: usize,
        /// Base matrix shape as NxM.
        #[arg(long, value_parser = parse_dims)]
        dims: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Truncation rank applied to the base.
        #[arg(long, default_value_t = 0)]
        k: usize,
        /// Number of samples in the batch.
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        beta: f64,
        #[arg(long, default_value_t = 1e-3)]
        gamma: f64,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// Largest accepted per-coordinate relative error.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Train one adapter; write its trace, checkpoint and effective config.
    Train {
        #[arg(long)]
        method: Method,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare methods at equal rank over seeds.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sweep the truncation rank k for KaSA.
    SweepK {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sweep the adapter rank r for every configured method.
    SweepR {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the five-variant component ablation.
    Ablation {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Tabulate |Δσ| from KaSA training traces.
    Heatmap {
        /// Trace files written by `train`.
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Preset name (`default`, `desk`) or path to a TOML file.
    #[arg(long, default_value = "default")]
    config: String,
    /// Override one key, as section.key=value. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides output.dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (n, m) = s.split_once('x').ok_or_else(|| format!("'{s}' is not of the form NxM"))?;
    let n = n.parse::<usize>().map_err(|e| format!("rows '{n}': {e}"))?;
    let m = m.parse::<usize>().map_err(|e| format!("cols '{m}': {e}"))?;
    if n == 0 || m == 0 {
        return Err("dimensions must be positive".into());
    }
    Ok((n, m))
}

impl ConfigArgs {
    /// Effective config with the output directory created.
    fn resolve(&self) -> Result<CliConfig, CliError> {
        let mut cfg = CliConfig::load(&self.config)?;
        for o in &self.overrides {
            cfg = cfg.apply_override(o)?;
        }
        if let Some(dir) = &self.out_dir {
            cfg.output.dir = dir.clone();
        }
        fs::create_dir_all(&cfg.output.dir)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", cfg.output.dir.display())))?;
        fs::write(cfg.output.dir.join("config.toml"), cfg.to_toml())?;
        Ok(cfg)
    }
}

fn read_matrix(path: &Path) -> Result<Matrix, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(mio::read_any(&bytes)?)
}

fn write_text_matrix(path: &Path, m: &Matrix) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    mio::write_text(m, &mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_svd(matrix: &Path, out_dir: Option<&Path>) -> Result<(), CliError> {
    let m = read_matrix(matrix)?;
    let f = svd(&m)?;
    let recon = f.reconstruct()?.sub(&m)?.frobenius_norm() / m.frobenius_norm().max(f64::MIN_POSITIVE);
    println!("shape {}x{}", m.rows(), m.cols());
    for (i, s) in f.sigma.iter().enumerate() {
        println!("sigma[{i}] = {}", fmt_f64(*s));
    }
    println!("reconstruction_relative_error = {}", fmt_f64(recon));
    println!("orthogonality_defect_u = {}", fmt_f64(f.u.orthogonality_defect()));
    println!("orthogonality_defect_v = {}", fmt_f64(f.v.orthogonality_defect()));
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_text_matrix(&dir.join("u.mat"), &f.u)?;
        write_text_matrix(&dir.join("sigma.mat"), &Matrix::new(f.sigma.len(), 1, f.sigma.clone())?)?;
        write_text_matrix(&dir.join("v.mat"), &f.v)?;
    }
    Ok(())
}

fn cmd_truncate(matrix: &Path, k: usize, out: &Path, binary: bool) -> Result<(), CliError> {
    let m = read_matrix(matrix)?;
    let t = TruncatedBase::truncate(&m, k)?;
    let mut w = BufWriter::new(File::create(out)?);
    if binary {
        mio::write_binary(t.w_world(), &mut w)?;
    } else {
        mio::write_text(t.w_world(), &mut w)?;
    }
    w.flush()?;
    let measured = m.sub(t.w_world())?.frobenius_norm();
    let predicted = t.predicted_error();
    println!("k = {k}");
    println!("eckart_young_error = {}", fmt_f64(predicted));
    println!("measured_error = {}", fmt_f64(measured));
    println!("relative_error = {}", fmt_f64(measured / m.frobenius_norm().max(f64::MIN_POSITIVE)));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gradcheck(r: usize, (n, m): (usize, usize), seed: u64, k: usize, batch: usize, beta: f64, gamma: f64, h: f64, tol: f64) -> Result<(), CliError> {
    let p = harness::gradcheck_problem(n, m, r, k, batch, seed)?;
    let check = gradient_check(&p.base, &p.adapter, &p.batch, &Regularization::new(beta, gamma), h)?;
    println!("coordinates = {}", check.coordinates);
    println!("max_relative_error = {}", fmt_f64(check.max_error));
    println!("worst_index = {}", check.worst_index);
    println!("worst_analytic = {}", fmt_f64(check.worst_analytic));
    println!("worst_numeric = {}", fmt_f64(check.worst_numeric));
    println!("tolerance = {tol:e}");
    if check.passes(tol) {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(CliError::Check(format!("max relative error {:e} exceeds {tol:e}", check.max_error)))
    }
}

fn build_task(cfg: &CliConfig) -> Result<SynthTask, CliError> {
    Ok(make_task(&cfg.task)?)
}

fn cmd_train(method: Method, args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let task = build_task(&cfg)?;
    let mut model = AdaptedModel::build(method, &task.w0, &cfg.adapter, cfg.train.seed)?;
    let started = Instant::now();
    let report = train(&mut model, &task.data, &cfg.train)?;
    let dir = &cfg.output.dir;
    let mut w = BufWriter::new(File::create(dir.join("trace.jsonl"))?);
    report.write_trace(&mut w)?;
    w.flush()?;
    Checkpoint::from_model(&model).save(&dir.join("adapter.ckpt"))?;

    let first = report.trace.first().expect("at least one step");
    let last = report.trace.last().expect("at least one step");
    println!("method = {method}");
    println!("steps = {}", report.trace.len());
    println!("parameter_count = {}", report.parameter_count);
    println!("initial_total = {}", fmt_f64(first.total));
    println!("final_total = {}", fmt_f64(last.total));
    println!("train_mse = {}", fmt_f64(report.train_metric));
    println!("test_mse = {}", fmt_f64(report.test_metric));
    eprintln!("wall time {:.3} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn print_floor(task: &SynthTask) -> Result<(), CliError> {
    let floor = least_squares_floor(task)?;
    println!(
        "# teacher-student proxy task; least-squares floor test_mse = {}",
        fmt_f64(floor.test_mse)
    );
    Ok(())
}

fn emit_table(path: &Path, rows: &[MethodRow]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    harness::write_table(rows, &mut buf)?;
    fs::write(path, &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}

fn emit_sweep(path: &Path, results: &[SweepResult]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    harness::write_sweep(results, &mut buf)?;
    fs::write(path, &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}

fn cmd_compare(args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let task = build_task(&cfg)?;
    let rows = harness::compare(&task, &cfg.experiment.methods, &cfg.adapter, &cfg.train, cfg.experiment.n_seeds)?;
    print_floor(&task)?;
    emit_table(&cfg.output.dir.join("compare.csv"), &rows)
}

fn cmd_sweep_k(args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let task = build_task(&cfg)?;
    let grid = if cfg.experiment.k_grid.is_empty() {
        let mut g = vec![0];
        g.extend(harness::default_k_grid(cfg.task.n, cfg.task.m, cfg.adapter.rank));
        g
    } else {
        cfg.experiment.k_grid.clone()
    };
    let result = harness::sweep_truncation(&task, &grid, &cfg.adapter, &cfg.train, cfg.experiment.n_seeds)?;
    print_floor(&task)?;
    emit_sweep(&cfg.output.dir.join("sweep_k.csv"), &[result])
}

fn cmd_sweep_r(args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let task = build_task(&cfg)?;
    let grid = if cfg.experiment.r_grid.is_empty() {
        harness::default_r_grid(cfg.task.n, cfg.task.m, cfg.adapter.truncation_k)
    } else {
        cfg.experiment.r_grid.clone()
    };
    let results = harness::sweep_rank(&task, &cfg.experiment.methods, &grid, &cfg.adapter, &cfg.train, cfg.experiment.n_seeds)?;
    print_floor(&task)?;
    emit_sweep(&cfg.output.dir.join("sweep_r.csv"), &results)
}

fn cmd_ablation(args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let task = build_task(&cfg)?;
    let rows = harness::ablation(&task, &cfg.adapter, &cfg.train, cfg.experiment.n_seeds)?;
    print_floor(&task)?;
    emit_table(&cfg.output.dir.join("ablation.csv"), &rows)
}

fn cmd_heatmap(traces: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let reports = traces
        .iter()
        .map(|p| {
            let f = File::open(p).map_err(|e| CliError::Data(format!("cannot read {}: {e}", p.display())))?;
            Ok(RunReport::read_trace(BufReader::new(f))?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let map = harness::export_heatmap(&reports)?;
    let mut w = BufWriter::new(File::create(out)?);
    map.write_csv(&mut w)?;
    w.flush()?;
    println!("rows = {}", map.values.len());
    println!("cols = {}", map.values[0].len());
    Ok(())
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(raw) = std::env::var("KASA_THREADS") {
        let n: usize = raw
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("KASA_THREADS must be a positive integer, got '{raw}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Svd { matrix, out_dir } => cmd_svd(&matrix, out_dir.as_deref()),
        Command::Truncate { matrix, k, out, binary } => cmd_truncate(&matrix, k, &out, binary),
        Command::Gradcheck {
            r,
            dims,
            seed,
            k,
            batch,
            beta,
            gamma,
            h,
            tol,
        } => cmd_gradcheck(r, dims, seed, k, batch, beta, gamma, h, tol),
        Command::Train { method, cfg } => cmd_train(method, &cfg),
        Command::Compare { cfg } => cmd_compare(&cfg),
        Command::SweepK { cfg } => cmd_sweep_k(&cfg),
        Command::SweepR { cfg } => cmd_sweep_r(&cfg),
        Command::Ablation { cfg } => cmd_ablation(&cfg),
        Command::Heatmap { traces, out } => cmd_heatmap(&traces, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
