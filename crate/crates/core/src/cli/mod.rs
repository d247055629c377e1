//! `mocose train|sweep|mtd-table|collapse-exp`.

pub mod config;
pub mod sweep;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::ema::EmaMode;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRow};
use crate::trainer::{self, TrainConfig, TrainReport};

pub use config::{DataConfig, ExperimentConfig, Preset};
pub use sweep::{SweepRow, SweepSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mocose", version, about = "Momentum contrastive sentence embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output directory [default: $MOCOSE_OUT_DIR, else ./runs]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Omit the timestamp comment line from CSV outputs.
    #[arg(long)]
    pub no_timestamp: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write metrics.csv, report.json and final.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.master_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Train once per (grid point, seed) and write sweep.csv.
    Sweep {
        #[arg(long)]
        sweep: PathBuf,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Tabulate the maximum traceable distance over a grid (no training).
    MtdTable {
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.8, 0.85, 0.9, 0.95, 0.99])]
        eta: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [128, 256, 512, 1024])]
        queue: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [32, 64, 128, 256])]
        batch: Vec<usize>,
        /// Also write mtd.csv to this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the predictor on/off by EMA on/off variants and compare collapse.
    CollapseExp {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        output: OutputArgs,
    },
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Input(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Format(_) => EXIT_IO,
        _ => EXIT_FAILED,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train { config, seed, output } => cmd_train(&config, seed, &output).map(|_| ()),
        Command::Sweep { sweep, jobs, output } => cmd_sweep(&sweep, jobs, &output).map(|_| ()),
        Command::MtdTable { eta, queue, batch, out } => {
            let table = mtd_table(&eta, &queue, &batch)?;
            print!("{table}");
            if let Some(dir) = out {
                write_file(&dir, "mtd.csv", table.as_bytes())?;
            }
            Ok(())
        }
        Command::CollapseExp { config, seed, output } => cmd_collapse_exp(&config, seed, &output).map(|_| ()),
    }
}

fn out_dir(output: &OutputArgs) -> PathBuf {
    output
        .out
        .clone()
        .or_else(|| std::env::var_os("MOCOSE_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn stamp(output: &OutputArgs, csv: String) -> String {
    if output.no_timestamp {
        return csv;
    }
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!("# generated_unix={secs}\n{csv}")
}

fn load_experiment(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.master_seed = s;
    }
    Ok(cfg)
}

fn base_dir(config_path: &Path) -> &Path {
    config_path.parent().unwrap_or(Path::new("."))
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,loss,eta,mtd,alignment,uniformity,eval_spearman,collapse_score\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step, r.loss, r.eta, r.mtd, r.alignment, r.uniformity, r.eval_spearman, r.collapse_score
        );
    }
    out
}

/// Trains and writes `metrics.csv`, `report.json` and `final.ckpt`.
pub fn cmd_train(config_path: &Path, seed: Option<u64>, output: &OutputArgs) -> Result<TrainReport> {
    let cfg = load_experiment(config_path, seed)?;
    let data = cfg.data.load(&cfg.train, base_dir(config_path))?;
    let (report, state) = trainer::train(&cfg.train, &data)?;
    let dir = out_dir(output);
    write_file(&dir, "metrics.csv", stamp(output, metrics_csv(&report.rows)).as_bytes())?;
    let ckpt = write_file(&dir, "final.ckpt", &state.checkpoint().to_bytes()?)?;
    let json = serde_json::json!({
        "config": cfg,
        "best_eval": report.best_eval,
        "collapsed": report.collapsed,
        "collapse_step": report.collapse_step,
        "steps_run": report.steps_run,
        "eval_errors": report.eval_errors,
        "mtd": report.mtd,
        "checkpoint": ckpt.file_name().map(|n| n.to_string_lossy().into_owned()),
        "rows": report.rows,
    });
    let text = serde_json::to_string_pretty(&json).expect("report serializes");
    write_file(&dir, "report.json", text.as_bytes())?;
    eprintln!(
        "trained {} steps: best eval {:.4}, collapsed {}, output {}",
        report.steps_run,
        report.best_eval,
        report.collapsed,
        dir.display()
    );
    Ok(report)
}

pub fn cmd_sweep(spec_path: &Path, jobs: usize, output: &OutputArgs) -> Result<Vec<SweepRow>> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let spec: SweepSpec = serde_json::from_str(&text).map_err(|e| Error::config("<sweep>", e.to_string()))?;
    spec.validate()?;
    let dir = base_dir(spec_path);
    let cfg = match &spec.base {
        None => ExperimentConfig::preset(Preset::Desk),
        Some(serde_json::Value::String(p)) => ExperimentConfig::load(&dir.join(p))?,
        Some(v) => ExperimentConfig::from_value(v.clone())?,
    };
    let data = cfg.data.load(&cfg.train, dir)?;
    let rows = sweep::run(&spec, &cfg.train, &data, jobs)?;
    write_file(&out_dir(output), "sweep.csv", stamp(output, sweep::to_csv(&rows)).as_bytes())?;
    Ok(rows)
}

/// CSV of `eta,queue,batch,mtd` over the cross product.
pub fn mtd_table(etas: &[f64], queues: &[usize], batches: &[usize]) -> Result<String> {
    let mut out = String::from("eta,queue,batch,mtd\n");
    for &eta in etas {
        for &q in queues {
            for &b in batches {
                let _ = writeln!(out, "{eta},{q},{b},{:.2}", metrics::mtd(eta, q, b)?);
            }
        }
    }
    Ok(out)
}

/// The four variants compared by `collapse-exp`: `(name, predictor, ema)`.
pub fn collapse_variants(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let frozen = |predictor: bool, ema: EmaMode| TrainConfig {
        predictor,
        ema,
        collapse: crate::trainer::CollapseConfig { stop_on_collapse: false, ..base.collapse.clone() },
        ..base.clone()
    };
    let eta0 = EmaMode::Constant { eta: 0.0 };
    vec![
        ("predictor_ema", frozen(true, base.ema)),
        ("predictor_eta0", frozen(true, eta0)),
        ("no_predictor_ema", frozen(false, base.ema)),
        ("no_predictor_eta0", frozen(false, eta0)),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantOutcome {
    pub name: &'static str,
    pub report: TrainReport,
}

/// Writes `collapse.csv` (per-eval trajectories) and `collapse_summary.csv`.
pub fn cmd_collapse_exp(config_path: &Path, seed: Option<u64>, output: &OutputArgs) -> Result<Vec<VariantOutcome>> {
    let cfg = load_experiment(config_path, seed)?;
    let data = cfg.data.load(&cfg.train, base_dir(config_path))?;
    let mut outcomes = Vec::new();
    for (name, variant) in collapse_variants(&cfg.train) {
        let (report, _) = trainer::train(&variant, &data)?;
        outcomes.push(VariantOutcome { name, report });
    }
    let mut traj = String::from("variant,step,loss,eval_spearman,collapse_score\n");
    let mut summary = String::from("variant,collapsed,collapse_step,best_eval,final_collapse_score\n");
    for o in &outcomes {
        for r in &o.report.rows {
            let _ = writeln!(traj, "{},{},{},{},{}", o.name, r.step, r.loss, r.eval_spearman, r.collapse_score);
        }
        let last = o.report.rows.last().map_or(f64::NAN, |r| r.collapse_score);
        let step = o.report.collapse_step.map_or(String::new(), |s| s.to_string());
        let _ = writeln!(summary, "{},{},{},{},{}", o.name, o.report.collapsed, step, o.report.best_eval, last);
    }
    let dir = out_dir(output);
    write_file(&dir, "collapse.csv", stamp(output, traj).as_bytes())?;
    write_file(&dir, "collapse_summary.csv", stamp(output, summary).as_bytes())?;
    for o in &outcomes {
        eprintln!("{}: collapsed {}, best eval {:.4}", o.name, o.report.collapsed, o.report.best_eval);
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mtd_table_rows() {
        let t = mtd_table(&[0.85], &[512], &[64]).unwrap();
        assert_eq!(t, "eta,queue,batch,mtd\n0.85,512,64,14.67\n");
        assert!(mtd_table(&[1.0], &[1], &[1]).is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["mocose", "train"]), EXIT_USAGE);
        assert_eq!(run(["mocose", "bogus"]), EXIT_USAGE);
        assert_eq!(run(["mocose", "mtd-table", "--eta", "0.5"]), EXIT_OK);
    }

    #[test]
    fn missing_config_file_is_io() {
        assert_eq!(run(["mocose", "train", "--config", "/nonexistent/cfg.json"]), EXIT_IO);
    }

    #[test]
    fn variants_cover_the_grid() {
        let v = collapse_variants(&TrainConfig::desk());
        assert_eq!(v.len(), 4);
        assert!(v.iter().all(|(_, c)| c.validate().is_ok() && !c.collapse.stop_on_collapse));
        assert!(!v[3].1.predictor);
        assert_eq!(v[3].1.ema, EmaMode::Constant { eta: 0.0 });
    }
}
