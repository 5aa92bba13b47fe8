use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lanetopo::harness::{
    ablate, cmd_eval, cmd_generate, cmd_train, generate_scenes, gradcheck, load_scenes,
    reference_ablation_rows, rows_to_csv, tiny_config, Axis, Dataset, RunConfig,
};
use lanetopo::Error;

#[derive(Parser)]
#[command(name = "lanetopo", version, about = "Centerline detection and lane topology on synthetic BEV scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file, JSON or key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Extra `key=value` overrides, dotted paths into the config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a scene set and its manifest.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a scene set and write checkpoints and the loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Scene directory; generated in memory from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and evaluate every combination of the given toggle axes.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma separated axes, e.g. `cyclic,p2i,seg`.
        #[arg(long, value_delimiter = ',')]
        axis: Vec<String>,
        /// Run the reference rows instead of an axis product.
        #[arg(long, conflicts_with = "axis")]
        reference: bool,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of the full loss on two small scenes.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Scale applied to the analytic gradient; anything but 1 should fail.
        #[arg(long, default_value_t = 1.0)]
        corrupt: f64,
    },
}

enum Failure {
    Validation(String),
    Numeric(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(_) => Failure::Numeric(e.to_string()),
            Error::Io(_) => Failure::Other(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

fn load_config(c: &Common, base: RunConfig) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => base,
    };
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        cfg = cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset, Error> {
    let scenes = match dir {
        Some(d) => load_scenes(d)?,
        None => generate_scenes(cfg)?,
    };
    Dataset::new(scenes, cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Generate { common } => {
            let cfg = load_config(&common, RunConfig::default())?;
            let m = cmd_generate(&cfg, &common.out)?;
            println!("wrote {} scenes to {}", m.scenes.len(), common.out.display());
        }
        Cmd::Train { common, data } => {
            let cfg = load_config(&common, RunConfig::default())?;
            let run = cmd_train(&cfg, data.as_deref(), &common.out)?;
            if let Some(last) = run.log.last() {
                println!("step {} loss {:.4}", last.step, last.loss.total);
            }
            println!("checkpoint in {}", common.out.display());
        }
        Cmd::Eval { common, checkpoint, data } => {
            if common.config.is_some() || common.seed.is_some() || !common.set.is_empty() {
                log::warn!("eval uses the configuration stored in the checkpoint");
            }
            let (report, files) = cmd_eval(&checkpoint, &data, &common.out)?;
            println!(
                "DET_l {:.4} DET_t {:.4} TOP_ll {:.4} TOP_lt {:.4} OLS {:.4}",
                report.det_l, report.det_t, report.top_ll, report.top_lt, report.ols_mean
            );
            println!("report {}", files.report.display());
        }
        Cmd::Ablate { common, axis, reference, data } => {
            let cfg = load_config(&common, RunConfig::default())?;
            let data = dataset(&cfg, data.as_deref())?;
            let rows = if reference {
                let mut rows = Vec::new();
                for (label, mut c) in reference_ablation_rows() {
                    c.optim = cfg.optim.clone();
                    c.seed = cfg.seed;
                    let mut r = ablate(&c, &[], &data)?;
                    r[0].label = label;
                    rows.append(&mut r);
                }
                rows
            } else {
                let axes = axis
                    .iter()
                    .map(|a| a.parse::<Axis>())
                    .collect::<Result<Vec<_>, _>>()?;
                ablate(&cfg, &axes, &data)?
            };
            std::fs::create_dir_all(&common.out).map_err(Error::from)?;
            let path = common.out.join("ablation.csv");
            let csv = rows_to_csv(&rows);
            std::fs::write(&path, &csv).map_err(Error::from)?;
            print!("{csv}");
        }
        Cmd::Gradcheck { common, corrupt } => {
            let cfg = load_config(&common, tiny_config())?;
            let reports = gradcheck(&cfg, corrupt)?;
            let mut ok = true;
            for r in &reports {
                println!(
                    "{}: max rel err {:.3e} (tol {:.0e}) {}",
                    r.scene,
                    r.report.max_rel_err,
                    r.report.tol,
                    if r.report.passed { "pass" } else { "FAIL" }
                );
                ok &= r.report.passed;
            }
            if !ok {
                return Err(Failure::Numeric("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
