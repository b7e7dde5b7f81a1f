//! Command-line driver: dataset generation, training, evaluation and the
//! ablation suite.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use spot_core::config::ExperimentConfig;
use spot_core::data_io::{
    checkpoint_path, load_checkpoint, load_dataset, make_benchmark, save_checkpoint, save_dataset, write_episode_logs,
    write_report, Report, ReportFormat, ReportRow,
};
use spot_core::gzsl_eval::{run_experiment_suite, GzslDataset, RunMetrics};
use spot_core::orchestrator::{final_evaluation, run_training_with, ExperimentState, FinalReport, FinalSelection};
use spot_core::policy_opt::Algorithm;
use spot_core::Error;

#[derive(Debug, Parser)]
#[command(name = "spot", version, about = "Learned selection of synthetic features for generalized zero-shot learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic benchmark dataset.
    GenData(Common),
    /// Train the selector and evaluate it, once per seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from existing checkpoints where present.
        #[arg(long)]
        resume: bool,
    },
    /// Re-evaluate trained selectors from their checkpoints.
    Eval(Common),
    /// Compare PPO, REINFORCE, random, no-selection and oracle selection.
    Ablate(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Key-value config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Base seed; runs use seed, seed+1, ...
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (the dataset directory for gen-data).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Number of seeded runs.
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long, value_parser = ["table", "records"])]
    pub format: Option<String>,
    /// Override one config key, e.g. `--set ppo.learning_rate=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// A failed command, split by exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Config(Error),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) | Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(msg) => write!(f, "{msg}"),
            Failure::Config(e) => write!(f, "{e}"),
            Failure::Runtime(e) => write!(f, "{e}"),
        }
    }
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e)
}

/// Builds the effective config: defaults, then the file, then flags.
pub fn resolve_config(common: &Common, gen_data: bool) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(Failure::Config)?,
        None => ExperimentConfig::default(),
    };
    for item in &common.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
        cfg.set(key.trim(), value).map_err(Failure::Config)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(runs) = common.runs {
        cfg.n_runs = runs;
    }
    if let Some(format) = &common.format {
        cfg.format = ReportFormat::parse(format).ok_or_else(|| Failure::Usage(format!("unknown format `{format}`")))?;
    }
    if let Some(out) = &common.out {
        if gen_data {
            cfg.data_dir = out.clone();
        } else {
            cfg.out_dir = out.clone();
        }
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit status.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(failure) => {
            eprintln!("error: {failure}");
            failure.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(common) => cmd_gen_data(&resolve_config(&common, true)?),
        Command::Train { common, resume } => cmd_train(&resolve_config(&common, false)?, resume).map(|_| ()),
        Command::Eval(common) => cmd_eval(&resolve_config(&common, false)?).map(|_| ()),
        Command::Ablate(common) => cmd_ablate(&resolve_config(&common, false)?).map(|_| ()),
    }
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let ds = make_benchmark(&cfg.benchmark).map_err(Failure::Config)?;
    save_dataset(&ds, &cfg.data_dir).map_err(runtime)?;
    println!(
        "wrote {} samples of {} classes to {}",
        ds.labels.len(),
        ds.n_classes(),
        cfg.data_dir.display()
    );
    Ok(())
}

fn load_data(cfg: &ExperimentConfig) -> Result<GzslDataset, Failure> {
    load_dataset(&cfg.data_dir).map_err(runtime)
}

fn report_name(stem: &str, format: ReportFormat) -> String {
    match format {
        ReportFormat::Table => format!("{stem}.txt"),
        ReportFormat::Records => format!("{stem}.jsonl"),
    }
}

fn emit(cfg: &ExperimentConfig, report: &Report, stem: &str) -> Result<(), Failure> {
    let path = cfg.out_dir.join(report_name(stem, cfg.format));
    write_report(report, &path, cfg.format).map_err(runtime)?;
    std::fs::write(cfg.out_dir.join("config.txt"), cfg.to_text()).map_err(|e| runtime(io_error(&cfg.out_dir, e)))?;
    print!("{}", report.render(cfg.format));
    info!("report written to {}", path.display());
    Ok(())
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn checkpoint_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("checkpoints")
}

/// Snapshot taken after episode `t`; copy it over the latest checkpoint to
/// resume from that point.
pub fn periodic_checkpoint_path(cfg: &ExperimentConfig, seed: u64, t: usize) -> PathBuf {
    checkpoint_dir(cfg).join(format!("checkpoint-seed{seed}-ep{t}.ckpt"))
}

/// Trains one seed, checkpointing every `training.checkpoint_every`
/// episodes and once more, as the latest checkpoint, at the end.
pub fn train_seed(cfg: &ExperimentConfig, ds: &GzslDataset, seed: u64, resume: bool) -> Result<ExperimentState, Error> {
    let ckpt_path = checkpoint_path(&checkpoint_dir(cfg), seed);
    let mut state = if resume && ckpt_path.exists() {
        let ckpt = load_checkpoint(&ckpt_path)?;
        let mut saved = ckpt.config.clone();
        saved.training = cfg.training;
        if saved.hash() != cfg.hash() {
            warn!("checkpoint {} was written under a different config; its settings win", ckpt_path.display());
        }
        info!("seed {seed}: resuming at episode {}", ckpt.next_episode);
        let mut state = ExperimentState::from_checkpoint(ckpt, ds.clone())?;
        state.config.training = cfg.training;
        state
    } else {
        ExperimentState::new(cfg.clone(), ds.clone(), seed)?
    };
    let every = cfg.training.checkpoint_every;
    run_training_with(&mut state, cfg.training.max_episodes, cfg.training.patience, |s| {
        let last = s.logs.last().expect("an episode just ran");
        info!("seed {seed} episode {}: q {:.4} q_hat {:.4} kept {}/{}", last.t, last.raw_q, last.q_hat, last.selected, last.pool_size);
        if every > 0 && last.t % every == 0 {
            save_checkpoint(&s.to_checkpoint(), &periodic_checkpoint_path(cfg, seed, last.t))?;
        }
        Ok(())
    })?;
    save_checkpoint(&state.to_checkpoint(), &ckpt_path)?;
    write_episode_logs(&state.logs, &cfg.out_dir.join(format!("episodes-seed{seed}.jsonl")))?;
    Ok(state)
}

pub fn cmd_train(cfg: &ExperimentConfig, resume: bool) -> Result<Report, Failure> {
    let ds = load_data(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| runtime(io_error(&cfg.out_dir, e)))?;
    let suite = run_experiment_suite(cfg.seed, cfg.n_runs, |seed| {
        let state = train_seed(cfg, &ds, seed, resume)?;
        Ok(final_evaluation(&state, FinalSelection::Policy)?.metrics())
    })
    .map_err(runtime)?;
    let report = Report {
        config_hash: cfg.hash(),
        rows: vec![ReportRow {
            model: "SPOT".into(),
            suite,
        }],
    };
    emit(cfg, &report, "report")?;
    Ok(report)
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Report, Failure> {
    let ds = load_data(cfg)?;
    let suite = run_experiment_suite(cfg.seed, cfg.n_runs, |seed| {
        let ckpt = load_checkpoint(&checkpoint_path(&checkpoint_dir(cfg), seed))?;
        let state = ExperimentState::from_checkpoint(ckpt, ds.clone())?;
        Ok(final_evaluation(&state, FinalSelection::Policy)?.metrics())
    })
    .map_err(runtime)?;
    let report = Report {
        config_hash: cfg.hash(),
        rows: vec![ReportRow {
            model: "SPOT".into(),
            suite,
        }],
    };
    emit(cfg, &report, "eval")?;
    Ok(report)
}

/// Names of the ablation arms, in report order.
pub const ABLATION_ARMS: [&str; 5] = ["PPO", "REINFORCE", "random-selection", "no-selection", "oracle-selection"];

/// All five arms for one seed. Random selection keeps as many candidates
/// per split as the PPO-trained selector did.
pub fn ablate_seed(cfg: &ExperimentConfig, ds: &GzslDataset, seed: u64) -> Result<Vec<FinalReport>, Error> {
    let train = |algorithm: Algorithm| -> Result<ExperimentState, Error> {
        let mut arm = cfg.clone();
        arm.ppo.algorithm = algorithm;
        let mut state = ExperimentState::new(arm, ds.clone(), seed)?;
        run_training_with(&mut state, cfg.training.max_episodes, cfg.training.patience, |_| Ok(()))?;
        Ok(state)
    };
    let ppo = train(Algorithm::Ppo)?;
    let reinforce = train(Algorithm::Reinforce)?;
    let ppo_report = final_evaluation(&ppo, FinalSelection::Policy)?;
    let random = final_evaluation(
        &ppo,
        FinalSelection::Random {
            seen_keep: ppo_report.seen_kept,
            unseen_keep: ppo_report.unseen_kept,
        },
    )?;
    Ok(vec![
        ppo_report,
        final_evaluation(&reinforce, FinalSelection::Policy)?,
        random,
        final_evaluation(&ppo, FinalSelection::Bypass)?,
        final_evaluation(&ppo, FinalSelection::Oracle)?,
    ])
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Report, Failure> {
    let ds = load_data(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| runtime(io_error(&cfg.out_dir, e)))?;
    let mut per_arm: Vec<Vec<RunMetrics>> = vec![Vec::new(); ABLATION_ARMS.len()];
    // One pass over the seeds trains both learners; the per-arm suites
    // below only replay the stored metrics.
    run_experiment_suite(cfg.seed, cfg.n_runs, |seed| {
        info!("ablation seed {seed}");
        let reports = ablate_seed(cfg, &ds, seed)?;
        for (arm, r) in per_arm.iter_mut().zip(&reports) {
            arm.push(r.metrics());
        }
        Ok(Vec::new())
    })
    .map_err(runtime)?;
    let mut rows = Vec::with_capacity(ABLATION_ARMS.len());
    for (name, runs) in ABLATION_ARMS.iter().zip(per_arm) {
        let mut runs = runs.into_iter();
        let suite = run_experiment_suite(cfg.seed, cfg.n_runs, |_| Ok(runs.next().expect("one entry per seed")))
            .map_err(runtime)?;
        rows.push(ReportRow {
            model: name.to_string(),
            suite,
        });
    }
    let report = Report {
        config_hash: cfg.hash(),
        rows,
    };
    emit(cfg, &report, "ablation")?;
    Ok(report)
}
