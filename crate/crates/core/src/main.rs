use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use mmfuse::config::{read_toml, ConfigError, RunConfig};
use mmfuse::data::{self, DatasetSplits, SyntheticSpec};
use mmfuse::error::{DataError, ModelError, TrainError};
use mmfuse::experiment::{evaluate, run_suite, runs_csv, suite_csv, SuiteConfig};
use mmfuse::heads::BranchOutputs;
use mmfuse::model::{count_model_params, Model};
use mmfuse::trainer::{fit, history_csv};

#[derive(Parser)]
#[command(name = "mmfuse", version, about = "Paired-modality fusion training and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset file from a spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, history and resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the validation and test splits.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Search late-fusion weights on validation instead of equal thirds.
        #[arg(long)]
        search_weights: bool,
    },
    /// Run a grid of configurations over several seeds.
    Compare {
        #[arg(long)]
        suite: PathBuf,
        /// Output directory; defaults to the suite's base output dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print parameter counts as JSON.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

enum Failure {
    Config(String),
    Io(String),
    Diverged(String),
    Mismatch(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Diverged(_) => 4,
            Failure::Mismatch(_) => 5,
            Failure::Internal(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Io(m) | Failure::Diverged(m) | Failure::Mismatch(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Invalid(_) => Failure::Config(e.to_string()),
            DataError::Mismatch(_) => Failure::Mismatch(e.to_string()),
            _ => Failure::Io(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Model(ModelError::Config(_) | ModelError::Input(_)) => {
                Failure::Config(e.to_string())
            }
            TrainError::Diverged { .. } => Failure::Diverged(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        TrainError::from(e).into()
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn out_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))
}

fn gen_data(spec: &Path, out: &Path) -> Result<(), Failure> {
    let spec: SyntheticSpec = read_toml(spec)?;
    let dataset = data::generate(&spec)?;
    data::save_dataset(&dataset, out)?;
    println!("wrote {} samples to {}", dataset.len(), out.display());
    println!("digest {}", data::file_digest(out)?);
    Ok(())
}

fn prepare(config: &Path) -> Result<(RunConfig, data::Dataset, DatasetSplits), Failure> {
    let cfg = RunConfig::load(config)?;
    let dataset = cfg.load_data()?;
    let splits = cfg.splits(dataset.len())?;
    Ok((cfg, dataset, splits))
}

fn train(config: &Path) -> Result<(), Failure> {
    let (cfg, dataset, splits) = prepare(config)?;
    let dir = &cfg.output.dir;
    out_dir(dir)?;
    write(&dir.join("resolved_config.toml"), cfg.to_toml())?;
    let train = cfg.train_config();
    let model = Model::new(&cfg.model, train.seed)?;
    let outcome = fit(model, &dataset, &splits, &train)?;
    write(&dir.join("history.csv"), history_csv(&outcome.history))?;
    outcome.model.save_checkpoint(&dir.join("checkpoint.pemw"))?;
    write(&dir.join("splits.json"), serde_json::to_string(&splits).expect("splits serialize"))?;
    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "trained {} epochs; final loss {:.6}, val avg acc {:.4}, val avg auc {:.4}",
        last.epoch, last.l_total, last.val_avg_acc, last.val_avg_auc
    );
    println!("outputs in {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct Predictions<'a> {
    split: &'a str,
    indices: &'a [usize],
    labels: Vec<Vec<usize>>,
    outputs: &'a BranchOutputs,
}

fn evaluate_cmd(config: &Path, checkpoint: &Path, search: bool) -> Result<(), Failure> {
    let (cfg, dataset, splits) = prepare(config)?;
    let model = Model::load_checkpoint(&cfg.model, checkpoint)?;
    let eval = evaluate(&model, &dataset, &splits, search)?;
    let dir = &cfg.output.dir;
    out_dir(dir)?;
    write(&dir.join("report.json"), eval.report.to_json())?;
    write(&dir.join("report.csv"), eval.report.to_csv())?;
    for (name, idx, outs) in [("val", &splits.val, &eval.val), ("test", &splits.test, &eval.test)] {
        let p = Predictions { split: name, indices: idx, labels: dataset.task_labels(idx), outputs: outs };
        write(&dir.join(format!("{name}_predictions.json")), serde_json::to_string(&p).expect("predictions serialize"))?;
    }
    let w = &eval.report.weights;
    println!("fusion weights w_C={} w_D={} w_F={}", w.w_c, w.w_d, w.w_f);
    println!("test avg auc {:.4}, avg acc {:.4}", eval.report.fused.avg_auc, eval.report.fused.avg_acc);
    Ok(())
}

fn compare(suite_path: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let mut suite: SuiteConfig = read_toml(suite_path)?;
    suite.base.rebase(suite_path.parent().unwrap_or(Path::new("")));
    if suite.cells.is_empty() || suite.seeds.is_empty() {
        return Err(Failure::Config("suite needs at least one cell and one seed".into()));
    }
    let dataset = suite.base.load_data()?;
    let splits = suite.base.splits(dataset.len())?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| suite.base.output.dir.clone());
    out_dir(&dir)?;
    write(&dir.join("resolved_suite.toml"), toml::to_string(&suite).expect("suite serializes"))?;
    let results = run_suite(&suite, &dataset, &splits);
    let table = suite_csv(&results);
    write(&dir.join("compare.csv"), &table)?;
    write(&dir.join("compare_runs.csv"), runs_csv(&results, &suite.seeds))?;
    print!("{table}");
    let failed: usize = results.iter().map(|r| r.runs.len() - r.ok_runs().len()).sum();
    if failed > 0 {
        eprintln!("{failed} run(s) failed; see the errors column");
    }
    Ok(())
}

fn params(config: &Path) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let counts = count_model_params(&cfg.model);
    println!("{}", serde_json::to_string_pretty(&counts).expect("counts serialize"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenData { spec, out } => gen_data(spec, out),
        Cmd::Train { config } => train(config),
        Cmd::Evaluate { config, checkpoint, search_weights } => evaluate_cmd(config, checkpoint, *search_weights),
        Cmd::Compare { suite, out } => compare(suite, out.as_deref()),
        Cmd::Params { config } => params(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
