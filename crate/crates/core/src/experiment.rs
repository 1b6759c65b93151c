//! Test-set evaluation with late fusion, and multi-seed comparison suites.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Dataset, DatasetSplits};
use crate::encoder::Sharing;
use crate::error::TrainError;
use crate::fusion::FusionMode;
use crate::heads::{late_fuse, search_fusion_weights, Branch, BranchOutputs, ClassifierSharing, FusionWeightTriple};
use crate::loss::LossSpec;
use crate::metrics::{report, EvaluationReport, MetricReport};
use crate::model::{count_model_params, Model, ParamCounts};
use crate::par;
use crate::trainer::fit;

pub const WEIGHT_STEP: f64 = 0.1;

pub struct Evaluation {
    pub report: EvaluationReport,
    pub val: BranchOutputs,
    pub test: BranchOutputs,
}

/// Predicts validation and test splits, picks late-fusion weights (searched
/// on validation, or equal thirds) and reports test metrics.
pub fn evaluate(model: &Model, data: &Dataset, splits: &DatasetSplits, search: bool) -> Result<Evaluation, TrainError> {
    if splits.val.is_empty() || splits.test.is_empty() {
        return Err(TrainError::Config("evaluation needs non-empty validation and test splits".into()));
    }
    let val = model.predict(&data.pairs(&splits.val))?;
    let test = model.predict(&data.pairs(&splits.test))?;
    let weights = if search {
        search_fusion_weights(&val, &data.task_labels(&splits.val), WEIGHT_STEP)?
    } else {
        FusionWeightTriple::equal()
    };
    let truth = data.task_labels(&splits.test);
    let branch = |b: Branch| -> Result<MetricReport, TrainError> { Ok(report(&test.probabilities(b)?, &truth)?) };
    let report = EvaluationReport {
        weights,
        weights_searched: search,
        fused: report(&late_fuse(&test, &weights)?, &truth)?,
        clinical: branch(Branch::Clinical)?,
        derm: branch(Branch::Dermoscopy)?,
        fusion_branch: branch(Branch::Fusion)?,
    };
    Ok(Evaluation { report, val, test })
}

/// One row of a comparison suite: overrides applied to the base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharing: Option<Sharing>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_sharing: Option<ClassifierSharing>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_search")]
    pub search_weights: bool,
    #[serde(default)]
    pub base: RunConfig,
    pub cells: Vec<CellSpec>,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_search() -> bool {
    true
}

impl CellSpec {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        if let Some(s) = self.sharing {
            cfg.model.encoder.sharing = s;
        }
        if let Some(f) = self.fusion {
            cfg.model.fusion.mode = f;
        }
        if let Some(l) = self.loss {
            cfg.loss = l;
        }
        if let Some(c) = self.classifier_sharing {
            cfg.model.heads.classifier_sharing = c;
        }
        cfg
    }
}

/// Test-set numbers of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub avg_auc: f64,
    pub avg_acc: f64,
    pub clinical_auc: f64,
    pub derm_auc: f64,
    pub fusion_auc: f64,
    pub fusion_acc: f64,
    pub weights: FusionWeightTriple,
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: CellSpec,
    pub config: RunConfig,
    pub counts: ParamCounts,
    /// One entry per declared seed, in order; failures keep their message.
    pub runs: Vec<Result<RunSummary, String>>,
}

impl CellResult {
    pub fn ok_runs(&self) -> Vec<&RunSummary> {
        self.runs.iter().filter_map(|r| r.as_ref().ok()).collect()
    }

    /// Mean of a per-run value over successful runs.
    pub fn mean(&self, f: impl Fn(&RunSummary) -> f64) -> f64 {
        mean_std(&self.ok_runs().iter().map(|r| f(r)).collect::<Vec<_>>()).0
    }
}

/// Mean and sample standard deviation (0 for a single value, NaN for none).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains and evaluates one configuration at one seed; the seed drives
/// model initialisation and batch order.
pub fn run_once(cfg: &RunConfig, seed: u64, data: &Dataset, splits: &DatasetSplits, search: bool) -> Result<RunSummary, TrainError> {
    let mut train = cfg.train_config();
    train.seed = seed;
    let model = Model::new(&cfg.model, seed)?;
    let trained = fit(model, data, splits, &train)?.model;
    let r = evaluate(&trained, data, splits, search)?.report;
    Ok(RunSummary {
        seed,
        avg_auc: r.fused.avg_auc,
        avg_acc: r.fused.avg_acc,
        clinical_auc: r.clinical.avg_auc,
        derm_auc: r.derm.avg_auc,
        fusion_auc: r.fusion_branch.avg_auc,
        fusion_acc: r.fusion_branch.avg_acc,
        weights: r.weights,
    })
}

/// Runs every (cell, seed) pair, in parallel when enabled; results come
/// back in declared order and a failing run does not stop the suite.
pub fn run_suite(suite: &SuiteConfig, data: &Dataset, splits: &DatasetSplits) -> Vec<CellResult> {
    let configs: Vec<RunConfig> = suite.cells.iter().map(|c| c.apply(&suite.base)).collect();
    let jobs: Vec<(usize, u64)> =
        (0..configs.len()).flat_map(|c| suite.seeds.iter().map(move |&s| (c, s))).collect();
    let mut outcomes = par::map(&jobs, |&(c, seed)| {
        configs[c]
            .validate()
            .map_err(|e| e.to_string())
            .and_then(|_| run_once(&configs[c], seed, data, splits, suite.search_weights).map_err(|e| e.to_string()))
    })
    .into_iter();
    suite
        .cells
        .iter()
        .zip(configs)
        .map(|(cell, config)| CellResult {
            cell: cell.clone(),
            counts: count_model_params(&config.model),
            runs: outcomes.by_ref().take(suite.seeds.len()).collect(),
            config,
        })
        .collect()
}

pub const SUITE_CSV_HEADER: &str = "cell,sharing,fusion,loss,encoder_params,fusion_params,head_params,total_params,\
runs_ok,runs_failed,avg_auc_mean,avg_auc_std,avg_acc_mean,avg_acc_std,clinical_auc_mean,derm_auc_mean,\
fusion_branch_auc_mean,fusion_branch_acc_mean,fusion_branch_acc_std,errors";

fn sharing_name(s: Sharing) -> &'static str {
    match s {
        Sharing::Individual => "individual",
        Sharing::Shared => "shared",
    }
}

fn fusion_name(f: FusionMode) -> &'static str {
    match f {
        FusionMode::Concat => "concat",
        FusionMode::Ca => "ca",
        FusionMode::Sca => "sca",
    }
}

/// The summary table, one row per cell in declared order.
pub fn suite_csv(results: &[CellResult]) -> String {
    let mut out = format!("{SUITE_CSV_HEADER}\n");
    for r in results {
        let ok = r.ok_runs();
        let col = |f: fn(&RunSummary) -> f64| mean_std(&ok.iter().map(|x| f(x)).collect::<Vec<_>>());
        let (auc, auc_sd) = col(|x| x.avg_auc);
        let (acc, acc_sd) = col(|x| x.avg_acc);
        let (fa, fa_sd) = col(|x| x.fusion_acc);
        let errors: Vec<String> = r.runs.iter().filter_map(|x| x.as_ref().err()).map(|e| e.replace([',', '\n'], ";")).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{auc},{auc_sd},{acc},{acc_sd},{},{},{},{fa},{fa_sd},{}",
            r.cell.name.replace(',', ";"),
            sharing_name(r.config.model.encoder.sharing),
            fusion_name(r.config.model.fusion.mode),
            r.config.loss.label(),
            r.counts.encoder_params,
            r.counts.fusion_params,
            r.counts.head_params,
            r.counts.total,
            ok.len(),
            r.runs.len() - ok.len(),
            col(|x| x.clinical_auc).0,
            col(|x| x.derm_auc).0,
            col(|x| x.fusion_auc).0,
            errors.join(" | "),
        );
    }
    out
}

pub const RUNS_CSV_HEADER: &str =
    "cell,seed,status,avg_auc,avg_acc,clinical_auc,derm_auc,fusion_branch_auc,fusion_branch_acc,w_C,w_D,w_F";

/// Per-seed detail, one row per run.
pub fn runs_csv(results: &[CellResult], seeds: &[u64]) -> String {
    let mut out = format!("{RUNS_CSV_HEADER}\n");
    for r in results {
        for (run, seed) in r.runs.iter().zip(seeds) {
            let name = r.cell.name.replace(',', ";");
            match run {
                Ok(x) => {
                    let _ = writeln!(
                        out,
                        "{name},{seed},ok,{},{},{},{},{},{},{},{},{}",
                        x.avg_auc, x.avg_acc, x.clinical_auc, x.derm_auc, x.fusion_auc, x.fusion_acc,
                        x.weights.w_c, x.weights.w_d, x.weights.w_f
                    );
                }
                Err(_) => {
                    let _ = writeln!(out, "{name},{seed},failed,,,,,,,,,");
                }
            }
        }
    }
    out
}
