//! Adam with a per-epoch cosine schedule, stochastic weight averaging over
//! the final epochs, and per-epoch validation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSplits};
use crate::error::TrainError;
use crate::heads::Branch;
use crate::loss::{multitask_ce, weighted_total, LossSpec, LossWeights};
use crate::metrics::summary_lenient;
use crate::model::Model;
use crate::numcore::{Tape, Tensor};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// The SWA average of the tail-window snapshots.
    SwaFinal,
    /// The epoch with the best validation Avg AUC (earliest on ties).
    BestVal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub swa_start_fraction: f64,
    pub selection: Selection,
    /// Check gradient linearity on a fixed probe batch after every step.
    pub linearity_probe: bool,
    #[serde(skip)]
    pub loss: LossSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 24,
            lr_max: 1e-3,
            lr_min: 0.0,
            seed: 0,
            swa_start_fraction: 0.75,
            selection: Selection::SwaFinal,
            linearity_probe: false,
            loss: LossSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_max.is_finite() && self.lr_min.is_finite() && self.lr_min >= 0.0 && self.lr_max >= self.lr_min) {
            return bad(format!("need 0 ≤ lr_min ≤ lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if !(0.0..1.0).contains(&self.swa_start_fraction) {
            return bad(format!("swa_start_fraction must lie in [0, 1), got {}", self.swa_start_fraction));
        }
        self.loss.weights().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    /// Whether the snapshot after 1-based `epoch` enters the SWA average.
    pub fn in_swa_window(&self, epoch: usize) -> bool {
        epoch as f64 > self.swa_start_fraction * self.epochs as f64
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(πt/T))`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64, TrainError> {
    if t > total || total == 0 {
        return Err(TrainError::Contract(format!("cosine schedule step {t} outside 0..={total}")));
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Self { v: m.clone(), m, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn for_params(params: &[&mut Tensor]) -> Self {
        Self::new(params.iter().map(|p| p.numel()))
    }
}

/// One bias-corrected Adam update from the gradients stored on `params`.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState, lr: f64) -> Result<(), TrainError> {
    if params.len() != state.m.len() {
        return Err(TrainError::Contract(format!("{} parameters for an optimizer over {}", params.len(), state.m.len())));
    }
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(TrainError::Contract(format!("parameter {i} has no gradient")));
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if p.numel() != m.len() {
            return Err(TrainError::Contract(format!("parameter of {} values, moments of {}", p.numel(), m.len())));
        }
        let g = p.grad().expect("checked").to_vec();
        for (((w, g), m), v) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Running arithmetic mean of weight snapshots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SwaState {
    mean: Vec<Vec<f64>>,
    count: usize,
}

impl SwaState {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn update(&mut self, weights: &[Vec<f64>]) -> Result<(), TrainError> {
        if self.count == 0 {
            self.mean = weights.to_vec();
            self.count = 1;
            return Ok(());
        }
        if weights.len() != self.mean.len() || weights.iter().zip(&self.mean).any(|(a, b)| a.len() != b.len()) {
            return Err(TrainError::State("snapshot layout differs from earlier snapshots".into()));
        }
        self.count += 1;
        let n = self.count as f64;
        for (mean, w) in self.mean.iter_mut().zip(weights) {
            mean.iter_mut().zip(w).for_each(|(a, b)| *a += (b - *a) / n);
        }
        Ok(())
    }

    pub fn finalize(&self) -> Result<Vec<Vec<f64>>, TrainError> {
        if self.count == 0 {
            return Err(TrainError::State("no SWA snapshots were accumulated".into()));
        }
        Ok(self.mean.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub l_c: f64,
    pub l_d: f64,
    pub l_f: f64,
    pub l_total: f64,
    pub val_avg_acc: f64,
    pub val_avg_auc: f64,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,lr,L_C,L_D,L_F,L_total,val_avg_acc,val_avg_auc";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.l_c, r.l_d, r.l_f, r.l_total, r.val_avg_acc, r.val_avg_auc
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub swa_snapshots: usize,
    /// Largest per-step linearity residual, when the probe is enabled.
    pub linearity_residual: Option<f64>,
}

/// Per-branch and combined parameter gradients on one batch.
#[derive(Clone, Debug)]
pub struct GradientDecomposition {
    pub clinical: Vec<Vec<f64>>,
    pub derm: Vec<Vec<f64>>,
    pub fusion: Vec<Vec<f64>>,
    pub total: Vec<Vec<f64>>,
    pub weights: LossWeights,
}

impl GradientDecomposition {
    /// `W_C·g_C + W_D·g_D + W_F·g_F`.
    pub fn recombined(&self) -> Vec<Vec<f64>> {
        let [wc, wd, wf] = self.weights.coefficients();
        (0..self.total.len())
            .map(|p| {
                (0..self.total[p].len())
                    .map(|i| wc * self.clinical[p][i] + wd * self.derm[p][i] + wf * self.fusion[p][i])
                    .collect()
            })
            .collect()
    }

    /// Max over coordinates of `|total − recombined| / max(1, |total|)`.
    pub fn residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (t, r) in self.total.iter().zip(self.recombined()) {
            for (a, b) in t.iter().zip(r) {
                worst = worst.max((a - b).abs() / a.abs().max(1.0));
            }
        }
        worst
    }

    /// L2 norm of a branch's weighted contribution over the given parameters.
    pub fn weighted_norm(&self, branch: Branch, params: &[usize]) -> f64 {
        let [wc, wd, wf] = self.weights.coefficients();
        let (w, g) = match branch {
            Branch::Clinical => (wc, &self.clinical),
            Branch::Dermoscopy => (wd, &self.derm),
            Branch::Fusion => (wf, &self.fusion),
        };
        params.iter().flat_map(|&p| g[p].iter()).map(|x| (w * x) * (w * x)).sum::<f64>().sqrt()
    }
}

/// Indices into [`Model::named_params`] whose names start with `prefix`.
pub fn param_indices(model: &Model, prefix: &str) -> Vec<usize> {
    model.named_params().iter().enumerate().filter(|(_, (n, _))| n.starts_with(prefix)).map(|(i, _)| i).collect()
}

/// Backpropagates each branch loss and the weighted total separately over
/// the same forward pass.
pub fn gradient_decomposition(
    model: &Model,
    data: &Dataset,
    idx: &[usize],
    weights: &LossWeights,
) -> Result<GradientDecomposition, TrainError> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let logits = model.forward(&mut tape, &vars, &data.pairs(idx))?;
    let labels = data.task_labels(idx);
    let lc = multitask_ce(&mut tape, &logits.clinical, &labels)?;
    let ld = multitask_ce(&mut tape, &logits.derm, &labels)?;
    let lf = multitask_ce(&mut tape, &logits.fusion, &labels)?;
    let total = weighted_total(&mut tape, [lc, ld, lf], weights)?;
    let mut pass = |loss| -> Result<Vec<Vec<f64>>, TrainError> {
        tape.zero_grad();
        tape.backward(loss)?;
        Ok(vars
            .all
            .iter()
            .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec))
            .collect())
    };
    Ok(GradientDecomposition {
        clinical: pass(lc)?,
        derm: pass(ld)?,
        fusion: pass(lf)?,
        total: pass(total)?,
        weights: *weights,
    })
}

struct StepLosses {
    branch: [f64; 3],
    total: f64,
}

fn train_step(
    model: &mut Model,
    data: &Dataset,
    idx: &[usize],
    weights: &LossWeights,
    adam: &mut AdamState,
    lr: f64,
) -> Result<StepLosses, TrainError> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let logits = model.forward(&mut tape, &vars, &data.pairs(idx))?;
    let labels = data.task_labels(idx);
    let lc = multitask_ce(&mut tape, &logits.clinical, &labels)?;
    let ld = multitask_ce(&mut tape, &logits.derm, &labels)?;
    let lf = multitask_ce(&mut tape, &logits.fusion, &labels)?;
    let total = weighted_total(&mut tape, [lc, ld, lf], weights)?;
    let losses = StepLosses {
        branch: [lc, ld, lf].map(|v| tape.value(v).data()[0]),
        total: tape.value(total).data()[0],
    };
    if !losses.total.is_finite() {
        return Ok(losses);
    }
    tape.backward(total)?;
    let mut params = model.params_mut();
    for (p, &v) in params.iter_mut().zip(&vars.all) {
        p.zero_grad();
        if let Some(g) = tape.grad(v) {
            p.accumulate_grad(g);
        }
    }
    adam_step(&mut params, adam, lr)?;
    for p in params.iter_mut() {
        p.zero_grad();
    }
    Ok(losses)
}

/// Fusion-branch `(Avg ACC, Avg AUC)` on the given indices.
pub fn evaluate_fusion_branch(model: &Model, data: &Dataset, idx: &[usize]) -> Result<(f64, f64), TrainError> {
    let outs = model.predict(&data.pairs(idx))?;
    let probs = outs.probabilities(Branch::Fusion)?;
    Ok(summary_lenient(&probs, &data.task_labels(idx))?)
}

pub fn fit(mut model: Model, data: &Dataset, splits: &DatasetSplits, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(TrainError::Config("training needs non-empty train and validation splits".into()));
    }
    if data.tasks != model.config().heads.tasks {
        return Err(TrainError::Config(format!(
            "dataset tasks {:?} differ from model tasks {:?}",
            data.tasks,
            model.config().heads.tasks
        )));
    }
    if let Some(&i) = splits.train.iter().chain(&splits.val).find(|&&i| i >= data.len()) {
        return Err(TrainError::Config(format!("split index {i} outside dataset of {}", data.len())));
    }
    let weights = cfg.loss.weights().map_err(|e| TrainError::Config(e.to_string()))?;
    let mut adam = AdamState::for_params(&model.params_mut());
    let mut swa = SwaState::default();
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let probe: Vec<usize> = splits.train.iter().take(4).copied().collect();
    let mut linearity: Option<f64> = None;

    for e in 0..cfg.epochs {
        let epoch = e + 1;
        let lr = cosine_lr(e, cfg.epochs, cfg.lr_max, cfg.lr_min)?;
        let mut order = splits.train.clone();
        order.shuffle(&mut rng::stream(cfg.seed, rng::tags::SHUFFLE + e as u64));
        let mut sums = [0.0; 4];
        for batch in order.chunks(cfg.batch_size) {
            let step = train_step(&mut model, data, batch, &weights, &mut adam, lr)?;
            if !step.total.is_finite() || !model.named_params().iter().all(|(_, t)| t.all_finite()) {
                return Err(TrainError::Diverged { epoch });
            }
            let n = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip(step.branch.iter().chain([&step.total])) {
                *s += n * v;
            }
            if cfg.linearity_probe {
                let r = gradient_decomposition(&model, data, &probe, &weights)?.residual();
                linearity = Some(linearity.map_or(r, |m: f64| m.max(r)));
            }
        }
        let n = order.len() as f64;
        let (val_avg_acc, val_avg_auc) = evaluate_fusion_branch(&model, data, &splits.val)?;
        history.push(EpochRecord {
            epoch,
            lr,
            l_c: sums[0] / n,
            l_d: sums[1] / n,
            l_f: sums[2] / n,
            l_total: sums[3] / n,
            val_avg_acc,
            val_avg_auc,
        });
        if cfg.in_swa_window(epoch) {
            swa.update(&model.param_values())?;
        }
        if cfg.selection == Selection::BestVal && best.as_ref().is_none_or(|(b, _)| val_avg_auc > *b || b.is_nan()) {
            best = Some((val_avg_auc, model.param_values()));
        }
    }

    let final_weights = match cfg.selection {
        Selection::SwaFinal => swa.finalize()?,
        Selection::BestVal => best.expect("at least one epoch").1,
    };
    model.set_param_values(&final_weights)?;
    Ok(TrainOutcome { model, history, swa_snapshots: swa.count(), linearity_residual: linearity })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 10, 1e-3, 0.0).unwrap(), 1e-3);
        assert!(cosine_lr(10, 10, 1e-3, 1e-5).unwrap() - 1e-5 < 1e-18);
        assert!((cosine_lr(5, 10, 1.0, 0.2).unwrap() - 0.6).abs() < 1e-15);
        assert!(matches!(cosine_lr(11, 10, 1.0, 0.0), Err(TrainError::Contract(_))));
    }

    #[test]
    fn adam_first_step() {
        let mut p = Tensor::filled(&[3], 2.0);
        p.accumulate_grad(&[1.0, 1.0, 1.0]);
        let mut state = AdamState::new([3]);
        adam_step(&mut [&mut p], &mut state, 0.1).unwrap();
        for &w in p.data() {
            assert!((w - 1.9).abs() < 1e-7);
        }
        let mut z = Tensor::filled(&[2], 5.0);
        z.accumulate_grad(&[0.0, 0.0]);
        adam_step(&mut [&mut z], &mut AdamState::new([2]), 0.1).unwrap();
        assert_eq!(z.data(), &[5.0, 5.0]);
    }

    #[test]
    fn adam_needs_grads() {
        let mut p = Tensor::zeros(&[2]);
        assert!(matches!(adam_step(&mut [&mut p], &mut AdamState::new([2]), 0.1), Err(TrainError::Contract(_))));
    }

    #[test]
    fn swa_means() {
        let mut s = SwaState::default();
        assert!(matches!(s.finalize(), Err(TrainError::State(_))));
        s.update(&[vec![1.0, -2.0]]).unwrap();
        s.update(&[vec![-1.0, 2.0]]).unwrap();
        assert_eq!(s.finalize().unwrap(), vec![vec![0.0, 0.0]]);
        let (a, b, c) = (vec![0.3, 1.7], vec![-2.2, 0.4], vec![5.1, 9.9]);
        let mut s = SwaState::default();
        for w in [&a, &b, &c] {
            s.update(std::slice::from_ref(w)).unwrap();
        }
        let got = s.finalize().unwrap();
        for i in 0..2 {
            assert!((got[0][i] - (a[i] + b[i] + c[i]) / 3.0).abs() < 1e-12);
        }
        assert!(s.update(&[vec![1.0]]).is_err());
    }

    #[test]
    fn swa_window() {
        let cfg = TrainConfig { epochs: 20, ..Default::default() };
        let window: Vec<usize> = (1..=20).filter(|&e| cfg.in_swa_window(e)).collect();
        assert_eq!(window, vec![16, 17, 18, 19, 20]);
        let one = TrainConfig { epochs: 1, ..Default::default() };
        assert!(one.in_swa_window(1));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { swa_start_fraction: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { loss: LossSpec::Biased { w: 0.7 }, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn history_layout() {
        let r = EpochRecord { epoch: 1, lr: 0.001, l_c: 0.5, l_d: 0.25, l_f: 1.0, l_total: 0.6, val_avg_acc: 0.5, val_avg_auc: 0.75 };
        assert_eq!(history_csv(&[r]), format!("{HISTORY_CSV_HEADER}\n1,0.001,0.5,0.25,1,0.6,0.5,0.75\n"));
    }
}
