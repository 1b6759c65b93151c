//! Per-branch linear classifiers and prediction-level late fusion.

use serde::{Deserialize, Serialize};

use crate::error::{MetricError, ModelError};
use crate::numcore::{softmax_rows, Tape, Tensor, Var};
use crate::{par, rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierSharing {
    Individual,
    /// Clinical and dermoscopy branches use one classifier.
    SharedCd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Class count of every task.
    pub tasks: Vec<usize>,
    pub classifier_sharing: ClassifierSharing,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { tasks: vec![2, 3], classifier_sharing: ClassifierSharing::Individual }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.tasks.is_empty() || self.tasks.iter().any(|&k| k < 2) {
            return Err(ModelError::Config(format!("tasks need ≥1 entry, each ≥2 classes, got {:?}", self.tasks)));
        }
        Ok(())
    }
}

/// Parameters of all heads over pooled features of width `d`.
pub fn count_head_params(cfg: &HeadConfig, d: usize) -> usize {
    let modal_sets = match cfg.classifier_sharing {
        ClassifierSharing::Individual => 2,
        ClassifierSharing::SharedCd => 1,
    };
    cfg.tasks.iter().map(|&k| modal_sets * (d * k + k) + (2 * d * k + k)).sum()
}

/// `y = x·W + b` with `W[d×K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn random(d: usize, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            weight: Tensor::new(vec![d, k], rng::gaussian_vec(rng, d * k, std)).expect("consistent"),
            bias: Tensor::zeros(&[k]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Clinical,
    Dermoscopy,
    Fusion,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Clinical, Branch::Dermoscopy, Branch::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Clinical => "clinical",
            Branch::Dermoscopy => "derm",
            Branch::Fusion => "fusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    cfg: HeadConfig,
    clinical: Vec<Linear>,
    derm: Option<Vec<Linear>>,
    fusion: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub struct HeadVars {
    clinical: Vec<(Var, Var)>,
    derm: Option<Vec<(Var, Var)>>,
    fusion: Vec<(Var, Var)>,
}

pub fn build_heads(cfg: &HeadConfig, feature_dim: usize, seed: u64) -> Result<Heads, ModelError> {
    cfg.validate()?;
    let make = |tag: u64, d: usize| {
        let mut r = rng::stream(seed, rng::tags::HEADS + tag);
        cfg.tasks.iter().map(|&k| Linear::random(d, k, &mut r)).collect::<Vec<_>>()
    };
    let derm = match cfg.classifier_sharing {
        ClassifierSharing::Individual => Some(make(1, feature_dim)),
        ClassifierSharing::SharedCd => None,
    };
    Ok(Heads { cfg: cfg.clone(), clinical: make(0, feature_dim), derm, fusion: make(2, 2 * feature_dim) })
}

impl Heads {
    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn count_params(&self) -> usize {
        self.all().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    fn all(&self) -> impl Iterator<Item = &Linear> {
        self.clinical.iter().chain(self.derm.iter().flatten()).chain(&self.fusion)
    }

    pub fn branch(&self, b: Branch) -> &[Linear] {
        match b {
            Branch::Clinical => &self.clinical,
            Branch::Dermoscopy => self.derm.as_deref().unwrap_or(&self.clinical),
            Branch::Fusion => &self.fusion,
        }
    }

    pub fn branch_mut(&mut self, b: Branch) -> &mut [Linear] {
        match b {
            Branch::Clinical => &mut self.clinical,
            Branch::Dermoscopy => match &mut self.derm {
                Some(d) => d,
                None => &mut self.clinical,
            },
            Branch::Fusion => &mut self.fusion,
        }
    }

    pub(crate) fn visit_params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        let groups = [("clinical", Some(&self.clinical)), ("derm", self.derm.as_ref()), ("fusion", Some(&self.fusion))];
        for (name, group) in groups {
            for (t, l) in group.into_iter().flatten().enumerate() {
                out.push((format!("heads.{name}.{t}.weight"), &l.weight));
                out.push((format!("heads.{name}.{t}.bias"), &l.bias));
            }
        }
    }

    pub(crate) fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        let all = self.clinical.iter_mut().chain(self.derm.iter_mut().flatten()).chain(&mut self.fusion);
        for l in all {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> HeadVars {
        let mut bind = |ls: &[Linear]| ls.iter().map(|l| (tape.param(&l.weight), tape.param(&l.bias))).collect();
        let clinical = bind(&self.clinical);
        let derm = self.derm.as_ref().map(|d| bind(d));
        let fusion = bind(&self.fusion);
        HeadVars { clinical, derm, fusion }
    }

    /// Per-task logits `[B×K_t]` for pooled features `[B×d]` (or `[B×2d]`
    /// for the fusion branch).
    pub fn classify(&self, tape: &mut Tape, vars: &HeadVars, branch: Branch, pooled: Var) -> Result<Vec<Var>, ModelError> {
        let group = match branch {
            Branch::Clinical => &vars.clinical,
            Branch::Dermoscopy => vars.derm.as_ref().unwrap_or(&vars.clinical),
            Branch::Fusion => &vars.fusion,
        };
        group
            .iter()
            .map(|&(w, b)| {
                let z = tape.matmul(pooled, w)?;
                Ok(tape.add_row_bias(z, b)?)
            })
            .collect()
    }
}

/// Per-branch, per-task logits for one batch, each `[batch×K_t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchOutputs {
    pub clinical: Vec<TensorRows>,
    pub derm: Vec<TensorRows>,
    pub fusion: Vec<TensorRows>,
}

/// Serializable `[n×k]` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRows {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Tensor> for TensorRows {
    fn from(t: &Tensor) -> Self {
        Self { rows: t.rows(), cols: t.cols(), data: t.data().to_vec() }
    }
}

impl TensorRows {
    pub fn to_tensor(&self) -> Result<Tensor, ModelError> {
        Ok(Tensor::new(vec![self.rows, self.cols], self.data.clone())?)
    }
}

impl BranchOutputs {
    pub fn branch(&self, b: Branch) -> &[TensorRows] {
        match b {
            Branch::Clinical => &self.clinical,
            Branch::Dermoscopy => &self.derm,
            Branch::Fusion => &self.fusion,
        }
    }

    pub fn tasks(&self) -> usize {
        self.fusion.len()
    }

    pub fn len(&self) -> usize {
        self.fusion.first().map_or(0, |t| t.rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.len();
        let t = self.tasks();
        for b in Branch::ALL {
            let outs = self.branch(b);
            if outs.len() != t || outs.iter().any(|o| o.rows != n || o.data.len() != o.rows * o.cols) {
                return Err(ModelError::Input(format!("branch {} inconsistent with batch {n}×{t} tasks", b.name())));
            }
        }
        for task in 0..t {
            let k = self.fusion[task].cols;
            if self.clinical[task].cols != k || self.derm[task].cols != k {
                return Err(ModelError::Input(format!("task {task} class counts differ across branches")));
            }
        }
        Ok(())
    }

    /// Per-task softmax probabilities of one branch.
    pub fn probabilities(&self, b: Branch) -> Result<Vec<Tensor>, ModelError> {
        self.branch(b).iter().map(|r| Ok(softmax_rows(&r.to_tensor()?)?)).collect()
    }
}

/// Late-fusion weights on the probability simplex.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeightTriple {
    #[serde(rename = "w_C")]
    pub w_c: f64,
    #[serde(rename = "w_D")]
    pub w_d: f64,
    #[serde(rename = "w_F")]
    pub w_f: f64,
}

impl FusionWeightTriple {
    pub fn new(w_c: f64, w_d: f64, w_f: f64) -> Result<Self, ModelError> {
        let ok = [w_c, w_d, w_f].iter().all(|w| w.is_finite() && *w >= 0.0);
        if !ok || (w_c + w_d + w_f - 1.0).abs() > 1e-9 {
            return Err(ModelError::Config(format!("fusion weights ({w_c}, {w_d}, {w_f}) are not on the simplex")));
        }
        Ok(Self { w_c, w_d, w_f })
    }

    pub fn equal() -> Self {
        Self { w_c: 1.0 / 3.0, w_d: 1.0 / 3.0, w_f: 1.0 / 3.0 }
    }
}

/// Weighted average of per-branch softmax probabilities, per task.
pub fn late_fuse(outs: &BranchOutputs, w: &FusionWeightTriple) -> Result<Vec<Tensor>, ModelError> {
    outs.validate()?;
    let pc = outs.probabilities(Branch::Clinical)?;
    let pd = outs.probabilities(Branch::Dermoscopy)?;
    let pf = outs.probabilities(Branch::Fusion)?;
    pc.iter()
        .zip(&pd)
        .zip(&pf)
        .map(|((c, d), f)| {
            let data = c
                .data()
                .iter()
                .zip(d.data())
                .zip(f.data())
                .map(|((c, d), f)| w.w_c * c + w.w_d * d + w.w_f * f)
                .collect();
            Ok(Tensor::new(c.shape().to_vec(), data)?)
        })
        .collect()
}

/// Integer simplex grid `(i, j, k)` with `i + j + k = n`, `n = 1/step`.
pub fn fusion_grid(step: f64) -> Result<(u32, Vec<(u32, u32, u32)>), ModelError> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(ModelError::Config(format!("search step must lie in (0, 0.5], got {step}")));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 || n > 1000.0 {
        return Err(ModelError::Config(format!("search step {step} does not divide 1")));
    }
    let n = n as u32;
    let mut grid = Vec::new();
    for i in 0..=n {
        for j in 0..=n - i {
            grid.push((i, j, n - i - j));
        }
    }
    Ok((n, grid))
}

/// Index of the first maximum of each row.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Exhaustive simplex search maximising mean per-task accuracy on the
/// validation predictions. Ties prefer larger `w_F`, then `w_D`, then `w_C`.
///
/// `labels[t][i]` is the class of sample `i` in task `t`.
pub fn search_fusion_weights(
    val: &BranchOutputs,
    labels: &[Vec<usize>],
    step: f64,
) -> Result<FusionWeightTriple, MetricError> {
    let (n, grid) = fusion_grid(step).map_err(|e| MetricError::Size(e.to_string()))?;
    val.validate().map_err(|e| MetricError::Size(e.to_string()))?;
    if val.is_empty() {
        return Err(MetricError::Undefined("empty validation set".into()));
    }
    if labels.len() != val.tasks() || labels.iter().any(|l| l.len() != val.len()) {
        return Err(MetricError::Size("validation labels do not match predictions".into()));
    }
    let probs: Vec<[Tensor; 3]> = {
        let pc = val.probabilities(Branch::Clinical).expect("validated");
        let pd = val.probabilities(Branch::Dermoscopy).expect("validated");
        let pf = val.probabilities(Branch::Fusion).expect("validated");
        pc.into_iter().zip(pd).zip(pf).map(|((c, d), f)| [c, d, f]).collect()
    };
    let nf = n as f64;
    let correct = par::map(&grid, |&(i, j, k)| {
        let w = [i as f64 / nf, j as f64 / nf, k as f64 / nf];
        probs
            .iter()
            .zip(labels)
            .map(|(p, truth)| {
                let cols = p[0].cols();
                (0..p[0].rows())
                    .filter(|&r| {
                        let mut best = 0;
                        let mut best_v = f64::NEG_INFINITY;
                        for c in 0..cols {
                            let v = w[0] * p[0].at2(r, c) + w[1] * p[1].at2(r, c) + w[2] * p[2].at2(r, c);
                            if v > best_v {
                                best_v = v;
                                best = c;
                            }
                        }
                        best == truth[r]
                    })
                    .count()
            })
            .sum::<usize>()
    });
    // equal sample counts per task: total correct orders mean accuracy exactly
    let (&(i, j, k), _) = grid
        .iter()
        .zip(&correct)
        .max_by(|(a, ca), (b, cb)| ca.cmp(cb).then((a.2, a.1, a.0).cmp(&(b.2, b.1, b.0))))
        .expect("grid is non-empty");
    Ok(FusionWeightTriple { w_c: i as f64 / nf, w_d: j as f64 / nf, w_f: k as f64 / nf })
}
