//! Multi-task cross-entropy and the branch weighting of the total loss.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::numcore::{NumError, Tape, Var};

/// Mean over tasks of the batch-mean softmax cross-entropy.
///
/// `labels[t]` holds the batch labels of task `t`.
pub fn multitask_ce(tape: &mut Tape, logits: &[Var], labels: &[Vec<usize>]) -> Result<Var, NumError> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(NumError::Shape(format!("{} logit tensors for {} label tasks", logits.len(), labels.len())));
    }
    let mut total: Option<Var> = None;
    for (&z, y) in logits.iter().zip(labels) {
        let ce = tape.cross_entropy(z, y)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / logits.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchLosses {
    pub clinical: f64,
    pub derm: f64,
    pub fusion: f64,
}

/// Branch coefficients `(W_C, W_D, W_F)` of the total loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_c: f64,
    pub w_d: f64,
    pub w_f: f64,
    factor: Option<f64>,
}

impl LossWeights {
    /// `W·L_C + (0.5−W)·L_D + 0.5·L_F` for `W ∈ [0, 0.5]`.
    pub fn biased(w: f64) -> Result<Self, ModelError> {
        if !(0.0..=0.5).contains(&w) {
            return Err(ModelError::Config(format!("weight factor W must lie in [0, 0.5], got {w}")));
        }
        Ok(Self { w_c: w, w_d: 0.5 - w, w_f: 0.5, factor: Some(w) })
    }

    /// The unweighted mean of the three branches.
    pub fn equal() -> Self {
        let third = 1.0 / 3.0;
        Self { w_c: third, w_d: third, w_f: third, factor: None }
    }

    /// `W` for biased weights, `None` for the equal mean.
    pub fn factor(&self) -> Option<f64> {
        self.factor
    }

    pub fn coefficients(&self) -> [f64; 3] {
        [self.w_c, self.w_d, self.w_f]
    }
}

/// How the three branch losses are combined; the serialized form of
/// [`LossWeights`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLossSpec", into = "RawLossSpec")]
pub enum LossSpec {
    Biased { w: f64 },
    Equal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum LossMode {
    Biased,
    Equal,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLossSpec {
    mode: LossMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<f64>,
}

impl TryFrom<RawLossSpec> for LossSpec {
    type Error = String;

    fn try_from(raw: RawLossSpec) -> Result<Self, String> {
        match (raw.mode, raw.w) {
            (LossMode::Biased, Some(w)) => Ok(LossSpec::Biased { w }),
            (LossMode::Biased, None) => Err("biased loss needs a weight factor `w`".into()),
            (LossMode::Equal, None) => Ok(LossSpec::Equal),
            (LossMode::Equal, Some(_)) => Err("equal loss takes no weight factor".into()),
        }
    }
}

impl From<LossSpec> for RawLossSpec {
    fn from(s: LossSpec) -> Self {
        match s {
            LossSpec::Biased { w } => RawLossSpec { mode: LossMode::Biased, w: Some(w) },
            LossSpec::Equal => RawLossSpec { mode: LossMode::Equal, w: None },
        }
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::Biased { w: 0.1 }
    }
}

impl LossSpec {
    pub fn weights(&self) -> Result<LossWeights, ModelError> {
        match *self {
            LossSpec::Biased { w } => LossWeights::biased(w),
            LossSpec::Equal => Ok(LossWeights::equal()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            LossSpec::Biased { w } => format!("W={w}"),
            LossSpec::Equal => "EQ".to_string(),
        }
    }
}

pub fn biased_total(l: &BranchLosses, w: &LossWeights) -> f64 {
    w.w_c * l.clinical + w.w_d * l.derm + w.w_f * l.fusion
}

pub fn equal_total(l: &BranchLosses) -> f64 {
    (l.clinical + l.derm + l.fusion) / 3.0
}

/// Taped weighted sum of the three branch losses.
pub fn weighted_total(tape: &mut Tape, branch: [Var; 3], w: &LossWeights) -> Result<Var, NumError> {
    let [c, d, f] = branch;
    let c = tape.scale(c, w.w_c);
    let d = tape.scale(d, w.w_d);
    let f = tape.scale(f, w.w_f);
    let cd = tape.add(c, d)?;
    tape.add(cd, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    #[test]
    fn uniform_logits_give_ln2() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[4, 2]));
        let l = multitask_ce(&mut tape, &[z], &[vec![0, 1, 1, 0]]).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn huge_margin_gives_zero_loss() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[&[500.0, 0.0], &[0.0, 500.0]]));
        let l = multitask_ce(&mut tape, &[z], &[vec![0, 1]]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-200);
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(multitask_ce(&mut tape, &[z], &[vec![2]]), Err(NumError::Label { label: 2, classes: 2 })));
    }

    #[test]
    fn averaged_over_tasks() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2]));
        let b = tape.constant(Tensor::zeros(&[1, 4]));
        let l = multitask_ce(&mut tape, &[a, b], &[vec![0], vec![3]]).unwrap();
        let want = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((tape.value(l).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn biased_examples() {
        let ones = BranchLosses { clinical: 1.0, derm: 1.0, fusion: 1.0 };
        assert!((biased_total(&ones, &LossWeights::biased(0.1).unwrap()) - 1.0).abs() < 1e-15);
        let w = LossWeights::biased(0.5).unwrap();
        assert_eq!(w.w_d, 0.0);
        let l = BranchLosses { clinical: 2.0, derm: 7.0, fusion: 4.0 };
        assert_eq!(biased_total(&l, &w), 0.5 * 2.0 + 0.5 * 4.0);
        let w = LossWeights::biased(0.25).unwrap();
        assert_eq!(w.w_c, w.w_d);
        assert!(LossWeights::biased(0.6).is_err());
        assert!(LossWeights::biased(-0.1).is_err());
        assert!(LossWeights::biased(f64::NAN).is_err());
    }

    #[test]
    fn equal_examples() {
        assert_eq!(equal_total(&BranchLosses { clinical: 3.0, derm: 3.0, fusion: 3.0 }), 3.0);
        assert_eq!(equal_total(&BranchLosses { clinical: 0.0, derm: 0.0, fusion: 3.0 }), 1.0);
    }

    #[test]
    fn spec_serde() {
        let s: LossSpec = toml::from_str("mode = \"biased\"\nw = 0.2").unwrap();
        assert_eq!(s, LossSpec::Biased { w: 0.2 });
        let s: LossSpec = toml::from_str("mode = \"equal\"").unwrap();
        assert_eq!(s, LossSpec::Equal);
        assert!(toml::from_str::<LossSpec>("mode = \"equal\"\nbogus = 1").is_err());
    }
}
