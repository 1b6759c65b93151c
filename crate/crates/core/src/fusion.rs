//! Cross-modal interaction between stage features: plain pass-through
//! (concatenation happens at the heads), cross-attention with one projection
//! set per modality, and cross-attention whose projections are shared by
//! both modalities.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::numcore::{Tape, Tensor, Var};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Concat,
    Ca,
    Sca,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    None,
    InvSqrtD,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Encoder stages whose outputs are refined before the next stage.
    pub stages: Vec<usize>,
    pub scale: AttentionScale,
    /// Attend within each modality instead of across (key/value from the
    /// query's own features).
    pub self_variant: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { mode: FusionMode::Sca, stages: vec![1, 2], scale: AttentionScale::InvSqrtD, self_variant: false }
    }
}

impl FusionConfig {
    pub fn validate(&self, n_stages: usize) -> Result<(), ModelError> {
        if let Some(&s) = self.stages.iter().find(|&&s| s >= n_stages) {
            return Err(ModelError::Config(format!("fusion stage {s} outside encoder stages 0..{n_stages}")));
        }
        let mut sorted = self.stages.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.stages {
            return Err(ModelError::Config(format!(
                "fusion stages must be strictly increasing, got {:?}",
                self.stages
            )));
        }
        Ok(())
    }

    pub fn active(&self) -> bool {
        self.mode != FusionMode::Concat && !self.stages.is_empty()
    }
}

/// Query/key/value maps of a 1×1 bias-free convolution, stored `[d×d]` and
/// applied to token rows as `X·W`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProjections {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl AttentionProjections {
    pub fn random(d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut mat = || Tensor::new(vec![d, d], rng::gaussian_vec(rng, d * d, std)).expect("square");
        Self { wq: mat(), wk: mat(), wv: mat() }
    }

    pub fn identity(d: usize) -> Self {
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        Self { wq: eye.clone(), wk: eye.clone(), wv: eye }
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    fn check(&self) -> Result<usize, ModelError> {
        let d = self.dim();
        for w in [&self.wq, &self.wk, &self.wv] {
            if w.shape() != [d, d] {
                return Err(ModelError::Config(format!("projection {:?} is not {d}×{d}", w.shape())));
            }
        }
        Ok(d)
    }

    pub fn bind(&self, tape: &mut Tape) -> ProjectionVars {
        ProjectionVars { wq: tape.param(&self.wq), wk: tape.param(&self.wk), wv: tape.param(&self.wv) }
    }

    pub fn bind_constant(&self, tape: &mut Tape) -> ProjectionVars {
        ProjectionVars {
            wq: tape.constant(self.wq.clone()),
            wk: tape.constant(self.wk.clone()),
            wv: tape.constant(self.wv.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Fusion weights at one stage.
#[derive(Clone, Debug, PartialEq)]
pub enum StageFusion {
    Ca { clinical: AttentionProjections, derm: AttentionProjections },
    Sca(AttentionProjections),
}

#[derive(Clone, Copy, Debug)]
pub enum StageFusionVars {
    Ca { clinical: ProjectionVars, derm: ProjectionVars },
    Sca(ProjectionVars),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModule {
    cfg: FusionConfig,
    stages: Vec<(usize, StageFusion)>,
}

/// Projection parameters the configuration adds for the given channel plan.
pub fn count_fusion_params(cfg: &FusionConfig, stage_channels: &[usize]) -> usize {
    let per_d2 = match cfg.mode {
        FusionMode::Concat => return 0,
        FusionMode::Sca => 3,
        FusionMode::Ca => 6,
    };
    cfg.stages.iter().map(|&s| per_d2 * stage_channels[s] * stage_channels[s]).sum()
}

pub fn build_fusion(cfg: &FusionConfig, stage_channels: &[usize], seed: u64) -> Result<FusionModule, ModelError> {
    cfg.validate(stage_channels.len())?;
    let stages = match cfg.mode {
        FusionMode::Concat => Vec::new(),
        mode => cfg
            .stages
            .iter()
            .map(|&s| {
                let d = stage_channels[s];
                let mut r = rng::stream(seed, rng::tags::FUSION + s as u64);
                let fused = if mode == FusionMode::Ca {
                    let clinical = AttentionProjections::random(d, &mut r);
                    StageFusion::Ca { clinical, derm: AttentionProjections::random(d, &mut r) }
                } else {
                    StageFusion::Sca(AttentionProjections::random(d, &mut r))
                };
                (s, fused)
            })
            .collect(),
    };
    Ok(FusionModule { cfg: cfg.clone(), stages })
}

impl FusionModule {
    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn count_params(&self) -> usize {
        self.stages
            .iter()
            .map(|(_, f)| match f {
                StageFusion::Ca { clinical, derm } => proj_params(clinical) + proj_params(derm),
                StageFusion::Sca(p) => proj_params(p),
            })
            .sum()
    }

    pub fn stage_weights(&self, stage: usize) -> Option<&StageFusion> {
        self.stages.iter().find(|(s, _)| *s == stage).map(|(_, f)| f)
    }

    pub fn stage_weights_mut(&mut self, stage: usize) -> Option<&mut StageFusion> {
        self.stages.iter_mut().find(|(s, _)| *s == stage).map(|(_, f)| f)
    }

    pub(crate) fn visit_params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (s, f) in &self.stages {
            let mut push = |tag: &str, p: &'a AttentionProjections| {
                out.push((format!("fusion.{s}.{tag}.wq"), &p.wq));
                out.push((format!("fusion.{s}.{tag}.wk"), &p.wk));
                out.push((format!("fusion.{s}.{tag}.wv"), &p.wv));
            };
            match f {
                StageFusion::Ca { clinical, derm } => {
                    push("clinical", clinical);
                    push("derm", derm);
                }
                StageFusion::Sca(p) => push("shared", p),
            }
        }
    }

    pub(crate) fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for (_, f) in &mut self.stages {
            let projs: Vec<&mut AttentionProjections> = match f {
                StageFusion::Ca { clinical, derm } => vec![clinical, derm],
                StageFusion::Sca(p) => vec![p],
            };
            for p in projs {
                out.push(&mut p.wq);
                out.push(&mut p.wk);
                out.push(&mut p.wv);
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<(usize, StageFusionVars)> {
        self.stages
            .iter()
            .map(|(s, f)| {
                let v = match f {
                    StageFusion::Ca { clinical, derm } => {
                        StageFusionVars::Ca { clinical: clinical.bind(tape), derm: derm.bind(tape) }
                    }
                    StageFusion::Sca(p) => StageFusionVars::Sca(p.bind(tape)),
                };
                (*s, v)
            })
            .collect()
    }
}

fn proj_params(p: &AttentionProjections) -> usize {
    p.wq.numel() + p.wk.numel() + p.wv.numel()
}

/// Residual attention over token rows: `Xq + softmax(Q·Kᵀ·s)·V` with
/// `Q = Xq·Wq`, `K = Xkv·Wk`, `V = Xkv·Wv`.
pub fn cross_attend(
    tape: &mut Tape,
    xq: Var,
    xkv: Var,
    proj: &ProjectionVars,
    scale: AttentionScale,
) -> Result<Var, ModelError> {
    let (sq, skv) = (tape.shape(xq).to_vec(), tape.shape(xkv).to_vec());
    let d = tape.shape(proj.wq)[0];
    if sq.len() != 2 || sq != skv || sq[1] != d {
        return Err(ModelError::Input(format!(
            "cross_attend tokens {sq:?} / {skv:?} against projection dim {d}"
        )));
    }
    let q = tape.matmul(xq, proj.wq)?;
    let k = tape.matmul(xkv, proj.wk)?;
    let v = tape.matmul(xkv, proj.wv)?;
    let kt = tape.transpose(k)?;
    let mut scores = tape.matmul(q, kt)?;
    if scale == AttentionScale::InvSqrtD {
        scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    }
    let attn = tape.softmax_rows(scores)?;
    let attended = tape.matmul(attn, v)?;
    Ok(tape.add(xq, attended)?)
}

/// Untaped convenience wrapper around [`cross_attend`].
pub fn cross_attend_tensors(
    xq: &Tensor,
    xkv: &Tensor,
    proj: &AttentionProjections,
    scale: AttentionScale,
) -> Result<Tensor, ModelError> {
    proj.check()?;
    let mut tape = Tape::new();
    let p = proj.bind_constant(&mut tape);
    let (q, kv) = (tape.constant(xq.clone()), tape.constant(xkv.clone()));
    let out = cross_attend(&mut tape, q, kv, &p, scale)?;
    Ok(tape.value(out).clone())
}

/// `[C×H×W] → [HW×C]`
fn to_tokens(tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(ModelError::Input(format!("stage feature must be [C×H×W], got {s:?}")));
    }
    let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    Ok(tape.transpose(flat)?)
}

fn from_tokens(tape: &mut Tape, t: Var, shape: &[usize]) -> Result<Var, ModelError> {
    let back = tape.transpose(t)?;
    Ok(tape.reshape(back, shape)?)
}

/// Refines a pair of same-shaped stage features `[C×H×W]`.
pub fn refine_pair(
    tape: &mut Tape,
    c: Var,
    d: Var,
    cfg: &FusionConfig,
    weights: Option<&StageFusionVars>,
) -> Result<(Var, Var), ModelError> {
    let shape = tape.shape(c).to_vec();
    if tape.shape(d) != shape.as_slice() {
        return Err(ModelError::Input(format!("refine_pair of {shape:?} and {:?}", tape.shape(d))));
    }
    let (pc, pd) = match (cfg.mode, weights) {
        (FusionMode::Concat, None) => return Ok((c, d)),
        (FusionMode::Ca, Some(StageFusionVars::Ca { clinical, derm })) => (*clinical, *derm),
        (FusionMode::Sca, Some(StageFusionVars::Sca(shared))) => (*shared, *shared),
        (mode, w) => {
            return Err(ModelError::Config(format!(
                "fusion mode {mode:?} does not match supplied weights {}",
                match w {
                    None => "none",
                    Some(StageFusionVars::Ca { .. }) => "CA",
                    Some(StageFusionVars::Sca(_)) => "SCA",
                }
            )))
        }
    };
    let tc = to_tokens(tape, c)?;
    let td = to_tokens(tape, d)?;
    let (kv_c, kv_d) = if cfg.self_variant { (tc, td) } else { (td, tc) };
    let rc = cross_attend(tape, tc, kv_c, &pc, cfg.scale)?;
    let rd = cross_attend(tape, td, kv_d, &pd, cfg.scale)?;
    Ok((from_tokens(tape, rc, &shape)?, from_tokens(tape, rd, &shape)?))
}

/// Untaped wrapper around [`refine_pair`].
pub fn refine_pair_tensors(
    c: &Tensor,
    d: &Tensor,
    cfg: &FusionConfig,
    weights: Option<&StageFusion>,
) -> Result<(Tensor, Tensor), ModelError> {
    let mut tape = Tape::new();
    let vars = weights.map(|w| match w {
        StageFusion::Ca { clinical, derm } => {
            StageFusionVars::Ca { clinical: clinical.bind_constant(&mut tape), derm: derm.bind_constant(&mut tape) }
        }
        StageFusion::Sca(p) => StageFusionVars::Sca(p.bind_constant(&mut tape)),
    });
    let (cv, dv) = (tape.constant(c.clone()), tape.constant(d.clone()));
    let (rc, rd) = refine_pair(&mut tape, cv, dv, cfg, vars.as_ref())?;
    Ok((tape.value(rc).clone(), tape.value(rd).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), rng::gaussian_vec(&mut rng::stream(seed, 5), n, 1.0)).unwrap()
    }

    #[test]
    fn hand_computed_two_tokens() {
        let x = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        let out = cross_attend_tensors(&x, &x, &AttentionProjections::identity(1), AttentionScale::None).unwrap();
        let expected0 = 1.0 + E / (E + 1.0);
        assert!((out.data()[0] - expected0).abs() < 1e-12);
        assert!((out.data()[0] - 1.7311).abs() < 1e-4);
        assert!((out.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut p = AttentionProjections::random(4, &mut rng::stream(1, 1));
        p.wv = Tensor::zeros(&[4, 4]);
        let xq = rand_tensor(&[6, 4], 1);
        let xkv = rand_tensor(&[6, 4], 2);
        let out = cross_attend_tensors(&xq, &xkv, &p, AttentionScale::InvSqrtD).unwrap();
        assert_eq!(out, xq);

        let cfg = FusionConfig { mode: FusionMode::Ca, ..Default::default() };
        let mut q = p.clone();
        q.wq = rand_tensor(&[4, 4], 9);
        let w = StageFusion::Ca { clinical: p, derm: q };
        let c = rand_tensor(&[4, 2, 3], 3);
        let d = rand_tensor(&[4, 2, 3], 4);
        assert_eq!(refine_pair_tensors(&c, &d, &cfg, Some(&w)).unwrap(), (c, d));
    }

    #[test]
    fn shared_projection_symmetric_inputs() {
        let cfg = FusionConfig::default();
        let w = StageFusion::Sca(AttentionProjections::random(5, &mut rng::stream(2, 2)));
        let c = rand_tensor(&[5, 2, 2], 3);
        let (rc, rd) = refine_pair_tensors(&c, &c, &cfg, Some(&w)).unwrap();
        assert_eq!(rc, rd);
        assert_ne!(rc, c);
    }

    #[test]
    fn sca_differs_from_ca() {
        let chans = [8, 16];
        let sca = build_fusion(&FusionConfig { stages: vec![1], ..Default::default() }, &chans, 1).unwrap();
        let ca_cfg = FusionConfig { mode: FusionMode::Ca, stages: vec![1], ..Default::default() };
        let ca = build_fusion(&ca_cfg, &chans, 2).unwrap();
        let c = rand_tensor(&[16, 2, 2], 1);
        let d = rand_tensor(&[16, 2, 2], 2);
        let a = refine_pair_tensors(&c, &d, sca.config(), sca.stage_weights(1)).unwrap();
        let b = refine_pair_tensors(&c, &d, &ca_cfg, ca.stage_weights(1)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn concat_passes_through() {
        let cfg = FusionConfig { mode: FusionMode::Concat, ..Default::default() };
        let c = rand_tensor(&[3, 2, 2], 1);
        let d = rand_tensor(&[3, 2, 2], 2);
        assert_eq!(refine_pair_tensors(&c, &d, &cfg, None).unwrap(), (c, d));
    }

    #[test]
    fn mode_weight_mismatch() {
        let cfg = FusionConfig { mode: FusionMode::Ca, ..Default::default() };
        let w = StageFusion::Sca(AttentionProjections::identity(2));
        let c = rand_tensor(&[2, 2, 2], 1);
        assert!(matches!(refine_pair_tensors(&c, &c, &cfg, Some(&w)), Err(ModelError::Config(_))));
        assert!(matches!(refine_pair_tensors(&c, &c, &cfg, None), Err(ModelError::Config(_))));
    }

    #[test]
    fn dim_mismatch() {
        let p = AttentionProjections::identity(3);
        let x = rand_tensor(&[4, 2], 1);
        assert!(cross_attend_tensors(&x, &x, &p, AttentionScale::None).is_err());
    }

    #[test]
    fn fusion_param_counts() {
        let chans = [8, 16, 32, 64];
        let sca = FusionConfig { stages: vec![2, 3], ..Default::default() };
        assert_eq!(count_fusion_params(&sca, &chans), 15_360);
        let ca = FusionConfig { mode: FusionMode::Ca, ..sca.clone() };
        assert_eq!(count_fusion_params(&ca, &chans), 30_720);
        let concat = FusionConfig { mode: FusionMode::Concat, ..sca.clone() };
        assert_eq!(count_fusion_params(&concat, &chans), 0);
        assert_eq!(build_fusion(&ca, &chans, 0).unwrap().count_params(), 30_720);
        assert_eq!(build_fusion(&sca, &chans, 0).unwrap().count_params(), 15_360);
    }

    #[test]
    fn rejects_out_of_range_stage() {
        let cfg = FusionConfig { stages: vec![4], ..Default::default() };
        assert!(build_fusion(&cfg, &[8, 16, 32, 64], 0).is_err());
        let cfg = FusionConfig { stages: vec![2, 1], ..Default::default() };
        assert!(cfg.validate(4).is_err());
    }
}
