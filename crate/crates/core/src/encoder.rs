//! Multi-stage convolutional encoder, either one weight set per modality or a
//! single set applied to both.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::numcore::{Tape, Tensor, Var};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    /// One encoder per modality.
    Individual,
    /// A single encoder whose weights process both modalities.
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Clinical,
    Dermoscopy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub kernel: usize,
    pub sharing: Sharing,
    pub input_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: vec![8, 16, 32, 64],
            kernel: 3,
            sharing: Sharing::Shared,
            input_size: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return bad(format!("stage_channels must be non-empty and positive, got {:?}", self.stage_channels));
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        let stages = self.stage_channels.len() as u32;
        if stages > 16 || self.input_size == 0 || !self.input_size.is_multiple_of(1usize << stages) {
            return bad(format!(
                "input_size {} is not divisible by 2^{stages}",
                self.input_size
            ));
        }
        Ok(())
    }

    pub fn weight_sets(&self) -> usize {
        match self.sharing {
            Sharing::Shared => 1,
            Sharing::Individual => 2,
        }
    }

    /// Channels entering each stage.
    fn stage_inputs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once(self.in_channels)
            .chain(self.stage_channels.iter().copied())
            .zip(self.stage_channels.iter().copied())
    }

    /// Scalar weights in one weight set.
    pub fn params_per_set(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        self.stage_inputs().map(|(cin, cout)| cin * cout * k2 + cout).sum()
    }

    /// `(channels, side)` of the features leaving stage `s`.
    pub fn stage_shape(&self, s: usize) -> (usize, usize) {
        (self.stage_channels[s], self.input_size >> (s + 1))
    }

    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().expect("validated non-empty")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-stage features of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures(pub Vec<Tensor>);

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    sets: Vec<Vec<ConvStage>>,
}

/// Tape handles for the encoder weights bound for one forward pass.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    sets: Vec<Vec<(Var, Var)>>,
}

pub fn build_encoder(cfg: &EncoderConfig, seed: u64) -> Result<Encoder, ModelError> {
    cfg.validate()?;
    let k = cfg.kernel;
    let sets = (0..cfg.weight_sets())
        .map(|set| {
            let mut rng = rng::stream(seed, rng::tags::ENCODER + set as u64);
            cfg.stage_inputs()
                .map(|(cin, cout)| {
                    let fan_in = cin * k * k;
                    let std = (2.0 / fan_in as f64).sqrt();
                    let w = rng::gaussian_vec(&mut rng, cout * fan_in, std);
                    ConvStage {
                        weight: Tensor::new(vec![cout, cin, k, k], w).expect("consistent"),
                        bias: Tensor::zeros(&[cout]),
                    }
                })
                .collect()
        })
        .collect();
    Ok(Encoder { cfg: cfg.clone(), sets })
}

impl Encoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Scalar weights, counting tied weights once.
    pub fn count_params(&self) -> usize {
        self.sets.iter().flatten().map(|s| s.weight.numel() + s.bias.numel()).sum()
    }

    pub fn stages(&self) -> usize {
        self.cfg.stage_channels.len()
    }

    fn set_index(&self, m: Modality) -> usize {
        match (self.cfg.sharing, m) {
            (Sharing::Shared, _) | (Sharing::Individual, Modality::Clinical) => 0,
            (Sharing::Individual, Modality::Dermoscopy) => 1,
        }
    }

    pub(crate) fn visit_params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, set) in self.sets.iter().enumerate() {
            for (s, st) in set.iter().enumerate() {
                out.push((format!("encoder.{i}.{s}.weight"), &st.weight));
                out.push((format!("encoder.{i}.{s}.bias"), &st.bias));
            }
        }
    }

    pub(crate) fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for st in self.sets.iter_mut().flatten() {
            out.push(&mut st.weight);
            out.push(&mut st.bias);
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> EncoderVars {
        let sets = self
            .sets
            .iter()
            .map(|set| set.iter().map(|st| (tape.param(&st.weight), tape.param(&st.bias))).collect())
            .collect();
        EncoderVars { sets }
    }

    /// One stage: conv (stride 1, same padding) → GELU → 2×2 average pool.
    pub fn stage_forward(
        &self,
        tape: &mut Tape,
        vars: &EncoderVars,
        modality: Modality,
        stage: usize,
        x: Var,
    ) -> Result<Var, ModelError> {
        let (w, b) = vars.sets[self.set_index(modality)][stage];
        let conv = tape.conv2d(x, w, 1, self.cfg.kernel / 2)?;
        let biased = tape.add_channel_bias(conv, b)?;
        let act = tape.gelu(biased);
        Ok(tape.avg_pool2(act)?)
    }

    pub fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let want = [self.cfg.in_channels, self.cfg.input_size, self.cfg.input_size];
        if x.shape() != want {
            return Err(ModelError::Input(format!("expected image {want:?}, got {:?}", x.shape())));
        }
        Ok(())
    }

    /// Runs both modalities through every stage without fusion.
    pub fn encode_pair(&self, clinical: &Tensor, derm: &Tensor) -> Result<(StageFeatures, StageFeatures), ModelError> {
        self.check_input(clinical)?;
        self.check_input(derm)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let mut c = tape.constant(clinical.clone());
        let mut d = tape.constant(derm.clone());
        let (mut fc, mut fd) = (Vec::new(), Vec::new());
        for s in 0..self.stages() {
            c = self.stage_forward(&mut tape, &vars, Modality::Clinical, s, c)?;
            d = self.stage_forward(&mut tape, &vars, Modality::Dermoscopy, s, d)?;
            fc.push(tape.value(c).clone());
            fd.push(tape.value(d).clone());
        }
        Ok((StageFeatures(fc), StageFeatures(fd)))
    }

    pub fn stage(&self, set: usize, stage: usize) -> &ConvStage {
        &self.sets[set][stage]
    }

    pub fn stage_mut(&mut self, set: usize, stage: usize) -> &mut ConvStage {
        &mut self.sets[set][stage]
    }
}
