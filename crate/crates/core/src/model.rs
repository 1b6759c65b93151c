//! The full three-branch network: encoder stages interleaved with fusion,
//! pooled features fed to clinical, dermoscopy and fusion classifiers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{build_encoder, Encoder, EncoderConfig, EncoderVars, Modality};
use crate::error::{DataError, ModelError};
use crate::fusion::{build_fusion, count_fusion_params, refine_pair, FusionConfig, FusionModule, StageFusionVars};
use crate::heads::{build_heads, count_head_params, Branch, BranchOutputs, HeadConfig, HeadVars, Heads, TensorRows};
use crate::numcore::{read_u32, NumError, Tape, Tensor, Var};
use crate::par;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PEMW";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub heads: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.fusion.validate(self.encoder.stage_channels.len())?;
        self.heads.validate()
    }

    /// SHA-256 of the canonical JSON form; checkpoints carry it.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn digest_hex(&self) -> String {
        hex(&self.digest())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub encoder_params: usize,
    pub fusion_params: usize,
    pub head_params: usize,
    pub total: usize,
}

/// Parameter budget computed from the configuration alone.
pub fn count_model_params(cfg: &ModelConfig) -> ParamCounts {
    let encoder_params = cfg.encoder.params_per_set() * cfg.encoder.weight_sets();
    let fusion_params = count_fusion_params(&cfg.fusion, &cfg.encoder.stage_channels);
    let head_params = count_head_params(&cfg.heads, cfg.encoder.feature_dim());
    ParamCounts { encoder_params, fusion_params, head_params, total: encoder_params + fusion_params + head_params }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    encoder: Encoder,
    fusion: FusionModule,
    heads: Heads,
}

/// Tape handles of every parameter for one forward pass.
#[derive(Clone, Debug)]
pub struct ModelVars {
    encoder: EncoderVars,
    fusion: Vec<(usize, StageFusionVars)>,
    heads: HeadVars,
    /// All parameter handles in [`Model::named_params`] order.
    pub all: Vec<Var>,
}

/// Logit handles of the three branches, one per task.
#[derive(Clone, Debug)]
pub struct BranchLogits {
    pub clinical: Vec<Var>,
    pub derm: Vec<Var>,
    pub fusion: Vec<Var>,
}

impl BranchLogits {
    pub fn branch(&self, b: Branch) -> &[Var] {
        match b {
            Branch::Clinical => &self.clinical,
            Branch::Dermoscopy => &self.derm,
            Branch::Fusion => &self.fusion,
        }
    }
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder: build_encoder(&cfg.encoder, seed)?,
            fusion: build_fusion(&cfg.fusion, &cfg.encoder.stage_channels, seed)?,
            heads: build_heads(&cfg.heads, cfg.encoder.feature_dim(), seed)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn fusion(&self) -> &FusionModule {
        &self.fusion
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut Heads {
        &mut self.heads
    }

    pub fn fusion_mut(&mut self) -> &mut FusionModule {
        &mut self.fusion
    }

    pub fn param_counts(&self) -> ParamCounts {
        let (e, f, h) = (self.encoder.count_params(), self.fusion.count_params(), self.heads.count_params());
        ParamCounts { encoder_params: e, fusion_params: f, head_params: h, total: e + f + h }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.encoder.visit_params(&mut out);
        self.fusion.visit_params(&mut out);
        self.heads.visit_params(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.encoder.visit_params_mut(&mut out);
        self.fusion.visit_params_mut(&mut out);
        self.heads.visit_params_mut(&mut out);
        out
    }

    /// Copies of all parameter values, in [`Model::named_params`] order.
    pub fn param_values(&self) -> Vec<Vec<f64>> {
        self.named_params().into_iter().map(|(_, t)| t.data().to_vec()).collect()
    }

    pub fn set_param_values(&mut self, values: &[Vec<f64>]) -> Result<(), ModelError> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(ModelError::Input(format!("{} parameter arrays for {} tensors", values.len(), params.len())));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.numel() != v.len() {
                return Err(ModelError::Input(format!("parameter of {} values given {}", p.numel(), v.len())));
            }
            p.data_mut().copy_from_slice(v);
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let start = tape.len();
        let encoder = self.encoder.bind(tape);
        let fusion = self.fusion.bind(tape);
        let heads = self.heads.bind(tape);
        let all = (start..tape.len()).map(Var::from_index).collect();
        ModelVars { encoder, fusion, heads, all }
    }

    /// Forward pass over a batch of `(clinical, dermoscopy)` images.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, batch: &[(&Tensor, &Tensor)]) -> Result<BranchLogits, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let (mut pooled_c, mut pooled_d) = (Vec::with_capacity(batch.len()), Vec::with_capacity(batch.len()));
        for &(clinical, derm) in batch {
            self.encoder.check_input(clinical)?;
            self.encoder.check_input(derm)?;
            let mut c = tape.constant(clinical.clone());
            let mut d = tape.constant(derm.clone());
            for s in 0..self.encoder.stages() {
                c = self.encoder.stage_forward(tape, &vars.encoder, Modality::Clinical, s, c)?;
                d = self.encoder.stage_forward(tape, &vars.encoder, Modality::Dermoscopy, s, d)?;
                if let Some((_, w)) = vars.fusion.iter().find(|(st, _)| *st == s) {
                    (c, d) = refine_pair(tape, c, d, &self.cfg.fusion, Some(w))?;
                }
            }
            pooled_c.push(tape.global_avg_pool(c)?);
            pooled_d.push(tape.global_avg_pool(d)?);
        }
        let pc = tape.stack_rows(&pooled_c)?;
        let pd = tape.stack_rows(&pooled_d)?;
        let pf = tape.concat_cols(pc, pd)?;
        Ok(BranchLogits {
            clinical: self.heads.classify(tape, &vars.heads, Branch::Clinical, pc)?,
            derm: self.heads.classify(tape, &vars.heads, Branch::Dermoscopy, pd)?,
            fusion: self.heads.classify(tape, &vars.heads, Branch::Fusion, pf)?,
        })
    }

    /// Gradient-free logits for many samples; chunks are evaluated in
    /// parallel, each on a private tape, and reassembled in input order.
    pub fn predict(&self, pairs: &[(&Tensor, &Tensor)]) -> Result<BranchOutputs, ModelError> {
        const CHUNK: usize = 16;
        let chunks: Vec<&[(&Tensor, &Tensor)]> = pairs.chunks(CHUNK).collect();
        let parts = par::map(&chunks, |chunk| -> Result<[Vec<Tensor>; 3], ModelError> {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape);
            let logits = self.forward(&mut tape, &vars, chunk)?;
            Ok(Branch::ALL.map(|b| logits.branch(b).iter().map(|v| tape.value(*v).clone()).collect()))
        });
        let tasks = self.cfg.heads.tasks.len();
        let mut merged: [Vec<(usize, Vec<f64>)>; 3] = Default::default();
        for m in merged.iter_mut() {
            *m = self.cfg.heads.tasks.iter().map(|&k| (k, Vec::with_capacity(pairs.len() * k))).collect();
        }
        for part in parts {
            let part = part?;
            for (b, outs) in part.iter().enumerate() {
                for (t, o) in outs.iter().enumerate() {
                    merged[b][t].1.extend_from_slice(o.data());
                }
            }
        }
        let rows = |v: &Vec<(usize, Vec<f64>)>| -> Vec<TensorRows> {
            v.iter().map(|(k, d)| TensorRows { rows: pairs.len(), cols: *k, data: d.clone() }).collect()
        };
        debug_assert_eq!(merged[0].len(), tasks);
        Ok(BranchOutputs { clinical: rows(&merged[0]), derm: rows(&merged[1]), fusion: rows(&merged[2]) })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), DataError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<(), DataError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.cfg.digest())?;
        let params = self.named_params();
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, t) in params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(w)?;
        }
        Ok(())
    }

    /// Loads weights saved for exactly this configuration.
    pub fn load_checkpoint(cfg: &ModelConfig, path: &Path) -> Result<Self, DataError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_checkpoint(cfg, &mut r)
    }

    pub fn read_checkpoint<R: Read>(cfg: &ModelConfig, r: &mut R) -> Result<Self, DataError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| DataError::Corrupt("missing checkpoint header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(DataError::Format(format!("not a checkpoint (magic {magic:?})")));
        }
        let version = read_u32(r).map_err(num_to_data)?;
        if version != CHECKPOINT_VERSION {
            return Err(DataError::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut digest = [0u8; 32];
        r.read_exact(&mut digest).map_err(|_| DataError::Corrupt("truncated digest".into()))?;
        if digest != cfg.digest() {
            return Err(DataError::Mismatch(format!(
                "checkpoint digest {} differs from config digest {}",
                hex(&digest),
                cfg.digest_hex()
            )));
        }
        let mut model = Model::new(cfg, 0).map_err(|e| DataError::Invalid(e.to_string()))?;
        let count = read_u32(r).map_err(num_to_data)? as usize;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if count != names.len() {
            return Err(DataError::Mismatch(format!("checkpoint holds {count} tensors, model has {}", names.len())));
        }
        let mut params = model.params_mut();
        for (expected, slot) in names.iter().zip(params.iter_mut()) {
            let len = read_u32(r).map_err(num_to_data)? as usize;
            if len > 256 {
                return Err(DataError::Corrupt(format!("implausible name length {len}")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| DataError::Corrupt("truncated tensor name".into()))?;
            if name != expected.as_bytes() {
                return Err(DataError::Mismatch(format!(
                    "expected tensor {expected}, found {}",
                    String::from_utf8_lossy(&name)
                )));
            }
            let t = Tensor::read_from(r).map_err(num_to_data)?;
            if t.shape() != slot.shape() {
                return Err(DataError::Mismatch(format!("{expected}: shape {:?} vs {:?}", t.shape(), slot.shape())));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }
}

pub(crate) fn num_to_data(e: NumError) -> DataError {
    match e {
        NumError::Truncated => DataError::Corrupt("unexpected end of file".into()),
        NumError::Format(m) => DataError::Format(m),
        other => DataError::Corrupt(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Sharing;
    use crate::fusion::FusionMode;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { stage_channels: vec![4, 6], input_size: 8, ..Default::default() },
            fusion: FusionConfig { stages: vec![0, 1], ..Default::default() },
            heads: HeadConfig { tasks: vec![2, 3], ..Default::default() },
        }
    }

    fn img(seed: u64) -> Tensor {
        let mut r = crate::rng::stream(seed, 1);
        Tensor::new(vec![3, 8, 8], crate::rng::gaussian_vec(&mut r, 192, 1.0)).unwrap()
    }

    #[test]
    fn counts_agree_with_formula() {
        for mode in [FusionMode::Concat, FusionMode::Ca, FusionMode::Sca] {
            for sharing in [Sharing::Shared, Sharing::Individual] {
                let mut cfg = tiny();
                cfg.fusion.mode = mode;
                cfg.encoder.sharing = sharing;
                let m = Model::new(&cfg, 1).unwrap();
                assert_eq!(m.param_counts(), count_model_params(&cfg));
                let n: usize = m.named_params().iter().map(|(_, t)| t.numel()).sum();
                assert_eq!(n, m.param_counts().total);
            }
        }
    }

    #[test]
    fn predict_matches_batched_forward() {
        let m = Model::new(&tiny(), 3).unwrap();
        let imgs: Vec<Tensor> = (0..20).map(img).collect();
        let pairs: Vec<(&Tensor, &Tensor)> = (0..10).map(|i| (&imgs[2 * i], &imgs[2 * i + 1])).collect();
        let out = m.predict(&pairs).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let logits = m.forward(&mut tape, &vars, &pairs).unwrap();
        for b in Branch::ALL {
            for (t, v) in logits.branch(b).iter().enumerate() {
                let full = tape.value(*v).data();
                let got = &out.branch(b)[t].data;
                for (x, y) in full.iter().zip(got) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let cfg = tiny();
        let m = Model::new(&cfg, 9).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let back = Model::read_checkpoint(&cfg, &mut buf.as_slice()).unwrap();
        assert_eq!(back.param_values(), m.param_values());

        let mut other = cfg.clone();
        other.fusion.mode = FusionMode::Ca;
        assert!(matches!(Model::read_checkpoint(&other, &mut buf.as_slice()), Err(DataError::Mismatch(_))));

        let mut cut = buf.clone();
        cut.truncate(buf.len() / 2);
        assert!(matches!(Model::read_checkpoint(&cfg, &mut cut.as_slice()), Err(DataError::Corrupt(_))));
        let mut bad = buf;
        bad[1] = b'X';
        assert!(matches!(Model::read_checkpoint(&cfg, &mut bad.as_slice()), Err(DataError::Format(_))));
    }
}
