//! Synthetic paired-modality data, dataset containers and splits.
//!
//! Each sample carries one label per task. Both images contain the sum of the
//! class templates selected by those labels; the dermoscopy image scales it
//! by `snr_derm`, the clinical image by the smaller `snr_clinical` and adds a
//! label-independent nuisance pattern. Unit Gaussian noise is added to both.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::DataError;
use crate::model::{hex, num_to_data};
use crate::numcore::{read_u32, Tensor};
use crate::{par, rng};

pub const DATASET_MAGIC: &[u8; 4] = b"PEMD";
const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub tasks: Vec<usize>,
    pub channels: usize,
    pub image_size: usize,
    pub snr_derm: f64,
    pub snr_clinical: f64,
    pub nuisance_strength: f64,
    /// Side of the coarse random grid each template is upsampled from.
    pub template_grid: usize,
    pub seed: u64,
    /// Permit `snr_derm <= snr_clinical` for falsification runs.
    pub allow_inverted_prior: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 1100,
            tasks: vec![2, 3],
            channels: 3,
            image_size: 32,
            snr_derm: 4.0,
            snr_clinical: 1.0,
            nuisance_strength: 1.0,
            template_grid: 4,
            seed: 0,
            allow_inverted_prior: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(m));
        if self.n_samples == 0 || self.channels == 0 || self.image_size == 0 {
            return bad("n_samples, channels and image_size must be positive".into());
        }
        if self.tasks.is_empty() || self.tasks.iter().any(|&k| k < 2) {
            return bad(format!("tasks need ≥1 entry with ≥2 classes, got {:?}", self.tasks));
        }
        if self.template_grid < 2 || self.template_grid > self.image_size {
            return bad(format!("template_grid must be in 2..={}", self.image_size));
        }
        let finite = [self.snr_derm, self.snr_clinical, self.nuisance_strength];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("snr and nuisance values must be finite and nonnegative".into());
        }
        if !self.allow_inverted_prior && self.snr_derm <= self.snr_clinical {
            return bad(format!(
                "snr_derm ({}) must exceed snr_clinical ({}) unless allow_inverted_prior is set",
                self.snr_derm, self.snr_clinical
            ));
        }
        Ok(())
    }

    fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub labels: Vec<usize>,
    pub clinical: Tensor,
    pub derm: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Class count per task.
    pub tasks: Vec<usize>,
    /// Generator settings, when the data is synthetic.
    pub spec: Option<SyntheticSpec>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(clinical, dermoscopy)` image pairs for the given sample indices.
    pub fn pairs(&self, idx: &[usize]) -> Vec<(&Tensor, &Tensor)> {
        idx.iter().map(|&i| (&self.samples[i].clinical, &self.samples[i].derm)).collect()
    }

    /// Labels transposed to `labels[task][k]` for the given indices.
    pub fn task_labels(&self, idx: &[usize]) -> Vec<Vec<usize>> {
        (0..self.tasks.len()).map(|t| idx.iter().map(|&i| self.samples[i].labels[t]).collect()).collect()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.clinical.shape())
    }
}

/// Random smooth pattern: a coarse Gaussian grid bilinearly upsampled to the
/// image, centred and scaled to unit L2 norm over all channels.
fn smooth_pattern(rng: &mut ChaCha8Rng, shape: [usize; 3], grid: usize) -> Vec<f64> {
    let [c, size, _] = shape;
    let coarse = rng::gaussian_vec(rng, c * grid * grid, 1.0);
    let mut out = vec![0.0; c * size * size];
    let scale = (grid - 1) as f64 / (size - 1).max(1) as f64;
    for ch in 0..c {
        let g = &coarse[ch * grid * grid..(ch + 1) * grid * grid];
        for y in 0..size {
            let fy = y as f64 * scale;
            let (y0, ty) = ((fy.floor() as usize).min(grid - 2), fy - (fy.floor() as usize).min(grid - 2) as f64);
            for x in 0..size {
                let fx = x as f64 * scale;
                let (x0, tx) = ((fx.floor() as usize).min(grid - 2), fx - (fx.floor() as usize).min(grid - 2) as f64);
                let top = g[y0 * grid + x0] * (1.0 - tx) + g[y0 * grid + x0 + 1] * tx;
                let bottom = g[(y0 + 1) * grid + x0] * (1.0 - tx) + g[(y0 + 1) * grid + x0 + 1] * tx;
                out[(ch * size + y) * size + x] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    out.iter_mut().for_each(|v| *v -= mean);
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

/// Class templates, `templates[task][class]`.
pub fn class_templates(spec: &SyntheticSpec) -> Vec<Vec<Vec<f64>>> {
    let mut r = rng::stream(spec.seed, rng::tags::TEMPLATES);
    spec.tasks
        .iter()
        .map(|&k| (0..k).map(|_| smooth_pattern(&mut r, spec.image_shape(), spec.template_grid)).collect())
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let templates = class_templates(spec);
    let shape = spec.image_shape();
    let samples = par::map_range(spec.n_samples, |i| {
        let mut r = rng::stream(spec.seed, rng::tags::SAMPLES + i as u64);
        let labels: Vec<usize> = spec.tasks.iter().map(|&k| r.gen_range(0..k)).collect();
        let n = shape.iter().product();
        let mut signal = vec![0.0; n];
        for (t, &y) in labels.iter().enumerate() {
            signal.iter_mut().zip(&templates[t][y]).for_each(|(s, v)| *s += v);
        }
        let nuisance = smooth_pattern(&mut r, shape, spec.template_grid);
        let noise_d = rng::gaussian_vec(&mut r, n, 1.0);
        let noise_c = rng::gaussian_vec(&mut r, n, 1.0);
        let derm: Vec<f64> = signal.iter().zip(&noise_d).map(|(s, e)| spec.snr_derm * s + e).collect();
        let clinical: Vec<f64> = signal
            .iter()
            .zip(&nuisance)
            .zip(&noise_c)
            .map(|((s, u), e)| spec.snr_clinical * s + spec.nuisance_strength * u + e)
            .collect();
        Sample {
            labels,
            clinical: Tensor::new(shape.to_vec(), clinical).expect("consistent"),
            derm: Tensor::new(shape.to_vec(), derm).expect("consistent"),
        }
    });
    Ok(Dataset { tasks: spec.tasks.clone(), spec: Some(spec.clone()), samples })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle then contiguous cut. Validation and test sizes are
/// `floor(n·ratio)`; the remainder goes to training.
pub fn split(n: usize, ratios: [f64; 3], seed: u64) -> Result<DatasetSplits, DataError> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Invalid(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    if n < 3 {
        return Err(DataError::Invalid(format!("cannot split {n} samples three ways")));
    }
    let val = (n as f64 * ratios[1]).floor() as usize;
    let test = (n as f64 * ratios[2]).floor() as usize;
    split_sizes(n, [n - val - test, val, test], seed)
}

/// Seeded shuffle cut into explicit sizes.
pub fn split_sizes(n: usize, sizes: [usize; 3], seed: u64) -> Result<DatasetSplits, DataError> {
    if sizes.iter().sum::<usize>() != n {
        return Err(DataError::Invalid(format!("split sizes {sizes:?} do not add up to {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, rng::tags::SPLIT));
    let test = perm.split_off(sizes[0] + sizes[1]);
    let val = perm.split_off(sizes[0]);
    Ok(DatasetSplits { train: perm, val, test })
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn spec_json(d: &Dataset) -> Vec<u8> {
    serde_json::to_vec(&d.spec).expect("spec serializes")
}

/// Bytes before the first sample record.
pub fn header_len(d: &Dataset) -> usize {
    4 + 4 + 4 + spec_json(d).len() + 4 + 4 * d.tasks.len() + 4
}

pub fn write_dataset<W: Write>(d: &Dataset, w: &mut W) -> Result<(), DataError> {
    w.write_all(DATASET_MAGIC)?;
    write_u32(w, DATASET_VERSION)?;
    let spec = spec_json(d);
    write_u32(w, spec.len() as u32)?;
    w.write_all(&spec)?;
    write_u32(w, d.tasks.len() as u32)?;
    for &k in &d.tasks {
        write_u32(w, k as u32)?;
    }
    write_u32(w, d.samples.len() as u32)?;
    for s in &d.samples {
        for &l in &s.labels {
            write_u32(w, l as u32)?;
        }
        s.clinical.write_to(w)?;
        s.derm.write_to(w)?;
    }
    Ok(())
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(d, &mut w)?;
    w.flush()?;
    Ok(())
}

fn corrupt(e: crate::numcore::NumError) -> DataError {
    num_to_data(e)
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<Dataset, DataError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| DataError::Corrupt("missing dataset header".into()))?;
    if &magic != DATASET_MAGIC {
        return Err(DataError::Format(format!("not a dataset file (magic {magic:?})")));
    }
    let version = read_u32(r).map_err(corrupt)?;
    if version != DATASET_VERSION {
        return Err(DataError::Format(format!("unsupported dataset version {version}")));
    }
    let spec_len = read_u32(r).map_err(corrupt)? as usize;
    if spec_len > 1 << 20 {
        return Err(DataError::Corrupt(format!("implausible spec length {spec_len}")));
    }
    let mut spec = vec![0u8; spec_len];
    r.read_exact(&mut spec).map_err(|_| DataError::Corrupt("truncated spec".into()))?;
    let spec: Option<SyntheticSpec> =
        serde_json::from_slice(&spec).map_err(|e| DataError::Corrupt(format!("spec echo: {e}")))?;
    let n_tasks = read_u32(r).map_err(corrupt)? as usize;
    if n_tasks == 0 || n_tasks > 1024 {
        return Err(DataError::Corrupt(format!("implausible task count {n_tasks}")));
    }
    let tasks = (0..n_tasks).map(|_| read_u32(r).map(|k| k as usize)).collect::<Result<Vec<_>, _>>().map_err(corrupt)?;
    let n = read_u32(r).map_err(corrupt)? as usize;
    let mut samples = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        let labels = (0..n_tasks).map(|_| read_u32(r).map(|k| k as usize)).collect::<Result<Vec<_>, _>>().map_err(corrupt)?;
        if let Some((t, &l)) = labels.iter().enumerate().find(|(t, &l)| l >= tasks[*t]) {
            return Err(DataError::Corrupt(format!("sample {i}: label {l} outside task {t}")));
        }
        let clinical = Tensor::read_from(r).map_err(corrupt)?;
        let derm = Tensor::read_from(r).map_err(corrupt)?;
        if clinical.shape() != derm.shape() || clinical.rank() != 3 {
            return Err(DataError::Corrupt(format!("sample {i}: image shapes {:?}/{:?}", clinical.shape(), derm.shape())));
        }
        samples.push(Sample { labels, clinical, derm });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(DataError::Corrupt("trailing bytes after last sample".into()));
    }
    Ok(Dataset { tasks, spec, samples })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    read_dataset(&mut r)
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_digest(path: &Path) -> Result<String, DataError> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

/// Loads `sample_id,clinical_path,derm_path,label_1..label_T` rows whose
/// image paths name tensor files, relative to the manifest's directory.
/// Class counts are `max label + 1` per task (at least 2).
pub fn load_manifest(path: &Path) -> Result<Dataset, DataError> {
    let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| DataError::Format(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| DataError::Format(e.to_string()))?.clone();
    let fixed = ["sample_id", "clinical_path", "derm_path"];
    if headers.len() < 4 || headers.iter().take(3).ne(fixed.iter().copied()) {
        return Err(DataError::Format(format!("manifest header must start with {fixed:?} plus label columns")));
    }
    let n_tasks = headers.len() - 3;
    let mut samples = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Format(format!("manifest row {}: {e}", line + 2)))?;
        let load = |p: &str| -> Result<Tensor, DataError> {
            let mut r = BufReader::new(File::open(base.join(p))?);
            Tensor::read_from(&mut r).map_err(corrupt)
        };
        let labels = rec
            .iter()
            .skip(3)
            .map(|v| v.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DataError::Format(format!("manifest row {}: {e}", line + 2)))?;
        debug_assert_eq!(labels.len(), n_tasks);
        samples.push(Sample { labels, clinical: load(&rec[1])?, derm: load(&rec[2])? });
    }
    if samples.is_empty() {
        return Err(DataError::Invalid("manifest lists no samples".into()));
    }
    let tasks = (0..n_tasks).map(|t| samples.iter().map(|s| s.labels[t] + 1).max().unwrap_or(2).max(2)).collect();
    Ok(Dataset { tasks, spec: None, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec { n_samples: 3, image_size: 8, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small()).unwrap();
        assert_eq!(a, generate(&small()).unwrap());
        let other = SyntheticSpec { seed: 1, ..small() };
        assert_ne!(a, generate(&other).unwrap());
    }

    #[test]
    fn templates_unit_norm() {
        for task in class_templates(&SyntheticSpec::default()) {
            for t in task {
                let n: f64 = t.iter().map(|v| v * v).sum();
                assert!((n - 1.0).abs() < 1e-12);
                assert!(t.iter().sum::<f64>().abs() < 1e-10);
            }
        }
    }

    #[test]
    fn prior_enforced() {
        let spec = SyntheticSpec { snr_derm: 1.0, snr_clinical: 1.0, ..small() };
        assert!(generate(&spec).is_err());
        let spec = SyntheticSpec { allow_inverted_prior: true, ..spec };
        assert!(generate(&spec).is_ok());
    }

    #[test]
    fn split_examples() {
        let s = split(10, [0.7, 0.1, 0.2], 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        let s = split(290, [0.7, 0.1, 0.2], 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (203, 29, 58));
        assert_eq!(split(290, [0.7, 0.1, 0.2], 0).unwrap(), s);
        assert!(split(2, [0.7, 0.1, 0.2], 0).is_err());
        assert!(split(10, [0.7, 0.1, 0.3], 0).is_err());
    }

    #[test]
    fn roundtrip_and_size() {
        let d = generate(&small()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let per_sample = 4 * d.tasks.len() + 2 * d.samples[0].clinical.encoded_len();
        assert_eq!(buf.len(), header_len(&d) + d.len() * per_sample);
        assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn corruption_detected() {
        let d = generate(&small()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'Q';
        assert!(matches!(read_dataset(&mut bad.as_slice()), Err(DataError::Format(_))));
        let cut = &buf[..buf.len() - 10];
        assert!(matches!(read_dataset(&mut &cut[..]), Err(DataError::Corrupt(_))));
        let mut extra = buf;
        extra.push(0);
        assert!(matches!(read_dataset(&mut extra.as_slice()), Err(DataError::Corrupt(_))));
    }
}
