#![allow(dead_code)]

use mmfuse::encoder::{EncoderConfig, Sharing};
use mmfuse::error::ModelError;
use mmfuse::fusion::{cross_attend, AttentionProjections, AttentionScale, FusionConfig, FusionMode};
use mmfuse::heads::HeadConfig;
use mmfuse::loss::{multitask_ce, weighted_total, LossWeights};
use mmfuse::model::{Model, ModelConfig};
use mmfuse::numcore::{grad_check, grad_check_coords, Differentiable, NumError, Tape, TapeFn, Tensor, Var};
use mmfuse::rng;
use rand::Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    let mut r = rng::stream(seed, 0xFEED);
    Tensor::new(shape.to_vec(), rng::gaussian_vec(&mut r, n, 1.0)).unwrap()
}

pub fn small_config(sharing: Sharing, mode: FusionMode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { stage_channels: vec![4, 6, 8], input_size: 8, sharing, ..Default::default() },
        fusion: FusionConfig { mode, stages: vec![0, 1], ..Default::default() },
        heads: HeadConfig { tasks: vec![2, 3], ..Default::default() },
    }
}

fn model_err(e: ModelError) -> NumError {
    match e {
        ModelError::Num(n) => n,
        other => NumError::Contract(other.to_string()),
    }
}

/// `Σ f(x) ⊙ r` for a fixed random `r`, so every output coordinate matters.
fn projected<F>(f: F, seed: u64) -> impl Fn(&mut Tape, Var) -> Result<Var, NumError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumError>,
{
    move |tape: &mut Tape, x: Var| {
        let y = f(tape, x)?;
        let r = tape.constant(random_tensor(tape.shape(y), seed ^ 0xABCD));
        let prod = tape.mul(y, r)?;
        Ok(tape.sum(prod))
    }
}

/// Max relative finite-difference error of every taped operation, per name.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    const EPS: f64 = 1e-6;
    let t = |shape: &[usize], k: u64| random_tensor(shape, seed.wrapping_mul(31).wrapping_add(k));
    let mut out = Vec::new();
    let mut check = |name: &'static str, f: Box<dyn Fn(&mut Tape, Var) -> Result<Var, NumError>>, x: Tensor| {
        let err = grad_check(&TapeFn(projected(f, seed)), &x, EPS).unwrap();
        out.push((name, err));
    };

    let b = t(&[4, 5], 1);
    check("matmul_lhs", Box::new(move |tp, x| {
        let c = tp.constant(b.clone());
        tp.matmul(x, c)
    }), t(&[3, 4], 2));
    let a = t(&[3, 4], 3);
    check("matmul_rhs", Box::new(move |tp, x| {
        let c = tp.constant(a.clone());
        tp.matmul(c, x)
    }), t(&[4, 5], 4));
    check("transpose", Box::new(|tp, x| tp.transpose(x)), t(&[3, 5], 5));
    for (name, stride, pad, size) in [("conv2d_same", 1, 1, 6), ("conv2d_valid", 1, 0, 6), ("conv2d_stride2", 2, 1, 7)] {
        let w = t(&[3, 2, 3, 3], 6);
        check(name, Box::new(move |tp, x| {
            let c = tp.constant(w.clone());
            tp.conv2d(x, c, stride, pad)
        }), t(&[2, size, size], 7));
        let img = t(&[2, size, size], 8);
        let kname = match name {
            "conv2d_same" => "conv2d_kernel_same",
            "conv2d_valid" => "conv2d_kernel_valid",
            _ => "conv2d_kernel_stride2",
        };
        check(kname, Box::new(move |tp, w| {
            let c = tp.constant(img.clone());
            tp.conv2d(c, w, stride, pad)
        }), t(&[3, 2, 3, 3], 9));
    }
    let bias = t(&[3], 10);
    check("channel_bias_x", Box::new(move |tp, x| {
        let c = tp.constant(bias.clone());
        tp.add_channel_bias(x, c)
    }), t(&[3, 4, 4], 11));
    let img = t(&[3, 4, 4], 12);
    check("channel_bias_b", Box::new(move |tp, b| {
        let c = tp.constant(img.clone());
        tp.add_channel_bias(c, b)
    }), t(&[3], 13));
    let rb = t(&[5], 14);
    check("row_bias_x", Box::new(move |tp, x| {
        let c = tp.constant(rb.clone());
        tp.add_row_bias(x, c)
    }), t(&[3, 5], 15));
    let rx = t(&[3, 5], 16);
    check("row_bias_b", Box::new(move |tp, b| {
        let c = tp.constant(rx.clone());
        tp.add_row_bias(c, b)
    }), t(&[5], 17));
    check("gelu", Box::new(|tp, x| Ok(tp.gelu(x))), t(&[4, 6], 18));
    check("avg_pool2", Box::new(|tp, x| tp.avg_pool2(x)), t(&[2, 4, 6], 19));
    check("global_avg_pool", Box::new(|tp, x| tp.global_avg_pool(x)), t(&[3, 4, 4], 20));
    check("softmax_rows", Box::new(|tp, x| tp.softmax_rows(x)), t(&[3, 5], 21));
    let other = t(&[3, 4], 22);
    check("add", Box::new(move |tp, x| {
        let c = tp.constant(other.clone());
        tp.add(x, c)
    }), t(&[3, 4], 23));
    check("add_self", Box::new(|tp, x| tp.add(x, x)), t(&[3, 4], 24));
    let m = t(&[3, 4], 25);
    check("mul", Box::new(move |tp, x| {
        let c = tp.constant(m.clone());
        tp.mul(x, c)
    }), t(&[3, 4], 26));
    check("mul_self", Box::new(|tp, x| tp.mul(x, x)), t(&[3, 4], 27));
    check("scale", Box::new(|tp, x| Ok(tp.scale(x, -1.7))), t(&[3, 4], 28));
    check("sum", Box::new(|tp, x| Ok(tp.sum(x))), t(&[3, 4], 29));
    check("reshape", Box::new(|tp, x| tp.reshape(x, &[6, 2])), t(&[3, 4], 30));
    let rows = t(&[4], 31);
    check("stack_rows", Box::new(move |tp, x| {
        let c = tp.constant(rows.clone());
        let s = tp.scale(x, 2.0);
        tp.stack_rows(&[x, c, s])
    }), t(&[4], 32));
    let right = t(&[3, 2], 33);
    check("concat_cols", Box::new(move |tp, x| {
        let c = tp.constant(right.clone());
        tp.concat_cols(x, c)
    }), t(&[3, 4], 34));
    let labels: Vec<usize> = {
        let mut r = rng::stream(seed, 0xC1A5);
        (0..4).map(|_| r.gen_range(0..3)).collect()
    };
    check("cross_entropy", Box::new(move |tp, x| tp.cross_entropy(x, &labels)), t(&[4, 3], 35));
    let proj = AttentionProjections::random(4, &mut rng::stream(seed, 0xA77));
    let kv = t(&[6, 4], 36);
    check("cross_attention", Box::new(move |tp, x| {
        let p = proj.bind_constant(tp);
        let c = tp.constant(kv.clone());
        cross_attend(tp, x, c, &p, AttentionScale::InvSqrtD).map_err(model_err)
    }), t(&[6, 4], 37));
    out
}

/// The weighted three-branch loss as a function of one parameter tensor.
pub struct ParamLoss {
    pub model: Model,
    pub param: usize,
    pub batch: Vec<(Tensor, Tensor)>,
    pub labels: Vec<Vec<usize>>,
    pub weights: LossWeights,
}

impl ParamLoss {
    fn with_param(&self, x: &Tensor) -> Model {
        let mut m = self.model.clone();
        m.params_mut()[self.param].data_mut().copy_from_slice(x.data());
        m
    }

    fn build(&self, m: &Model, tape: &mut Tape) -> Result<(Var, Vec<Var>), NumError> {
        let vars = m.bind(tape);
        let pairs: Vec<(&Tensor, &Tensor)> = self.batch.iter().map(|(c, d)| (c, d)).collect();
        let logits = m.forward(tape, &vars, &pairs).map_err(model_err)?;
        let lc = multitask_ce(tape, &logits.clinical, &self.labels)?;
        let ld = multitask_ce(tape, &logits.derm, &self.labels)?;
        let lf = multitask_ce(tape, &logits.fusion, &self.labels)?;
        Ok((weighted_total(tape, [lc, ld, lf], &self.weights)?, vars.all))
    }

    pub fn current(&self) -> Tensor {
        self.model.named_params()[self.param].1.clone()
    }
}

impl Differentiable for ParamLoss {
    fn value(&self, x: &Tensor) -> Result<f64, NumError> {
        let m = self.with_param(x);
        let mut tape = Tape::new();
        let (loss, _) = self.build(&m, &mut tape)?;
        Ok(tape.value(loss).data()[0])
    }

    fn gradient(&self, x: &Tensor) -> Result<Vec<f64>, NumError> {
        let m = self.with_param(x);
        let mut tape = Tape::new();
        let (loss, all) = self.build(&m, &mut tape)?;
        tape.backward(loss)?;
        Ok(tape.grad(all[self.param]).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
    }
}

/// Random batch of paired images and labels for the small config.
pub fn small_batch(cfg: &ModelConfig, n: usize, seed: u64) -> (Vec<(Tensor, Tensor)>, Vec<Vec<usize>>) {
    let e = &cfg.encoder;
    let shape = [e.in_channels, e.input_size, e.input_size];
    let batch = (0..n as u64)
        .map(|i| (random_tensor(&shape, seed * 1000 + 2 * i), random_tensor(&shape, seed * 1000 + 2 * i + 1)))
        .collect();
    let mut r = rng::stream(seed, 0x1AB);
    let labels = cfg.heads.tasks.iter().map(|&k| (0..n).map(|_| r.gen_range(0..k)).collect()).collect();
    (batch, labels)
}

/// Worst end-to-end relative error over a few coordinates of every
/// parameter tensor of a small model.
pub fn end_to_end_error(seed: u64, sharing: Sharing, mode: FusionMode, weights: LossWeights) -> f64 {
    let cfg = small_config(sharing, mode);
    let model = Model::new(&cfg, seed).unwrap();
    let (batch, labels) = small_batch(&cfg, 3, seed);
    let n_params = model.named_params().len();
    let mut worst: f64 = 0.0;
    let mut r = rng::stream(seed, 0xE2E);
    for param in 0..n_params {
        let f = ParamLoss { model: model.clone(), param, batch: batch.clone(), labels: labels.clone(), weights };
        let x = f.current();
        let coords: Vec<usize> = (0..3).map(|_| r.gen_range(0..x.numel())).collect();
        worst = worst.max(grad_check_coords(&f, &x, 1e-5, &coords).unwrap());
    }
    worst
}

/// Pairwise count over all (positive, negative) pairs, ties worth ½.
pub fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut twice = 0u64;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1;
                twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

/// Walks ranks in (score desc, index asc) order averaging precision@k at
/// every positive.
pub fn scan_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let (mut hits, mut total) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    total / hits as f64
}

/// Independent exhaustive scan of the step-0.1 simplex: counts correct
/// fused predictions with a plain first-max argmax and keeps the best by
/// (correct, w_F, w_D, w_C).
pub fn brute_weight_search(val: &mmfuse::heads::BranchOutputs, labels: &[Vec<usize>]) -> (u32, u32, u32) {
    use mmfuse::heads::Branch;
    let probs: Vec<Vec<Tensor>> = Branch::ALL.iter().map(|&b| val.probabilities(b).unwrap()).collect();
    let mut best: Option<((usize, u32, u32, u32), (u32, u32, u32))> = None;
    for i in 0..=10u32 {
        for j in 0..=(10 - i) {
            let k = 10 - i - j;
            let w = [i as f64 / 10.0, j as f64 / 10.0, k as f64 / 10.0];
            let mut correct = 0;
            for (t, truth) in labels.iter().enumerate() {
                for (r, &y) in truth.iter().enumerate() {
                    let cols = probs[0][t].cols();
                    let fused: Vec<f64> =
                        (0..cols).map(|c| (0..3).map(|b| w[b] * probs[b][t].at2(r, c)).sum::<f64>()).collect();
                    let mut arg = 0;
                    for c in 1..cols {
                        if fused[c] > fused[arg] {
                            arg = c;
                        }
                    }
                    if arg == y {
                        correct += 1;
                    }
                }
            }
            let key = (correct, k, j, i);
            if best.is_none_or(|(b, _)| key > b) {
                best = Some((key, (i, j, k)));
            }
        }
    }
    best.unwrap().1
}

/// Mean-difference linear probe: per class, `w = mean(in class) − mean(rest)`
/// over the training images; returns the test Avg AUC of `w·x` scores.
pub fn linear_probe_auc(data: &mmfuse::data::Dataset, splits: &mmfuse::data::DatasetSplits, derm: bool) -> f64 {
    let img = |i: usize| if derm { data.samples[i].derm.data() } else { data.samples[i].clinical.data() };
    let dim = img(0).len();
    let mut aucs = Vec::new();
    for (t, &k) in data.tasks.iter().enumerate() {
        for c in 0..k {
            let (mut pos, mut neg) = (vec![0.0; dim], vec![0.0; dim]);
            let (mut np, mut nn) = (0.0, 0.0);
            for &i in &splits.train {
                let (acc, n) = if data.samples[i].labels[t] == c { (&mut pos, &mut np) } else { (&mut neg, &mut nn) };
                acc.iter_mut().zip(img(i)).for_each(|(a, v)| *a += v);
                *n += 1.0;
            }
            let w: Vec<f64> = pos.iter().zip(&neg).map(|(p, q)| p / np - q / nn).collect();
            let scores: Vec<f64> = splits.test.iter().map(|&i| img(i).iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
            let labels: Vec<bool> = splits.test.iter().map(|&i| data.samples[i].labels[t] == c).collect();
            aucs.push(mmfuse::metrics::auc_binary(&scores, &labels).unwrap());
        }
    }
    aucs.iter().sum::<f64>() / aucs.len() as f64
}
