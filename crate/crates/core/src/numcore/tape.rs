use super::kernels::{self, ConvGeom};
use super::{NumError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    ChannelBias(Var, Var),
    RowBias(Var, Var),
    /// Input and the elementwise derivative at it.
    Gelu(Var, Vec<f64>),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    SoftmaxRows(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    StackRows(Vec<Var>),
    ConcatCols(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Whether any gradient-tracked leaf feeds this node.
    tracked: bool,
}

/// Ordered record of executed operations, replayed in reverse by
/// [`Tape::backward`].
///
/// Values are immutable once recorded. Only leaf gradients change, and only
/// through `backward` (which accumulates) and `zero_grad`.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        self.push(t, Op::Leaf, tracked)
    }

    /// Records a copy of `t` as a gradient-tracked leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut v = t.clone();
        v.zero_grad();
        v.set_requires_grad(true);
        self.push(v, Op::Leaf, true)
    }

    /// Records an untracked input.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let tracked = self.tracked(inputs);
        let value = Tensor::new(shape, data).expect("kernel produced consistent shape");
        self.push(value, op, tracked)
    }

    fn require_rank(&self, v: Var, rank: usize, what: &str) -> Result<(), NumError> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(NumError::Shape(format!("{what} expects rank {rank}, got shape {s:?}")));
        }
        Ok(())
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumError::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.record(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        self.require_rank(a, 2, "transpose")?;
        let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
        let out = kernels::transpose(self.value(a).data(), m, n);
        Ok(self.record(vec![n, m], out, Op::Transpose(a), &[a]))
    }

    /// Direct 2-D correlation of `x[C_in×H×W]` with `w[C_out×C_in×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, NumError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(NumError::Shape(format!("conv2d input {sx:?} with kernel {sw:?}")));
        }
        let (ci, h, wd, co, kh, kw) = (sx[0], sx[1], sx[2], sw[0], sw[2], sw[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(NumError::Geometry(format!("kernel {kh}×{kw} must be odd")));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(NumError::Geometry(format!(
                "input {h}×{wd} pad {pad} stride {stride} too small for kernel {kh}×{kw}"
            )));
        }
        if !(h + 2 * pad - kh).is_multiple_of(stride) || !(wd + 2 * pad - kw).is_multiple_of(stride) {
            return Err(NumError::Geometry(format!(
                "stride {stride} does not divide input {h}×{wd} with pad {pad} and kernel {kh}×{kw}"
            )));
        }
        let geom = ConvGeom {
            ci,
            h,
            w: wd,
            co,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (out, cols) = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let cols = if self.tracked(&[w]) { cols } else { Vec::new() };
        Ok(self.record(vec![co, geom.ho, geom.wo], out, Op::Conv2d { x, w, geom, cols }, &[x, w]))
    }

    /// Adds `b[C]` to every position of channel `c` in `x[C×H×W]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var, NumError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 3 || sb != [sx[0]] {
            return Err(NumError::Shape(format!("channel bias {sb:?} for input {sx:?}")));
        }
        let plane = sx[1] * sx[2];
        let mut out = self.value(x).data().to_vec();
        for (c, &bv) in self.value(b).data().iter().enumerate() {
            out[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.record(sx, out, Op::ChannelBias(x, b), &[x, b]))
    }

    /// Adds `b[n]` to every row of `x[m×n]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var, NumError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(NumError::Shape(format!("row bias {sb:?} for input {sx:?}")));
        }
        let n = sx[1];
        let mut out = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(bias).for_each(|(v, &bv)| *v += bv);
        }
        Ok(self.record(sx, out, Op::RowBias(x, b), &[x, b]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        if !self.tracked(&[x]) {
            let out = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
            return self.record(shape, out, Op::Gelu(x, Vec::new()), &[x]);
        }
        let (out, d) = self.value(x).data().iter().map(|&v| kernels::gelu_with_grad(v)).unzip();
        self.record(shape, out, Op::Gelu(x, d), &[x])
    }

    /// 2×2 average pooling over the trailing spatial dims of `x[C×H×W]`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, NumError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(NumError::Geometry(format!("avg_pool2 needs [C×even×even], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    out[(ch * ho + oy) * wo + ox] =
                        0.25 * (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]);
                }
            }
        }
        Ok(self.record(vec![c, ho, wo], out, Op::AvgPool2(x), &[x]))
    }

    /// Mean over spatial positions: `[C×H×W] → [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NumError> {
        self.require_rank(x, 3, "global_avg_pool")?;
        let s = self.shape(x).to_vec();
        let plane = s[1] * s[2];
        let out = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(self.record(vec![s[0]], out, Op::GlobalAvgPool(x), &[x]))
    }

    /// Row-wise softmax of `x[m×n]`, stabilised by row-max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumError> {
        self.require_rank(x, 2, "softmax_rows")?;
        let s = self.shape(x).to_vec();
        let n = s[1];
        let mut out = vec![0.0; s[0] * n];
        for (row, o) in self.value(x).data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            kernels::softmax_into(row, o);
        }
        Ok(self.record(s, out, Op::SoftmaxRows(x), &[x]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumError::Shape(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let s = self.same_shape(a, b, "add")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        Ok(self.record(s, out, Op::Add(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let s = self.same_shape(a, b, "mul")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        Ok(self.record(s, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).data().iter().map(|x| x * factor).collect();
        let s = self.shape(a).to_vec();
        self.record(s, out, Op::Scale(a, factor), &[a])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.record(vec![1], vec![total], Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumError> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(NumError::Shape(format!("reshape {:?} into {shape:?}", self.shape(a))));
        }
        let out = self.value(a).data().to_vec();
        Ok(self.record(shape.to_vec(), out, Op::Reshape(a), &[a]))
    }

    /// Stacks equally sized tensors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, NumError> {
        let first = rows.first().ok_or_else(|| NumError::Shape("stack of zero rows".into()))?;
        let n = self.value(*first).numel();
        let mut out = Vec::with_capacity(n * rows.len());
        for &r in rows {
            if self.value(r).numel() != n {
                return Err(NumError::Shape(format!(
                    "stack rows of {:?} and {:?}",
                    self.shape(*first),
                    self.shape(r)
                )));
            }
            out.extend_from_slice(self.value(r).data());
        }
        Ok(self.record(vec![rows.len(), n], out, Op::StackRows(rows.to_vec()), rows))
    }

    /// `[m×p] ‖ [m×q] → [m×(p+q)]`
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(NumError::Shape(format!("concat_cols of {sa:?} and {sb:?}")));
        }
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        Ok(self.record(vec![m, p + q], out, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Mean softmax cross-entropy of `logits[B×K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumError> {
        self.require_rank(logits, 2, "cross_entropy")?;
        let (b, k) = (self.shape(logits)[0], self.shape(logits)[1]);
        if labels.len() != b {
            return Err(NumError::Shape(format!("{} labels for {b} logit rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(NumError::Label { label: bad, classes: k });
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; b * k];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = x.row(i);
            total += kernels::log_sum_exp(row) - row[y];
            kernels::softmax_into(row, &mut probs[i * k..(i + 1) * k]);
        }
        let loss = total / b as f64;
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.record(vec![1], vec![loss], op, &[logits]))
    }

    /// Reverse-mode sweep from a scalar; adds into every tracked leaf's grad.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if self.value(loss).numel() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if self.nodes[i].value.requires_grad() {
                    self.nodes[i].value.accumulate_grad(&g);
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].tracked;
        let mut send = |v: Var, contrib: Vec<f64>| accumulate(adj, v, contrib);
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_bt_acc(g, val(*b).data(), &mut da, m, k, n);
                    send(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_at_acc(val(*a).data(), g, &mut db, m, k, n);
                    send(*b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                send(*a, kernels::transpose(g, n, m));
            }
            Op::Conv2d { x, w, geom, cols } => {
                if wants(*x) {
                    send(*x, kernels::conv2d_backward_input(g, val(*w).data(), geom));
                }
                if wants(*w) {
                    send(*w, kernels::conv2d_backward_kernel(g, cols, geom));
                }
            }
            Op::ChannelBias(x, b) => {
                if wants(*b) {
                    let c = val(*b).numel();
                    let plane = g.len() / c;
                    send(*b, g.chunks_exact(plane).map(|p| p.iter().sum()).collect());
                }
                if wants(*x) {
                    send(*x, g.to_vec());
                }
            }
            Op::RowBias(x, b) => {
                if wants(*b) {
                    let n = val(*b).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    send(*b, db);
                }
                if wants(*x) {
                    send(*x, g.to_vec());
                }
            }
            Op::Gelu(x, d) => {
                send(*x, d.iter().zip(g).map(|(&dv, &gv)| gv * dv).collect());
            }
            Op::AvgPool2(x) => {
                let s = val(*x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = 0.25 * g[(ch * ho + oy) * wo + ox];
                            let base = ch * h * w + 2 * oy * w + 2 * ox;
                            dx[base] += gv;
                            dx[base + 1] += gv;
                            dx[base + w] += gv;
                            dx[base + w + 1] += gv;
                        }
                    }
                }
                send(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let plane = val(*x).numel() / g.len();
                let inv = 1.0 / plane as f64;
                let dx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, plane)).collect();
                send(*x, dx);
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
                    let inner = kernels::dot(yr, gr);
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - inner);
                    }
                }
                send(*x, dx);
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, g.to_vec());
                }
                if wants(*b) {
                    send(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    send(*b, g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, f) => send(*a, g.iter().map(|v| v * f).collect()),
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).numel()]),
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::StackRows(rows) => {
                let n = node.value.shape()[1];
                for (r, chunk) in rows.iter().zip(g.chunks_exact(n)) {
                    if wants(*r) {
                        send(*r, chunk.to_vec());
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (val(*a).shape()[1], val(*b).shape()[1]);
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for row in g.chunks_exact(p + q) {
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                if wants(*a) {
                    send(*a, da);
                }
                if wants(*b) {
                    send(*b, db);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dx[i * k + y] -= scale;
                }
                send(*logits, dx);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contrib),
    }
}
