//! Reverse-mode autodiff over a linear operation tape.
//!
//! Ops are recorded during the forward pass; `backward` walks the tape in
//! reverse and accumulates adjoints into every node. Parent indices always
//! precede child indices, so a single reverse sweep suffices.

use crate::error::{LpgError, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// Forward-pass mode, relevant to dropout and batch-norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Vec<f64>,
    op: Op,
}

enum Op {
    Leaf,
    /// out[r,n] = x[r,m] · w[m,n] + b[n]
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, m: usize, n: usize },
    /// out[q,m,n] = a[q,m,k] · b[q,k,n]
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    /// out[q,m,n] = a[q,m,k] · b[q,n,k]ᵀ
    BmmNt { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// broadcast multiply by v[n] over the last axis
    MulVec { x: usize, v: usize, n: usize },
    /// broadcast add of v[n] over the last axis
    AddVec { x: usize, v: usize, n: usize },
    /// x viewed as [rows,n]; each row scaled by s[row]
    ScaleRows { x: usize, s: usize, n: usize },
    Scale { x: usize, c: f64 },
    /// a constant tensor was added in the forward pass; adjoint passes through
    AddConst { x: usize },
    Sigmoid { x: usize },
    Relu { x: usize },
    LeakyRelu { x: usize, slope: f64 },
    Gelu { x: usize },
    Exp { x: usize },
    SoftmaxLast { x: usize, n: usize },
    LogSoftmaxLast { x: usize, n: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, n: usize, xhat: Vec<f64>, invstd: Vec<f64> },
    /// 1-D batch norm over axis 0 of [b,d] with batch statistics
    BatchNormTrain { x: usize, gamma: usize, beta: usize, b: usize, d: usize, xhat: Vec<f64>, invstd: Vec<f64> },
    /// mask holds 0 or 1/(1-rate) per element
    Dropout { x: usize, mask: Vec<f64> },
    SumAxis { x: usize, outer: usize, len: usize, inner: usize },
    BroadcastAxis { x: usize, len: usize, inner: usize },
    ConcatLast { a: usize, b: usize, na: usize, nb: usize },
    SumAll { x: usize },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node { data, shape, grad, op });
        Var(self.nodes.len() - 1)
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Copies a tensor onto the tape.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(LpgError::dim(format!(
                "leaf shape {:?} vs data length {}",
                shape,
                data.len()
            )));
        }
        Ok(self.push(data, shape, Op::Leaf))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![v], vec![1], Op::Leaf)
    }

    // ── Shape helpers ────────────────────────────────────────────────

    fn last_dim(&self, v: Var) -> Result<usize> {
        self.nodes[v.0]
            .shape
            .last()
            .copied()
            .ok_or_else(|| LpgError::dim("rank-0 tensor has no last axis".to_string()))
    }

    fn check_same_shape(&self, a: Var, b: Var, ctx: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(LpgError::dim(format!(
                "{ctx}: shapes {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// Affine map over the last axis: x[..,m] · w[m,n] (+ b[n]).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let m = self.last_dim(x)?;
        let wshape = self.nodes[w.0].shape.clone();
        if wshape.len() != 2 || wshape[0] != m {
            return Err(LpgError::dim(format!(
                "linear: x shape {:?} vs w shape {:?}",
                self.nodes[x.0].shape, wshape
            )));
        }
        let n = wshape[1];
        if let Some(bv) = b {
            if self.nodes[bv.0].shape != [n] {
                return Err(LpgError::dim(format!(
                    "linear: bias shape {:?}, expected [{n}]",
                    self.nodes[bv.0].shape
                )));
            }
        }
        let rows = self.nodes[x.0].data.len() / m;
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            for i in 0..m {
                let xv = xd[r * m + i];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[i * n..(i + 1) * n];
                let orow = &mut out[r * n..(r + 1) * n];
                for j in 0..n {
                    orow[j] += xv * wrow[j];
                }
            }
        }
        if let Some(bv) = b {
            let bd = &self.nodes[bv.0].data;
            for r in 0..rows {
                for j in 0..n {
                    out[r * n + j] += bd[j];
                }
            }
        }
        let mut shape = self.nodes[x.0].shape.clone();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(out, shape, Op::Linear { x: x.0, w: w.0, b: b.map(|v| v.0), rows, m, n }))
    }

    fn bmm_dims(&self, a: Var, b: Var, transposed: bool) -> Result<(usize, usize, usize, usize)> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(LpgError::dim(format!("bmm: shapes {sa:?} vs {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transposed { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(LpgError::dim(format!("bmm: inner dims {sa:?} vs {sb:?}")));
        }
        Ok((batch, m, k, n))
    }

    /// Batched matmul: [q,m,k] × [q,k,n] → [q,m,n].
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, m, k, n) = self.bmm_dims(a, b, false)?;
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![0.0; batch * m * n];
        for q in 0..batch {
            for i in 0..m {
                for p in 0..k {
                    let av = ad[(q * m + i) * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        out[(q * m + i) * n + j] += av * bd[(q * k + p) * n + j];
                    }
                }
            }
        }
        Ok(self.push(out, vec![batch, m, n], Op::Bmm { a: a.0, b: b.0, batch, m, k, n }))
    }

    /// Batched matmul against a transposed right side: [q,m,k] × [q,n,k]ᵀ → [q,m,n].
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, m, k, n) = self.bmm_dims(a, b, true)?;
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![0.0; batch * m * n];
        for q in 0..batch {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += ad[(q * m + i) * k + p] * bd[(q * n + j) * k + p];
                    }
                    out[(q * m + i) * n + j] = acc;
                }
            }
        }
        Ok(self.push(out, vec![batch, m, n], Op::BmmNt { a: a.0, b: b.0, batch, m, k, n }))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let out: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x + y).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(out, shape, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let out: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x * y).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(out, shape, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn mul_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let n = self.last_dim(x)?;
        if self.nodes[v.0].shape != [n] {
            return Err(LpgError::dim(format!(
                "mul_vec: x {:?} vs v {:?}",
                self.nodes[x.0].shape, self.nodes[v.0].shape
            )));
        }
        let vd = &self.nodes[v.0].data;
        let out: Vec<f64> =
            self.nodes[x.0].data.iter().enumerate().map(|(i, xv)| xv * vd[i % n]).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::MulVec { x: x.0, v: v.0, n }))
    }

    pub fn add_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let n = self.last_dim(x)?;
        if self.nodes[v.0].shape != [n] {
            return Err(LpgError::dim(format!(
                "add_vec: x {:?} vs v {:?}",
                self.nodes[x.0].shape, self.nodes[v.0].shape
            )));
        }
        let vd = &self.nodes[v.0].data;
        let out: Vec<f64> =
            self.nodes[x.0].data.iter().enumerate().map(|(i, xv)| xv + vd[i % n]).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::AddVec { x: x.0, v: v.0, n }))
    }

    /// Scales each length-n row of x by the matching entry of s.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let n = self.last_dim(x)?;
        let rows = self.nodes[x.0].data.len() / n;
        if self.nodes[s.0].data.len() != rows {
            return Err(LpgError::dim(format!(
                "scale_rows: x {:?} has {rows} rows, s {:?}",
                self.nodes[x.0].shape, self.nodes[s.0].shape
            )));
        }
        let sd = &self.nodes[s.0].data;
        let out: Vec<f64> =
            self.nodes[x.0].data.iter().enumerate().map(|(i, xv)| xv * sd[i / n]).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::ScaleRows { x: x.0, s: s.0, n }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::Scale { x: x.0, c }))
    }

    /// Adds a constant buffer (no gradient of its own).
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.nodes[x.0].data.len() {
            return Err(LpgError::dim(format!(
                "add_const: x has {} elements, const has {}",
                self.nodes[x.0].data.len(),
                c.len()
            )));
        }
        let out: Vec<f64> = self.nodes[x.0].data.iter().zip(c).map(|(a, b)| a + b).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::AddConst { x: x.0 }))
    }

    /// Multiplies by a constant buffer elementwise.
    pub fn mul_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.nodes[x.0].data.len() {
            return Err(LpgError::dim(format!(
                "mul_const: x has {} elements, const has {}",
                self.nodes[x.0].data.len(),
                c.len()
            )));
        }
        let out: Vec<f64> = self.nodes[x.0].data.iter().zip(c).map(|(a, b)| a * b).collect();
        let shape = self.nodes[x.0].shape.clone();
        // reuse the dropout adjoint: d(out)/d(x) is the constant itself
        Ok(self.push(out, shape, Op::Dropout { x: x.0, mask: c.to_vec() }))
    }

    // ── Activations ──────────────────────────────────────────────────

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| sigmoid(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::Sigmoid { x: x.0 }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::Relu { x: x.0 }))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let out: Vec<f64> =
            self.nodes[x.0].data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::LeakyRelu { x: x.0, slope }))
    }

    /// Exact Gaussian-CDF GELU: x · Φ(x).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v * norm_cdf(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::Gelu { x: x.0 }))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.exp()).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::Exp { x: x.0 }))
    }

    // ── Softmax family ───────────────────────────────────────────────

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let n = self.last_dim(x)?;
        if n == 0 {
            return Err(LpgError::dim("softmax over empty last axis".to_string()));
        }
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; xd.len()];
        for row in 0..xd.len() / n {
            let xs = &xd[row * n..(row + 1) * n];
            let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in xs.iter().enumerate() {
                let e = (v - mx).exp();
                out[row * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[row * n + j] /= sum;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::SoftmaxLast { x: x.0, n }))
    }

    pub fn log_softmax_last(&mut self, x: Var) -> Result<Var> {
        let n = self.last_dim(x)?;
        if n == 0 {
            return Err(LpgError::dim("log_softmax over empty last axis".to_string()));
        }
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; xd.len()];
        for row in 0..xd.len() / n {
            let xs = &xd[row * n..(row + 1) * n];
            let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = xs.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
            for j in 0..n {
                out[row * n + j] = xs[j] - lse;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::LogSoftmaxLast { x: x.0, n }))
    }

    // ── Normalization ────────────────────────────────────────────────

    /// Layer norm over the last axis with learnable scale/shift.
    /// A zero-variance row normalizes to zeros (variance floored by eps).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.last_dim(x)?;
        if self.nodes[gamma.0].shape != [n] || self.nodes[beta.0].shape != [n] {
            return Err(LpgError::dim(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                self.nodes[x.0].shape, self.nodes[gamma.0].shape, self.nodes[beta.0].shape
            )));
        }
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let rows = xd.len() / n;
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut invstd = vec![0.0; rows];
        for r in 0..rows {
            let xs = &xd[r * n..(r + 1) * n];
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            invstd[r] = is;
            for j in 0..n {
                let h = (xs[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gd[j] + bd[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, n, xhat, invstd },
        ))
    }

    /// Batch norm over axis 0 of a [b,d] tensor using batch statistics.
    /// Returns the output plus the batch mean/var for running-stat updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 {
            return Err(LpgError::dim(format!("batch_norm_train: expected [b,d], got {shape:?}")));
        }
        let (b, d) = (shape[0], shape[1]);
        if b < 2 {
            return Err(LpgError::contract(
                "batch norm in train mode requires batch size >= 2".to_string(),
            ));
        }
        if self.nodes[gamma.0].shape != [d] || self.nodes[beta.0].shape != [d] {
            return Err(LpgError::dim(format!(
                "batch_norm_train: x {shape:?}, gamma {:?}, beta {:?}",
                self.nodes[gamma.0].shape, self.nodes[beta.0].shape
            )));
        }
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for i in 0..b {
            for j in 0..d {
                mean[j] += xd[i * d + j];
            }
        }
        for j in 0..d {
            mean[j] /= b as f64;
        }
        for i in 0..b {
            for j in 0..d {
                var[j] += (xd[i * d + j] - mean[j]).powi(2);
            }
        }
        for j in 0..d {
            var[j] /= b as f64;
        }
        let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        for i in 0..b {
            for j in 0..d {
                let h = (xd[i * d + j] - mean[j]) * invstd[j];
                xhat[i * d + j] = h;
                out[i * d + j] = h * gd[j] + bd[j];
            }
        }
        let v = self.push(
            out,
            shape,
            Op::BatchNormTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                b,
                d,
                xhat,
                invstd: invstd.clone(),
            },
        );
        Ok((v, mean, var))
    }

    /// Batch norm in eval mode: a fixed affine map from running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let n = self.last_dim(x)?;
        if running_mean.len() != n || running_var.len() != n {
            return Err(LpgError::dim(format!(
                "batch_norm_eval: feature dim {n} vs stats {}/{}",
                running_mean.len(),
                running_var.len()
            )));
        }
        let rows = self.nodes[x.0].data.len() / n;
        let mut shift = vec![0.0; rows * n];
        let mut scale = vec![0.0; rows * n];
        for r in 0..rows {
            for j in 0..n {
                shift[r * n + j] = -running_mean[j];
                scale[r * n + j] = 1.0 / (running_var[j] + eps).sqrt();
            }
        }
        let centered = self.add_const(x, &shift)?;
        let xhat = self.mul_const(centered, &scale)?;
        let scaled = self.mul_vec(xhat, gamma)?;
        self.add_vec(scaled, beta)
    }

    // ── Dropout ──────────────────────────────────────────────────────

    /// Inverted dropout: eval mode is the exact identity (returns x itself).
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(LpgError::contract(format!("dropout rate {rate} outside [0,1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.nodes[x.0].data.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.nodes[x.0].data.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::Dropout { x: x.0, mask }))
    }

    // ── Reductions and shape ops ─────────────────────────────────────

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(LpgError::dim(format!("axis {axis} out of range for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * len + j) * inner + i];
                }
            }
        }
        let mut oshape: Vec<usize> = shape[..axis].to_vec();
        oshape.extend_from_slice(&shape[axis + 1..]);
        if oshape.is_empty() {
            oshape.push(1);
        }
        Ok(self.push(out, oshape, Op::SumAxis { x: x.0, outer, len, inner }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .nodes[x.0]
            .shape
            .get(axis)
            .ok_or_else(|| {
                LpgError::dim(format!(
                    "axis {axis} out of range for shape {:?}",
                    self.nodes[x.0].shape
                ))
            })?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Inserts a repeated axis at position `axis`, e.g. [b,d] → [b,len,d].
    pub fn broadcast_axis(&mut self, x: Var, axis: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis > shape.len() {
            return Err(LpgError::dim(format!("axis {axis} out of range for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for j in 0..len {
                out[(o * len + j) * inner..(o * len + j + 1) * inner]
                    .copy_from_slice(&xd[o * inner..(o + 1) * inner]);
            }
        }
        let mut oshape: Vec<usize> = shape[..axis].to_vec();
        oshape.push(len);
        oshape.extend_from_slice(&shape[axis..]);
        Ok(self.push(out, oshape, Op::BroadcastAxis { x: x.0, len, inner }))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(LpgError::dim(format!("concat_last: shapes {sa:?} vs {sb:?}")));
        }
        let na = sa[sa.len() - 1];
        let nb = sb[sb.len() - 1];
        let rows = self.nodes[a.0].data.len() / na;
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![0.0; rows * (na + nb)];
        for r in 0..rows {
            out[r * (na + nb)..r * (na + nb) + na].copy_from_slice(&ad[r * na..(r + 1) * na]);
            out[r * (na + nb) + na..(r + 1) * (na + nb)].copy_from_slice(&bd[r * nb..(r + 1) * nb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = na + nb;
        Ok(self.push(out, shape, Op::ConcatLast { a: a.0, b: b.0, na, nb }))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        Ok(self.push(vec![s], vec![1], Op::SumAll { x: x.0 }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Repeated calls accumulate into
    /// node gradients; each sweep uses its own adjoint buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(LpgError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Vec<f64>> =
            self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        adj[loss.0][0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            let g = std::mem::take(&mut adj[i]);
            if g.iter().any(|&v| v != 0.0) {
                self.adjoint(i, &g, &mut adj);
            }
            let buf = &mut self.nodes[i].grad;
            for (b, c) in buf.iter_mut().zip(&g) {
                *b += c;
            }
        }
        Ok(())
    }

    fn adjoint(&self, i: usize, g: &[f64], adj: &mut [Vec<f64>]) {
        fn add_into(buf: &mut [f64], contrib: &[f64]) {
            for (b, c) in buf.iter_mut().zip(contrib) {
                *b += c;
            }
        }
        macro_rules! add_grad {
            ($node:expr, $contrib:expr) => {
                add_into(&mut adj[$node], $contrib)
            };
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Linear { x, w, b, rows, m, n } => {
                let xd = self.nodes[x].data.clone();
                let wd = self.nodes[w].data.clone();
                let mut dx = vec![0.0; rows * m];
                let mut dw = vec![0.0; m * n];
                for r in 0..rows {
                    for p in 0..m {
                        let mut acc = 0.0;
                        for j in 0..n {
                            let gv = g[r * n + j];
                            acc += gv * wd[p * n + j];
                            dw[p * n + j] += xd[r * m + p] * gv;
                        }
                        dx[r * m + p] = acc;
                    }
                }
                add_grad!(x, &dx);
                add_grad!(w, &dw);
                if let Some(bv) = b {
                    let mut db = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                    add_grad!(bv, &db);
                }
            }
            &Op::Bmm { a, b, batch, m, k, n } => {
                let ad = self.nodes[a].data.clone();
                let bd = self.nodes[b].data.clone();
                let mut da = vec![0.0; batch * m * k];
                let mut db = vec![0.0; batch * k * n];
                for q in 0..batch {
                    for i2 in 0..m {
                        for j in 0..n {
                            let gv = g[(q * m + i2) * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[(q * m + i2) * k + p] += gv * bd[(q * k + p) * n + j];
                                db[(q * k + p) * n + j] += gv * ad[(q * m + i2) * k + p];
                            }
                        }
                    }
                }
                add_grad!(a, &da);
                add_grad!(b, &db);
            }
            &Op::BmmNt { a, b, batch, m, k, n } => {
                let ad = self.nodes[a].data.clone();
                let bd = self.nodes[b].data.clone();
                let mut da = vec![0.0; batch * m * k];
                let mut db = vec![0.0; batch * n * k];
                for q in 0..batch {
                    for i2 in 0..m {
                        for j in 0..n {
                            let gv = g[(q * m + i2) * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[(q * m + i2) * k + p] += gv * bd[(q * n + j) * k + p];
                                db[(q * n + j) * k + p] += gv * ad[(q * m + i2) * k + p];
                            }
                        }
                    }
                }
                add_grad!(a, &da);
                add_grad!(b, &db);
            }
            &Op::Add { a, b } => {
                add_grad!(a, g);
                add_grad!(b, g);
            }
            &Op::Mul { a, b } => {
                let da: Vec<f64> = self.nodes[b].data.iter().zip(g).map(|(v, gv)| v * gv).collect();
                let db: Vec<f64> = self.nodes[a].data.iter().zip(g).map(|(v, gv)| v * gv).collect();
                add_grad!(a, &da);
                add_grad!(b, &db);
            }
            &Op::MulVec { x, v, n } => {
                let vd = self.nodes[v].data.clone();
                let xd = self.nodes[x].data.clone();
                let dx: Vec<f64> = g.iter().enumerate().map(|(i2, gv)| gv * vd[i2 % n]).collect();
                let mut dv = vec![0.0; n];
                for (i2, gv) in g.iter().enumerate() {
                    dv[i2 % n] += gv * xd[i2];
                }
                add_grad!(x, &dx);
                add_grad!(v, &dv);
            }
            &Op::AddVec { x, v, n } => {
                let mut dv = vec![0.0; n];
                for (i2, gv) in g.iter().enumerate() {
                    dv[i2 % n] += gv;
                }
                add_grad!(x, g);
                add_grad!(v, &dv);
            }
            &Op::ScaleRows { x, s, n } => {
                let sd = self.nodes[s].data.clone();
                let xd = self.nodes[x].data.clone();
                let dx: Vec<f64> = g.iter().enumerate().map(|(i2, gv)| gv * sd[i2 / n]).collect();
                let mut ds = vec![0.0; sd.len()];
                for (i2, gv) in g.iter().enumerate() {
                    ds[i2 / n] += gv * xd[i2];
                }
                add_grad!(x, &dx);
                add_grad!(s, &ds);
            }
            &Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                add_grad!(x, &dx);
            }
            &Op::AddConst { x } => {
                add_grad!(x, g);
            }
            &Op::Sigmoid { x } => {
                let yd = self.nodes[i].data.clone();
                let dx: Vec<f64> = yd.iter().zip(g).map(|(y, gv)| gv * y * (1.0 - y)).collect();
                add_grad!(x, &dx);
            }
            &Op::Relu { x } => {
                let xd = self.nodes[x].data.clone();
                let dx: Vec<f64> =
                    xd.iter().zip(g).map(|(&v, gv)| if v > 0.0 { *gv } else { 0.0 }).collect();
                add_grad!(x, &dx);
            }
            &Op::LeakyRelu { x, slope } => {
                let xd = self.nodes[x].data.clone();
                let dx: Vec<f64> = xd
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| if v > 0.0 { *gv } else { slope * gv })
                    .collect();
                add_grad!(x, &dx);
            }
            &Op::Gelu { x } => {
                let xd = self.nodes[x].data.clone();
                let dx: Vec<f64> = xd
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| gv * (norm_cdf(v) + v * norm_pdf(v)))
                    .collect();
                add_grad!(x, &dx);
            }
            &Op::Exp { x } => {
                let yd = self.nodes[i].data.clone();
                let dx: Vec<f64> = yd.iter().zip(g).map(|(y, gv)| gv * y).collect();
                add_grad!(x, &dx);
            }
            &Op::SoftmaxLast { x, n } => {
                let yd = self.nodes[i].data.clone();
                let mut dx = vec![0.0; yd.len()];
                for r in 0..yd.len() / n {
                    let ys = &yd[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, gv)| y * gv).sum();
                    for j in 0..n {
                        dx[r * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                add_grad!(x, &dx);
            }
            &Op::LogSoftmaxLast { x, n } => {
                let yd = self.nodes[i].data.clone();
                let mut dx = vec![0.0; yd.len()];
                for r in 0..yd.len() / n {
                    let gs = &g[r * n..(r + 1) * n];
                    let gsum: f64 = gs.iter().sum();
                    for j in 0..n {
                        dx[r * n + j] = gs[j] - yd[r * n + j].exp() * gsum;
                    }
                }
                add_grad!(x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, n, xhat, invstd } => {
                let (x, gamma, beta, n) = (*x, *gamma, *beta, *n);
                let xhat = xhat.clone();
                let invstd = invstd.clone();
                let gd = self.nodes[gamma].data.clone();
                let rows = xhat.len() / n;
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..rows {
                    let gs = &g[r * n..(r + 1) * n];
                    let hs = &xhat[r * n..(r + 1) * n];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..n {
                        let dh = gs[j] * gd[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hs[j];
                        dgamma[j] += gs[j] * hs[j];
                        dbeta[j] += gs[j];
                    }
                    mean_dh /= n as f64;
                    mean_dh_h /= n as f64;
                    for j in 0..n {
                        let dh = gs[j] * gd[j];
                        dx[r * n + j] = invstd[r] * (dh - mean_dh - hs[j] * mean_dh_h);
                    }
                }
                add_grad!(x, &dx);
                add_grad!(gamma, &dgamma);
                add_grad!(beta, &dbeta);
            }
            Op::BatchNormTrain { x, gamma, beta, b, d, xhat, invstd } => {
                let (x, gamma, beta, b, d) = (*x, *gamma, *beta, *b, *d);
                let xhat = xhat.clone();
                let invstd = invstd.clone();
                let gd = self.nodes[gamma].data.clone();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for j in 0..d {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for i2 in 0..b {
                        let dh = g[i2 * d + j] * gd[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[i2 * d + j];
                        dgamma[j] += g[i2 * d + j] * xhat[i2 * d + j];
                        dbeta[j] += g[i2 * d + j];
                    }
                    for i2 in 0..b {
                        let dh = g[i2 * d + j] * gd[j];
                        dx[i2 * d + j] = invstd[j]
                            * (dh - sum_dh / b as f64 - xhat[i2 * d + j] * sum_dh_h / b as f64);
                    }
                }
                add_grad!(x, &dx);
                add_grad!(gamma, &dgamma);
                add_grad!(beta, &dbeta);
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let dx: Vec<f64> = mask.iter().zip(g).map(|(m, gv)| m * gv).collect();
                add_grad!(x, &dx);
            }
            &Op::SumAxis { x, outer, len, inner } => {
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i2 in 0..inner {
                            dx[(o * len + j) * inner + i2] = g[o * inner + i2];
                        }
                    }
                }
                add_grad!(x, &dx);
            }
            &Op::BroadcastAxis { x, len, inner } => {
                let outer = g.len() / (len * inner);
                let mut dx = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i2 in 0..inner {
                            dx[o * inner + i2] += g[(o * len + j) * inner + i2];
                        }
                    }
                }
                add_grad!(x, &dx);
            }
            &Op::ConcatLast { a, b, na, nb } => {
                let rows = g.len() / (na + nb);
                let mut da = vec![0.0; rows * na];
                let mut db = vec![0.0; rows * nb];
                for r in 0..rows {
                    da[r * na..(r + 1) * na]
                        .copy_from_slice(&g[r * (na + nb)..r * (na + nb) + na]);
                    db[r * nb..(r + 1) * nb]
                        .copy_from_slice(&g[r * (na + nb) + na..(r + 1) * (na + nb)]);
                }
                add_grad!(a, &da);
                add_grad!(b, &db);
            }
            &Op::SumAll { x } => {
                let dx = vec![g[0]; self.nodes[x].data.len()];
                add_grad!(x, &dx);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF via erf.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn randv(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central-difference check of d(sum of build output)/d(input data).
    /// `build` must read its input from the supplied slice only.
    fn fd_input_check(data: &[f64], shape: &[usize], build: impl Fn(&mut Tape, Var) -> Var) {
        // weight the output so reductions with constant sums (softmax,
        // layer norm) still produce nonzero input gradients
        let weigh = |tape: &mut Tape, y: Var| -> Var {
            let n = tape.data(y).len();
            let coefs: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
            let weighted = tape.mul_const(y, &coefs).unwrap();
            tape.sum_all(weighted).unwrap()
        };
        let eval = |d: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf_from(shape.to_vec(), d.to_vec()).unwrap();
            let y = build(&mut tape, x);
            let s = weigh(&mut tape, y);
            tape.data(s)[0]
        };
        let mut tape = Tape::new();
        let x = tape.leaf_from(shape.to_vec(), data.to_vec()).unwrap();
        let y = build(&mut tape, x);
        let s = weigh(&mut tape, y);
        tape.backward(s).unwrap();
        let analytic = tape.grad(x).to_vec();
        let eps = 1e-6;
        for i in 0..data.len() {
            let mut hi = data.to_vec();
            let mut lo = data.to_vec();
            hi[i] += eps;
            lo[i] -= eps;
            let numeric = (eval(&hi) - eval(&lo)) / (2.0 * eps);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic[i] - numeric).abs() / denom < 1e-5,
                "coord {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut r = rng();
        let (rows, m, n) = (5, 4, 3);
        let xd = randv(rows * m, &mut r);
        let wd = randv(m * n, &mut r);
        let bd = randv(n, &mut r);
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![rows, m], xd.clone()).unwrap();
        let w = tape.leaf_from(vec![m, n], wd.clone()).unwrap();
        let b = tape.leaf_from(vec![n], bd.clone()).unwrap();
        let y = tape.linear(x, w, Some(b)).unwrap();
        let mut want = vec![0.0; rows * n];
        for i in 0..rows {
            for j in 0..n {
                let mut acc = bd[j];
                for k in 0..m {
                    acc += xd[i * m + k] * wd[k * n + j];
                }
                want[i * n + j] = acc;
            }
        }
        for (a, b) in tape.data(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bmm_matches_triple_loop() {
        let mut r = rng();
        let (batch, m, k, n) = (2, 3, 4, 2);
        let ad = randv(batch * m * k, &mut r);
        let bd = randv(batch * k * n, &mut r);
        let mut tape = Tape::new();
        let a = tape.leaf_from(vec![batch, m, k], ad.clone()).unwrap();
        let b = tape.leaf_from(vec![batch, k, n], bd.clone()).unwrap();
        let y = tape.bmm(a, b).unwrap();
        for bi in 0..batch {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += ad[bi * m * k + i * k + kk] * bd[bi * k * n + kk * n + j];
                    }
                    let got = tape.data(y)[bi * m * n + i * n + j];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bmm_nt_is_bmm_with_explicit_transpose() {
        let mut r = rng();
        let (batch, m, k, n) = (2, 3, 4, 5);
        let ad = randv(batch * m * k, &mut r);
        let bd = randv(batch * n * k, &mut r);
        // transpose b by hand: [batch, n, k] -> [batch, k, n]
        let mut bt = vec![0.0; bd.len()];
        for bi in 0..batch {
            for i in 0..n {
                for j in 0..k {
                    bt[bi * k * n + j * n + i] = bd[bi * n * k + i * k + j];
                }
            }
        }
        let mut tape = Tape::new();
        let a = tape.leaf_from(vec![batch, m, k], ad.clone()).unwrap();
        let b = tape.leaf_from(vec![batch, n, k], bd).unwrap();
        let y1 = tape.bmm_nt(a, b).unwrap();
        let b2 = tape.leaf_from(vec![batch, k, n], bt).unwrap();
        let y2 = tape.bmm(a, b2).unwrap();
        assert_eq!(tape.data(y1), tape.data(y2));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng();
        for _ in 0..20 {
            let (rows, n) = (r.gen_range(1..6), r.gen_range(1..8));
            let mut tape = Tape::new();
            let x = tape.leaf_from(vec![rows, n], randv(rows * n, &mut r)).unwrap();
            let y = tape.softmax_last(x).unwrap();
            for row in tape.data(y).chunks(n) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
                assert!(row.iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut r = rng();
        let data = randv(12, &mut r);
        let shifted: Vec<f64> = data.iter().map(|v| v + 1000.0).collect();
        let mut tape = Tape::new();
        let a = tape.leaf_from(vec![3, 4], data).unwrap();
        let b = tape.leaf_from(vec![3, 4], shifted).unwrap();
        let ya = tape.softmax_last(a).unwrap();
        let yb = tape.softmax_last(b).unwrap();
        for (p, q) in tape.data(ya).iter().zip(tape.data(yb)) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut r = rng();
        let data = randv(12, &mut r);
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![3, 4], data).unwrap();
        let lsm = tape.log_softmax_last(x).unwrap();
        let sm = tape.softmax_last(x).unwrap();
        for (a, p) in tape.data(lsm).iter().zip(tape.data(sm)) {
            assert!((a - p.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_hand_values() {
        // exact erf-based gelu: x * Phi(x)
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![3], vec![0.0, 1.0, -1.0]).unwrap();
        let y = tape.gelu(x).unwrap();
        let d = tape.data(y);
        assert!((d[0] - 0.0).abs() < 1e-15);
        assert!((d[1] - 0.8413447460685429).abs() < 1e-12);
        assert!((d[2] - -0.15865525393145707).abs() < 1e-12);
    }

    #[test]
    fn elementwise_backward_finite_difference() {
        let mut r = rng();
        let data = randv(10, &mut r);
        let shape = [2, 5];
        fd_input_check(&data, &shape, |t, x| t.sigmoid(x).unwrap());
        fd_input_check(&data, &shape, |t, x| t.gelu(x).unwrap());
        fd_input_check(&data, &shape, |t, x| t.leaky_relu(x, 0.01).unwrap());
        fd_input_check(&data, &shape, |t, x| t.exp(x).unwrap());
        fd_input_check(&data, &shape, |t, x| t.scale(x, -1.7).unwrap());
        fd_input_check(&data, &shape, |t, x| t.softmax_last(x).unwrap());
        fd_input_check(&data, &shape, |t, x| t.log_softmax_last(x).unwrap());
        fd_input_check(&data, &shape, |t, x| {
            let y = t.softmax_last(x).unwrap();
            let z = t.mul(y, x).unwrap();
            t.sigmoid(z).unwrap()
        });
    }

    #[test]
    fn reduction_and_shape_backward_finite_difference() {
        let mut r = rng();
        let data = randv(24, &mut r);
        let shape = [2, 3, 4];
        fd_input_check(&data, &shape, |t, x| t.sum_axis(x, 1).unwrap());
        fd_input_check(&data, &shape, |t, x| t.mean_axis(x, 2).unwrap());
        fd_input_check(&data, &shape, |t, x| {
            let m = t.mean_axis(x, 1).unwrap();
            t.broadcast_axis(m, 1, 3).unwrap()
        });
        fd_input_check(&data, &shape, |t, x| t.concat_last(x, x).unwrap());
    }

    #[test]
    fn normalization_backward_finite_difference() {
        let mut r = rng();
        let data = randv(12, &mut r);
        let gamma = randv(4, &mut r);
        let beta = randv(4, &mut r);
        let g2 = gamma.clone();
        let b2 = beta.clone();
        fd_input_check(&data, &[3, 4], move |t, x| {
            let g = t.leaf_from(vec![4], g2.clone()).unwrap();
            let b = t.leaf_from(vec![4], b2.clone()).unwrap();
            t.layer_norm(x, g, b, 1e-5).unwrap()
        });
        fd_input_check(&data, &[3, 4], move |t, x| {
            let g = t.leaf_from(vec![4], gamma.clone()).unwrap();
            let b = t.leaf_from(vec![4], beta.clone()).unwrap();
            t.batch_norm_train(x, g, b, 1e-5).unwrap().0
        });
    }

    #[test]
    fn layer_norm_zero_variance_row_is_zeroed() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![2, 3], vec![5.0, 5.0, 5.0, 1.0, 2.0, 3.0]).unwrap();
        let g = tape.leaf_from(vec![3], vec![1.0; 3]).unwrap();
        let b = tape.leaf_from(vec![3], vec![0.0; 3]).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let d = tape.data(y);
        assert!(d[..3].iter().all(|&v| v.abs() < 1e-2));
        let s: f64 = d[3..].iter().sum();
        assert!(s.abs() < 1e-10, "normalized row should have zero mean");
    }

    #[test]
    fn batch_norm_train_rejects_single_row() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = tape.leaf_from(vec![3], vec![1.0; 3]).unwrap();
        let b = tape.leaf_from(vec![3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            tape.batch_norm_train(x, g, b, 1e-5),
            Err(crate::error::LpgError::Contract(_))
        ));
    }

    #[test]
    fn batch_norm_train_stats_match_batch() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![2, 2], vec![1.0, 10.0, 3.0, 20.0]).unwrap();
        let g = tape.leaf_from(vec![2], vec![1.0; 2]).unwrap();
        let b = tape.leaf_from(vec![2], vec![0.0; 2]).unwrap();
        let (_, mean, var) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        assert_eq!(mean, vec![2.0, 15.0]);
        assert_eq!(var, vec![1.0, 25.0]); // biased (population) variance
    }

    #[test]
    fn batch_norm_eval_is_affine_in_running_stats() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = tape.leaf_from(vec![2], vec![2.0, 0.5]).unwrap();
        let b = tape.leaf_from(vec![2], vec![1.0, -1.0]).unwrap();
        let y = tape.batch_norm_eval(x, g, b, &[0.5, 1.0], &[4.0, 0.25], 0.0).unwrap();
        let d = tape.data(y);
        assert!((d[0] - (2.0 * (1.0 - 0.5) / 2.0 + 1.0)).abs() < 1e-12);
        assert!((d[1] - (0.5 * (2.0 - 1.0) / 0.5 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn dropout_eval_is_exact_identity() {
        let mut tape = Tape::new();
        let mut r = rng();
        let x = tape.leaf_from(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let before = tape.len();
        let y = tape.dropout(x, 0.3, Mode::Eval, &mut r).unwrap();
        assert_eq!(x.0, y.0, "eval dropout must return the input node");
        assert_eq!(tape.len(), before, "eval dropout must not consume tape or rng");
    }

    #[test]
    fn dropout_train_preserves_mean_within_two_percent() {
        let mut r = rng();
        let n = 20_000;
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![n], vec![1.0; n]).unwrap();
        let y = tape.dropout(x, 0.3, Mode::Train, &mut r).unwrap();
        let mean: f64 = tape.data(y).iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "inverted-dropout mean {mean}");
    }

    #[test]
    fn backward_twice_accumulates_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![2], vec![1.0, 2.0]).unwrap();
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        let once = tape.grad(x).to_vec();
        tape.backward(s).unwrap();
        let twice = tape.grad(x).to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shared_subexpression_gradients_sum_over_consumers() {
        // y = x*x + x has dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![3], vec![1.0, -0.5, 2.0]).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        for (g, v) in tape.grad(x).iter().zip([1.0, -0.5, 2.0]) {
            assert!((g - (2.0 * v + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn leaf_respects_requires_grad() {
        let mut t = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        t.requires_grad = true;
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        assert_eq!(tape.data(x), &[1.0, 2.0]);
        assert_eq!(tape.shape(x), &[2]);
    }

    #[test]
    fn scale_rows_weights_each_row() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![2, 3], vec![1.0; 6]).unwrap();
        let s = tape.leaf_from(vec![2, 1], vec![0.25, 0.75]).unwrap();
        let y = tape.scale_rows(x, s).unwrap();
        assert_eq!(tape.data(y), &[0.25, 0.25, 0.25, 0.75, 0.75, 0.75]);
        let total = tape.sum_all(y).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(s), &[3.0, 3.0]);
    }
}
