use rand::Rng;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;
pub const SIGMOID_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel running mean and variance for batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    MaxPool { x: Var, argmax: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Bce { p: Var, targets: Vec<f64> },
    BatchMatmul { x: Var, t: Var },
    OrthoPenalty { a: Var },
    SliceChannels { x: Var, start: usize },
    ConcatChannels { a: Var, b: Var },
    Reshape { x: Var },
    AddScaled { a: Var, b: Var, scale: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of executed operations.
///
/// Nodes are pushed in execution order, so the tape is always topologically
/// sorted and a single reverse sweep replays the chain rule.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn elementwise_mut(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient during backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as data; no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated for `v` by the last backward sweep; zeros when
    /// nothing flowed into it.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let t = &self.nodes[v.0].value;
        t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
    }

    // ---- forward operations -------------------------------------------------

    /// `out[i,j] = Σ_k x[i,k]·W[k,j] + b[j]` for `x: [B, I]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::dim("linear", self.shape(x), self.shape(w)));
        }
        self.affine(x, w, b, "linear")
    }

    /// The same affine map applied independently to every point of `x: [B, N, Cin]`.
    pub fn shared_pointwise_mlp(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        if self.shape(x).len() != 3 {
            return Err(Error::dim("shared_pointwise_mlp", self.shape(x), self.shape(w)));
        }
        self.affine(x, w, b, "shared_pointwise_mlp")
    }

    fn affine(&mut self, x: Var, w: Var, b: Var, op: &'static str) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::dim(op, xs, ws));
        }
        if bs != [ws[1]] {
            return Err(Error::dim(op, ws, bs));
        }
        let (cin, cout) = (ws[0], ws[1]);
        let rows = self.value(x).numel() / cin;
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = cout;

        let bias = self.value(b).values();
        let mut out = Vec::with_capacity(rows * cout);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm_nn(rows, cin, cout, self.value(x).values(), self.value(w).values(), &mut out, true);
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let vals = src.values().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(src.shape().to_vec(), vals).expect("same shape");
        self.push(t, Op::Relu { x }, &[x])
    }

    /// Logistic sigmoid, clamped to `[1e-12, 1 - 1e-12]` so BCE never sees 0 or 1.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let vals = src
            .values()
            .iter()
            .map(|&v| (1.0 / (1.0 + (-v).exp())).clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP))
            .collect();
        let t = Tensor::new(src.shape().to_vec(), vals).expect("same shape");
        self.push(t, Op::Sigmoid { x }, &[x])
    }

    /// Per-channel normalization over every axis but the last.
    ///
    /// Train mode uses batch statistics (biased variance for normalization)
    /// and folds them into `stats` with momentum 0.9; eval mode reads `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("batch_norm", &xs, self.shape(gamma)));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::dim("batch_norm", &xs, &[stats.mean.len()]));
        }
        let rows = self.value(x).numel() / c;
        let xv = self.value(x).values();
        let (mean, inv_std, train) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::DegenerateBatch { rows });
                }
                let mut mean = vec![0.0; c];
                for row in xv.chunks_exact(c) {
                    elementwise_mut(&mut mean, row);
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in xv.chunks_exact(c) {
                    for ((v, &xi), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *v += (xi - m) * (xi - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                let unbias = rows as f64 / (rows as f64 - 1.0);
                for j in 0..c {
                    stats.mean[j] = BATCH_NORM_MOMENTUM * stats.mean[j] + (1.0 - BATCH_NORM_MOMENTUM) * mean[j];
                    stats.var[j] =
                        BATCH_NORM_MOMENTUM * stats.var[j] + (1.0 - BATCH_NORM_MOMENTUM) * var[j] * unbias;
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
                (mean, inv, true)
            }
            Mode::Eval => {
                let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
                (stats.mean.clone(), inv, false)
            }
        };
        let g = self.value(gamma).values();
        let bt = self.value(beta).values();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ((row, hr), or) in xv.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.chunks_exact_mut(c)) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                hr[j] = h;
                or[j] = g[j] * h + bt[j];
            }
        }
        let t = Tensor::new(xs, out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        ))
    }

    /// `out[b,c] = max_n x[b,n,c]`; ties resolve to the lowest point index.
    pub fn max_pool_points(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::dim("max_pool_points", &xs, &[3]));
        }
        let (b, n, c) = (xs[0], xs[1], xs[2]);
        if n == 0 {
            return Err(Error::EmptyCloud("max_pool_points"));
        }
        let xv = self.value(x).values();
        let mut out = vec![f64::NEG_INFINITY; b * c];
        let mut argmax = vec![0usize; b * c];
        for bi in 0..b {
            let o = &mut out[bi * c..(bi + 1) * c];
            let a = &mut argmax[bi * c..(bi + 1) * c];
            for ni in 0..n {
                let row = &xv[(bi * n + ni) * c..(bi * n + ni + 1) * c];
                for j in 0..c {
                    if row[j] > o[j] || ni == 0 {
                        o[j] = row[j];
                        a[j] = ni;
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, c], out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Inverted dropout. Eval mode and `p == 0` return `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let src = self.value(x);
        let mask: Vec<f64> = (0..src.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let vals = src.values().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(src.shape().to_vec(), vals)?;
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean binary cross-entropy of probabilities `p: [B]` against 0/1 targets.
    pub fn bce_loss(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != [targets.len()] {
            return Err(Error::dim("bce_loss", pv.shape(), &[targets.len()]));
        }
        if pv.values().iter().any(|&q| !(q > 0.0 && q < 1.0)) {
            return Err(Error::Domain("bce_loss needs probabilities strictly inside (0, 1)".into()));
        }
        let n = targets.len() as f64;
        let loss = -pv
            .values()
            .iter()
            .zip(targets)
            .map(|(&q, &y)| y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            .sum::<f64>()
            / n;
        let t = Tensor::scalar(loss);
        Ok(self.push(
            t,
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            &[p],
        ))
    }

    /// Per-sample product `x[b] · t[b]` for `x: [B,N,K]`, `t: [B,K,M]`.
    pub fn batch_matmul(&mut self, x: Var, t: Var) -> Result<Var> {
        let (xs, ts) = (self.shape(x).to_vec(), self.shape(t).to_vec());
        if xs.len() != 3 || ts.len() != 3 || xs[0] != ts[0] || xs[2] != ts[1] {
            return Err(Error::dim("batch_matmul", &xs, &ts));
        }
        let (b, n, k, m) = (xs[0], xs[1], xs[2], ts[2]);
        let mut out = vec![0.0; b * n * m];
        let (xv, tv) = (self.value(x).values(), self.value(t).values());
        for bi in 0..b {
            gemm_nn(
                n,
                k,
                m,
                &xv[bi * n * k..],
                &tv[bi * k * m..],
                &mut out[bi * n * m..(bi + 1) * n * m],
                false,
            );
        }
        let t_out = Tensor::new(vec![b, n, m], out)?;
        Ok(self.push(t_out, Op::BatchMatmul { x, t }, &[x, t]))
    }

    /// Mean over the batch of `‖A·Aᵀ − I‖²_F` for `a: [B,K,K]` (or a single `[K,K]`).
    pub fn orthogonality_penalty(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (b, k) = match s.as_slice() {
            [k1, k2] if k1 == k2 => (1, *k1),
            [b, k1, k2] if k1 == k2 => (*b, *k1),
            _ => return Err(Error::dim("orthogonality_penalty", &s, &[0, 0])),
        };
        let av = self.value(a).values();
        let mut total = 0.0;
        let mut prod = vec![0.0; k * k];
        for bi in 0..b {
            let m = &av[bi * k * k..(bi + 1) * k * k];
            gemm_nt(k, k, k, m, m, &mut prod, false);
            for i in 0..k {
                prod[i * k + i] -= 1.0;
            }
            total += prod.iter().map(|v| v * v).sum::<f64>();
        }
        let t = Tensor::scalar(total / b as f64);
        Ok(self.push(t, Op::OrthoPenalty { a }, &[a]))
    }

    /// Channels `[start, end)` of the last axis.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        if start >= end || end > c {
            return Err(Error::dim("slice_channels", &xs, &[start, end]));
        }
        let w = end - start;
        let vals: Vec<f64> = self
            .value(x)
            .values()
            .chunks_exact(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let mut shape = xs;
        *shape.last_mut().unwrap() = w;
        let t = Tensor::new(shape, vals)?;
        Ok(self.push(t, Op::SliceChannels { x, start }, &[x]))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat_channels", &sa, &sb));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        let mut vals = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.chunks_exact(ca).zip(bv.chunks_exact(cb)) {
            vals.extend_from_slice(ra);
            vals.extend_from_slice(rb);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let t = Tensor::new(shape, vals)?;
        Ok(self.push(t, Op::ConcatChannels { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// `a + scale · b` for equally shaped tensors.
    pub fn add_scaled(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add_scaled", self.shape(a), self.shape(b)));
        }
        let vals = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + scale * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), vals)?;
        Ok(self.push(t, Op::AddScaled { a, b, scale }, &[a, b]))
    }

    // ---- reverse sweep ------------------------------------------------------

    /// Backpropagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        self.backward_from(loss, vec![1.0])
    }

    /// Vector-Jacobian product: seeds `output` with `seed` and sweeps the tape
    /// in reverse, visiting each recorded operation once.
    pub fn backward_from(&mut self, output: Var, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.value(output).numel() {
            return Err(Error::dim("backward_from", self.shape(output), &[seed.len()]));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        self.nodes[output.0].value.grad = Some(seed);

        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.nodes[i].value.grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &dy);
            self.nodes[i].value.grad = Some(dy);
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                let target = &mut self.nodes[v.0].value;
                match &mut target.grad {
                    Some(acc) => elementwise_mut(acc, &g),
                    None => target.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, dy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.values();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Linear { x, w, b } => {
                let (cin, cout) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = dy.len() / cout;
                let mut grads = Vec::with_capacity(3);
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * cin];
                    gemm_nt(rows, cout, cin, dy, self.value(*w).values(), &mut dx, false);
                    grads.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; cin * cout];
                    gemm_tn(rows, cin, cout, self.value(*x).values(), dy, &mut dw, false);
                    grads.push((*w, dw));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; cout];
                    for row in dy.chunks_exact(cout) {
                        elementwise_mut(&mut db, row);
                    }
                    grads.push((*b, db));
                }
                grads
            }
            Op::Relu { x } => {
                let xv = self.value(*x).values();
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sigmoid { x } => {
                let dx = dy.iter().zip(out).map(|(&g, &s)| g * s * (1.0 - s)).collect();
                vec![(*x, dx)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let rows = dy.len() / c;
                let g = self.value(*gamma).values();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (dyr, hr) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        dgamma[j] += dyr[j] * hr[j];
                        dbeta[j] += dyr[j];
                    }
                }
                let mut grads = Vec::with_capacity(3);
                if self.needs(*x) {
                    let mut dx = vec![0.0; dy.len()];
                    if *train {
                        let m = rows as f64;
                        let k: Vec<f64> = (0..c).map(|j| g[j] * inv_std[j] / m).collect();
                        for ((dxr, dyr), hr) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                dxr[j] = k[j] * (m * dyr[j] - dbeta[j] - hr[j] * dgamma[j]);
                            }
                        }
                    } else {
                        let k: Vec<f64> = (0..c).map(|j| g[j] * inv_std[j]).collect();
                        for (dxr, dyr) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)) {
                            for j in 0..c {
                                dxr[j] = dyr[j] * k[j];
                            }
                        }
                    }
                    grads.push((*x, dx));
                }
                grads.push((*gamma, dgamma));
                grads.push((*beta, dbeta));
                grads
            }
            Op::MaxPool { x, argmax } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[1], xs[2]);
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (idx, (&g, &a)) in dy.iter().zip(argmax).enumerate() {
                    let (bi, j) = (idx / c, idx % c);
                    dx[(bi * n + a) * c + j] += g;
                }
                vec![(*x, dx)]
            }
            Op::Dropout { x, mask } => {
                let dx = dy.iter().zip(mask).map(|(g, m)| g * m).collect();
                vec![(*x, dx)]
            }
            Op::Bce { p, targets } => {
                let n = targets.len() as f64;
                let pv = self.value(*p).values();
                let dp = pv
                    .iter()
                    .zip(targets)
                    .map(|(&q, &y)| dy[0] * (q - y) / (n * q * (1.0 - q)))
                    .collect();
                vec![(*p, dp)]
            }
            Op::BatchMatmul { x, t } => {
                let xs = self.shape(*x);
                let (b, n, k) = (xs[0], xs[1], xs[2]);
                let m = self.shape(*t)[2];
                let (xv, tv) = (self.value(*x).values(), self.value(*t).values());
                let mut grads = Vec::with_capacity(2);
                if self.needs(*x) {
                    let mut dx = vec![0.0; b * n * k];
                    for bi in 0..b {
                        gemm_nt(
                            n,
                            m,
                            k,
                            &dy[bi * n * m..],
                            &tv[bi * k * m..],
                            &mut dx[bi * n * k..(bi + 1) * n * k],
                            false,
                        );
                    }
                    grads.push((*x, dx));
                }
                if self.needs(*t) {
                    let mut dt = vec![0.0; b * k * m];
                    for bi in 0..b {
                        gemm_tn(
                            n,
                            k,
                            m,
                            &xv[bi * n * k..],
                            &dy[bi * n * m..],
                            &mut dt[bi * k * m..(bi + 1) * k * m],
                            false,
                        );
                    }
                    grads.push((*t, dt));
                }
                grads
            }
            Op::OrthoPenalty { a } => {
                let s = self.shape(*a);
                let k = *s.last().unwrap();
                let b = self.value(*a).numel() / (k * k);
                let av = self.value(*a).values();
                let mut da = vec![0.0; av.len()];
                let mut resid = vec![0.0; k * k];
                let scale = 4.0 * dy[0] / b as f64;
                for bi in 0..b {
                    let m = &av[bi * k * k..(bi + 1) * k * k];
                    gemm_nt(k, k, k, m, m, &mut resid, false);
                    for i in 0..k {
                        resid[i * k + i] -= 1.0;
                    }
                    let d = &mut da[bi * k * k..(bi + 1) * k * k];
                    gemm_nn(k, k, k, &resid, m, d, false);
                    d.iter_mut().for_each(|v| *v *= scale);
                }
                vec![(*a, da)]
            }
            Op::SliceChannels { x, start } => {
                let c = self.value(*x).last_dim();
                let w = node.value.last_dim();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (row, g) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(w)) {
                    row[*start..*start + w].copy_from_slice(g);
                }
                vec![(*x, dx)]
            }
            Op::ConcatChannels { a, b } => {
                let ca = self.value(*a).last_dim();
                let cb = self.value(*b).last_dim();
                let mut da = Vec::with_capacity(self.value(*a).numel());
                let mut db = Vec::with_capacity(self.value(*b).numel());
                for row in dy.chunks_exact(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Reshape { x } => vec![(*x, dy.to_vec())],
            Op::AddScaled { a, b, scale } => {
                vec![(*a, dy.to_vec()), (*b, dy.iter().map(|g| g * scale).collect())]
            }
        }
    }
}
