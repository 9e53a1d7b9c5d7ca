use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(index: usize) -> Self {
        Var(index)
    }
}

const LAYER_NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    BatchMatMul { a: usize, b: usize, g: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: usize, b: usize },
    AddBroadcast { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Reshape { a: usize },
    Permute { a: usize, out_shape: Vec<usize>, inverse: Vec<usize> },
    Gelu { a: usize },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, cols: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: usize, probs: Vec<f64>, labels: Vec<usize>, cols: usize },
    Sum { a: usize },
    Mean { a: usize },
    PrependToken { tokens: usize, cls: usize, batch: usize, m: usize, d: usize },
    SelectToken { x: usize, index: usize, batch: usize, n: usize, d: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Records one forward pass. Consumed by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the loss with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("tape values are well formed")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf carrying the tensor's value and `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape("constant", shape, &[value.len()]));
        }
        Ok(self.push(shape.to_vec(), value, false, Op::Leaf))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        gemm(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a: a.0, b: b.0, m, k, n }))
    }

    /// Batched product of `[g, m, k]` with `[g, k, n]`, or with `[g, n, k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (g, m, k, n) = match (sa, sb) {
            ([g, m, k], [g2, k2, n]) if g == g2 && !trans_b && k == k2 => (*g, *m, *k, *n),
            ([g, m, k], [g2, n, k2]) if g == g2 && trans_b && k == k2 => (*g, *m, *k, *n),
            _ => return Err(Error::shape("bmm", sa, sb)),
        };
        let mut out = vec![0.0; g * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..g {
            let ab = &av[i * m * k..(i + 1) * m * k];
            let bb = &bv[i * k * n..(i + 1) * k * n];
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(ab, bb, ob, m, k, n);
            } else {
                gemm(ab, bb, ob, m, k, n);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![g, m, n], out, rg, Op::BatchMatMul { a: a.0, b: b.0, g, m, k, n, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add { a: a.0, b: b.0 }))
    }

    /// Adds `b` to every trailing block of `a`; `b`'s shape must equal the
    /// trailing dimensions of `a` (bias rows, position tables, masks).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let bv = self.value(b);
        let len = bv.len();
        let out = self
            .value(a)
            .chunks(len)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(sa.to_vec(), out, rg, Op::AddBroadcast { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale { a: a.0, c })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), out, rg, Op::Reshape { a: a.0 }))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &sa, perm));
        }
        let out = permute_data(self.value(a), &sa, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape.clone(), out, rg, Op::Permute { a: a.0, out_shape, inverse }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::shape("transpose", self.shape(a), &[2]));
        }
        self.permute(a, &[1, 0])
    }

    /// Gaussian-error linear unit, tanh form.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Gelu { a: a.0 })
    }

    /// Numerically stabilized softmax along `axis`. `-inf` entries are allowed
    /// (they map to exactly zero) as long as every slice has a finite maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    let v = x[at(j)];
                    if v.is_nan() || v == f64::INFINITY {
                        return Err(Error::Numeric(format!("softmax input {v}")));
                    }
                    max = max.max(v);
                }
                if !max.is_finite() {
                    return Err(Error::Numeric("softmax slice has no finite entry".into()));
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, rg, Op::Softmax { a: a.0, outer, len, inner }))
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap();
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = xv.len() / cols;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, cols, xhat, rstd },
        ))
    }

    /// Mean softmax cross-entropy over the rows of `[batch, classes]` logits.
    /// With `allowed`, logits of disallowed classes are treated as `-inf`:
    /// their probability is exactly zero and so is their gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], allowed: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (rows, cols) = match shape[..] {
            [r, c] => (r, c),
            _ => return Err(Error::shape("cross_entropy", &shape, &[labels.len()])),
        };
        if labels.len() != rows {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        if let Some(mask) = allowed {
            if mask.len() != cols {
                return Err(Error::shape("cross_entropy mask", &shape, &[mask.len()]));
            }
        }
        let open = |c: usize| allowed.map_or(true, |m| m[c]);
        let x = self.value(logits);
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            let label = labels[r];
            if label >= cols || !open(label) {
                return Err(Error::Data(format!("label {label} is outside the {cols} available classes")));
            }
            let row = &x[r * cols..(r + 1) * cols];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite logit".into()));
            }
            let max = (0..cols).filter(|&c| open(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in (0..cols).filter(|&c| open(c)) {
                let e = (row[c] - max).exp();
                probs[r * cols + c] = e;
                total += e;
            }
            for c in 0..cols {
                probs[r * cols + c] /= total;
            }
            loss += total.ln() + max - row[label];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss / rows as f64],
            rg,
            Op::CrossEntropy { logits: logits.0, probs, labels: labels.to_vec(), cols },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], rg, Op::Sum { a: a.0 })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], rg, Op::Mean { a: a.0 })
    }

    /// `[batch, m, d]` tokens with a shared `[1, d]` token prepended to each
    /// sequence.
    pub fn prepend_token(&mut self, tokens: Var, cls: Var) -> Result<Var> {
        let (st, sc) = (self.shape(tokens), self.shape(cls));
        let (batch, m, d) = match (st, sc) {
            ([b, m, d], [1, d2]) if d == d2 => (*b, *m, *d),
            _ => return Err(Error::shape("prepend_token", st, sc)),
        };
        let (tv, cv) = (self.value(tokens), self.value(cls));
        let mut out = Vec::with_capacity(batch * (m + 1) * d);
        for b in 0..batch {
            out.extend_from_slice(cv);
            out.extend_from_slice(&tv[b * m * d..(b + 1) * m * d]);
        }
        let rg = self.rg(&[tokens, cls]);
        Ok(self.push(
            vec![batch, m + 1, d],
            out,
            rg,
            Op::PrependToken { tokens: tokens.0, cls: cls.0, batch, m, d },
        ))
    }

    /// Row `index` of every sequence in `[batch, n, d]`, giving `[batch, d]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let (batch, n, d) = match self.shape(x) {
            [b, n, d] if index < *n => (*b, *n, *d),
            s => return Err(Error::shape("select_token", s, &[index])),
        };
        let xv = self.value(x);
        let mut out = Vec::with_capacity(batch * d);
        for b in 0..batch {
            let at = (b * n + index) * d;
            out.extend_from_slice(&xv[at..at + d]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![batch, d], out, rg, Op::SelectToken { x: x.0, index, batch, n, d }))
    }

    /// Reverse pass from a scalar. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            propagate(&nodes, i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], target: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[target].requires_grad {
        return;
    }
    let slot = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
    f(slot);
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            accumulate(grads, nodes, a, |ga| gemm_nt(g, &nodes[b].value, ga, m, n, k));
            accumulate(grads, nodes, b, |gb| gemm_tn(&nodes[a].value, g, gb, k, m, n));
        }
        &Op::BatchMatMul { a, b, g: groups, m, k, n, trans_b } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            accumulate(grads, nodes, a, |ga| {
                for i in 0..groups {
                    let gg = &g[i * m * n..(i + 1) * m * n];
                    let bb = &bv[i * k * n..(i + 1) * k * n];
                    let out = &mut ga[i * m * k..(i + 1) * m * k];
                    if trans_b {
                        gemm(gg, bb, out, m, n, k);
                    } else {
                        gemm_nt(gg, bb, out, m, n, k);
                    }
                }
            });
            accumulate(grads, nodes, b, |gb| {
                for i in 0..groups {
                    let gg = &g[i * m * n..(i + 1) * m * n];
                    let ab = &av[i * m * k..(i + 1) * m * k];
                    let out = &mut gb[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        gemm_tn(gg, ab, out, n, m, k);
                    } else {
                        gemm_tn(ab, gg, out, k, m, n);
                    }
                }
            });
        }
        &Op::Add { a, b } => {
            accumulate(grads, nodes, a, |ga| add_into(ga, g));
            accumulate(grads, nodes, b, |gb| add_into(gb, g));
        }
        &Op::AddBroadcast { a, b } => {
            accumulate(grads, nodes, a, |ga| add_into(ga, g));
            accumulate(grads, nodes, b, |gb| {
                for chunk in g.chunks(gb.len()) {
                    add_into(gb, chunk);
                }
            });
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            accumulate(grads, nodes, a, |ga| {
                for ((o, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                    *o += gi * y;
                }
            });
            accumulate(grads, nodes, b, |gb| {
                for ((o, gi), x) in gb.iter_mut().zip(g).zip(av) {
                    *o += gi * x;
                }
            });
        }
        &Op::Scale { a, c } => accumulate(grads, nodes, a, |ga| {
            for (o, gi) in ga.iter_mut().zip(g) {
                *o += gi * c;
            }
        }),
        &Op::Reshape { a } => accumulate(grads, nodes, a, |ga| add_into(ga, g)),
        Op::Permute { a, out_shape, inverse } => {
            let back = permute_data(g, out_shape, inverse);
            accumulate(grads, nodes, *a, |ga| add_into(ga, &back));
        }
        &Op::Gelu { a } => {
            let xv = &nodes[a].value;
            accumulate(grads, nodes, a, |ga| {
                for ((o, gi), &x) in ga.iter_mut().zip(g).zip(xv) {
                    *o += gi * gelu_grad(x);
                }
            });
        }
        &Op::Softmax { a, outer, len, inner } => {
            let y = &node.value;
            accumulate(grads, nodes, a, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, cols, xhat, rstd } => {
            let cols = *cols;
            let gv = &nodes[*gamma].value;
            accumulate(grads, nodes, *gamma, |gg| {
                for (r_g, r_h) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for c in 0..cols {
                        gg[c] += r_g[c] * r_h[c];
                    }
                }
            });
            accumulate(grads, nodes, *beta, |gb| {
                for r_g in g.chunks(cols) {
                    add_into(gb, r_g);
                }
            });
            accumulate(grads, nodes, *x, |gx| {
                for (r, (r_g, r_h)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for c in 0..cols {
                        let d = r_g[c] * gv[c];
                        mean_d += d;
                        mean_dh += d * r_h[c];
                    }
                    mean_d /= cols as f64;
                    mean_dh /= cols as f64;
                    for c in 0..cols {
                        let d = r_g[c] * gv[c];
                        gx[r * cols + c] += rstd[r] * (d - mean_d - r_h[c] * mean_dh);
                    }
                }
            });
        }
        Op::CrossEntropy { logits, probs, labels, cols } => {
            let scale = g[0] / labels.len() as f64;
            accumulate(grads, nodes, *logits, |gl| {
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..*cols {
                        let target = if c == label { 1.0 } else { 0.0 };
                        gl[r * cols + c] += scale * (probs[r * cols + c] - target);
                    }
                }
            });
        }
        &Op::Sum { a } => accumulate(grads, nodes, a, |ga| ga.iter_mut().for_each(|o| *o += g[0])),
        &Op::Mean { a } => {
            let n = nodes[a].value.len() as f64;
            accumulate(grads, nodes, a, |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
        }
        &Op::PrependToken { tokens, cls, batch, m, d } => {
            accumulate(grads, nodes, cls, |gc| {
                for b in 0..batch {
                    let at = b * (m + 1) * d;
                    add_into(gc, &g[at..at + d]);
                }
            });
            accumulate(grads, nodes, tokens, |gt| {
                for b in 0..batch {
                    let at = b * (m + 1) * d + d;
                    add_into(&mut gt[b * m * d..(b + 1) * m * d], &g[at..at + m * d]);
                }
            });
        }
        &Op::SelectToken { x, index, batch, n, d } => accumulate(grads, nodes, x, |gx| {
            for b in 0..batch {
                let at = (b * n + index) * d;
                add_into(&mut gx[at..at + d], &g[b * d..(b + 1) * d]);
            }
        }),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
