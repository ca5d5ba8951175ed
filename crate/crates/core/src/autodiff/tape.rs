//! Computation record for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Parameters are
//! loaded from a [`ParamStore`] at most once per tape; after
//! [`Tape::backward`] their gradients can be folded back into the store with
//! [`Tape::accumulate_param_grads`].

use std::collections::HashMap;
use std::rc::Rc;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{MagnetError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param { store: u64, id: ParamId },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    MulConst(Var, Rc<Vec<f64>>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    Sum(Var),
    Gather(Var, Rc<Vec<usize>>),
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    Conv2d { x: Var, kernel: Var, bias: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u64, ParamId), Var>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (shape.iter().product::<usize>() / cols.max(1), cols)
        }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input (gradients are tracked).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Loads a parameter onto the tape (cached per store and id).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        let v = self.push(
            store.value(id).clone(),
            Op::Param {
                store: store.uid(),
                id,
            },
            true,
        );
        self.params.insert(key, v);
        v
    }

    /// Like [`Tape::param`] but detached from gradient flow.
    pub fn param_frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a));
        let (k2, n) = dims2(self.shape(b));
        if k != k2 {
            return Err(MagnetError::Dimension(format!(
                "matmul [{m}x{k}] by [{k2}x{n}]"
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, w) in row.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = dims2(self.shape(a));
        let av = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(vec![n, m], out).expect("transpose shape"),
            Op::Transpose(a),
            rg,
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).len() != self.value(b).len() {
            return Err(MagnetError::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data).unwrap(), op, rg)
    }

    fn map_op(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data).unwrap(), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_op(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_op(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_op(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `a[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = dims2(self.shape(a));
        if self.value(b).len() != n {
            return Err(MagnetError::Dimension(format!(
                "add_row: {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let bv = self.value(b).data().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a, b), rg))
    }

    /// `a[m,n] * g[n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, g: Var) -> Result<Var> {
        let (_, n) = dims2(self.shape(a));
        if self.value(g).len() != n {
            return Err(MagnetError::Dimension(format!(
                "mul_row: {:?} * {:?}",
                self.shape(a),
                self.shape(g)
            )));
        }
        let gv = self.value(g).data().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * gv[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(g);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulRow(a, g), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map_op(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map_op(a, Op::AddScalar(a), |x| x + c)
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(MagnetError::Dimension(format!(
                "scale_by expects a scalar, got {:?}",
                self.shape(s)
            )));
        }
        let c = self.value(s).item();
        let rg = self.rg(a) || self.rg(s);
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::ScaleBy(a, s), rg))
    }

    /// Elementwise product with a constant mask (dropout, presence masks).
    pub fn mul_const(&mut self, a: Var, mask: Rc<Vec<f64>>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(MagnetError::Dimension(format!(
                "mask of {} for tensor {:?}",
                mask.len(),
                self.shape(a)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulConst(a, mask), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Picks flat indices of `a` into a tensor of `shape`.
    pub fn gather(&mut self, a: Var, indices: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let av = self.value(a).data();
        if let Some(bad) = indices.iter().find(|&&i| i >= av.len()) {
            return Err(MagnetError::Dimension(format!(
                "gather index {bad} out of {}",
                av.len()
            )));
        }
        let data = indices.iter().map(|&i| av[i]).collect();
        let rg = self.rg(a);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather(a, indices), rg))
    }

    /// Row `r` of a matrix as a `[1, n]` tensor.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(a));
        if r >= m {
            return Err(MagnetError::Dimension(format!("row {r} of {m}")));
        }
        let idx: Vec<usize> = (r * n..(r + 1) * n).collect();
        self.gather(a, Rc::new(idx), vec![1, n])
    }

    /// Flat element `i` as a `[1]` tensor.
    pub fn element(&mut self, a: Var, i: usize) -> Result<Var> {
        self.gather(a, Rc::new(vec![i]), vec![1])
    }

    /// Concatenates flattened inputs into one `[1, n]` row.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        let mut rg = false;
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
            rg |= self.rg(*p);
        }
        let n = data.len();
        self.push(
            Tensor::new(vec![1, n], data).unwrap(),
            Op::Concat(parts.to_vec()),
            rg,
        )
    }

    /// Stacks equal-length rows into a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(MagnetError::Input("stack_rows of nothing".into()));
        }
        let n = self.value(rows[0]).len();
        if rows.iter().any(|r| self.value(*r).len() != n) {
            return Err(MagnetError::Dimension("stack_rows: ragged rows".into()));
        }
        let v = self.concat(rows);
        self.reshape(v, vec![rows.len(), n])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(a));
        if start + len > n {
            return Err(MagnetError::Dimension(format!(
                "slice_cols {start}+{len} of {n}"
            )));
        }
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![m, len], data)?,
            Op::SliceCols { x: a, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(MagnetError::Input("concat_cols of nothing".into()));
        }
        let (m, _) = dims2(self.shape(parts[0]));
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = dims2(self.shape(*p));
            if pm != m {
                return Err(MagnetError::Dimension(format!(
                    "concat_cols: {pm} rows vs {m}"
                )));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        let mut rg = false;
        for (p, w) in parts.iter().zip(&widths) {
            let pv = self.value(*p).data();
            for i in 0..m {
                data[i * total + off..i * total + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
            rg |= self.rg(*p);
        }
        Ok(self.push(
            Tensor::new(vec![m, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = dims2(self.shape(a));
        let av = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out).unwrap(), Op::SoftmaxRows(a), rg)
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (m, n) = dims2(self.shape(a));
        let av = self.value(a).data();
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * is;
            }
            inv_std.push(is);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(
            Tensor::new(shape, out).unwrap(),
            Op::LayerNormRows { x: a, inv_std },
            rg,
        )
    }

    /// Valid 2-D convolution. `x` is `[H, W, C]`, `kernel` is `[K, K, C, F]`,
    /// `bias` is `[F]`; the result is `[H-K+1, W-K+1, F]`. Zero input cells
    /// are skipped, which makes sparse occupancy grids cheap.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[0] != ks[1] || ks[2] != xs[2] {
            return Err(MagnetError::Dimension(format!(
                "conv2d input {xs:?} with kernel {ks:?}"
            )));
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let (k, f) = (ks[0], ks[3]);
        if h < k || w < k {
            return Err(MagnetError::Input(format!(
                "grid {h}x{w} smaller than kernel {k}x{k}"
            )));
        }
        if self.value(bias).len() != f {
            return Err(MagnetError::Dimension(format!(
                "conv2d bias {:?} for {f} filters",
                self.shape(bias)
            )));
        }
        let (oh, ow) = (h - k + 1, w - k + 1);
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; oh * ow * f];
        for o in 0..oh * ow {
            out[o * f..(o + 1) * f].copy_from_slice(bv);
        }
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let val = xv[(i * w + j) * c + ch];
                    if val == 0.0 {
                        continue;
                    }
                    for ki in 0..k.min(i + 1) {
                        let oi = i - ki;
                        if oi >= oh {
                            continue;
                        }
                        for kj in 0..k.min(j + 1) {
                            let oj = j - kj;
                            if oj >= ow {
                                continue;
                            }
                            let kbase = ((ki * k + kj) * c + ch) * f;
                            let obase = (oi * ow + oj) * f;
                            for ff in 0..f {
                                out[obase + ff] += val * kv[kbase + ff];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![oh, ow, f], out)?,
            Op::Conv2d { x, kernel, bias },
            rg,
        ))
    }

    /// 2x2 max-pooling with stride 2 over a `[H, W, F]` tensor (floor semantics).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[0] < 2 || xs[1] < 2 {
            return Err(MagnetError::Dimension(format!("max_pool2 input {xs:?}")));
        }
        let (h, w, f) = (xs[0], xs[1], xs[2]);
        let (ph, pw) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; ph * pw * f];
        let mut argmax = vec![0usize; ph * pw * f];
        for i in 0..ph {
            for j in 0..pw {
                for ff in 0..f {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = ((2 * i + di) * w + (2 * j + dj)) * f + ff;
                            if xv[idx] > best {
                                best = xv[idx];
                                bi = idx;
                            }
                        }
                    }
                    let o = (i * pw + j) * f + ff;
                    out[o] = best;
                    argmax[o] = bi;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![ph, pw, f], out)?,
            Op::MaxPool2 { x, argmax },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Fills gradients of every node reachable from the scalar `loss`.
    /// A tape can be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(MagnetError::Contract(
                "computation record already consumed by a backward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(MagnetError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.shape(v).to_vec(), delta).unwrap());
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let (_, n) = dims2(self.shape(*b));
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &gd[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &gd[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, gg) in drow.iter_mut().zip(grow) {
                                *d += x * gg;
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = dims2(self.shape(*a));
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = gd[c * m + r];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.rg(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for (idx, gg) in gd.iter().enumerate() {
                        db[idx % n] += gg;
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MulRow(a, gain) => {
                let n = self.value(*gain).len();
                let av = self.value(*a).data();
                let gv = self.value(*gain).data();
                if self.rg(*a) {
                    let da = gd.iter().enumerate().map(|(idx, x)| x * gv[idx % n]).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*gain) {
                    let mut dg = vec![0.0; n];
                    for (idx, x) in gd.iter().enumerate() {
                        dg[idx % n] += x * av[idx];
                    }
                    self.accumulate(grads, *gain, dg);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gd.iter().map(|x| x * c).collect());
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, gd.to_vec());
            }
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).item();
                if self.rg(*a) {
                    self.accumulate(grads, *a, gd.iter().map(|x| x * c).collect());
                }
                if self.rg(*s) {
                    let ds: f64 = gd.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *s, vec![ds]);
                }
            }
            Op::MulConst(a, mask) => {
                self.accumulate(grads, *a, gd.iter().zip(mask.iter()).map(|(x, m)| x * m).collect());
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let da = gd
                    .iter()
                    .zip(av)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Tanh(a) => {
                let da = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Square(a) => {
                let da = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| 2.0 * g * x)
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Gather(a, idx) => {
                if self.rg(*a) {
                    let mut da = vec![0.0; self.value(*a).len()];
                    for (k, &src) in idx.iter().enumerate() {
                        da[src] += gd[k];
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, gd[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = dims2(self.shape(*x));
                let (_, len) = dims2(out.shape());
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dims2(out.shape());
                let mut off = 0;
                for p in parts {
                    let (_, w) = dims2(self.shape(*p));
                    let mut dp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dp.extend_from_slice(&gd[r * total + off..r * total + off + w]);
                    }
                    self.accumulate(grads, *p, dp);
                    off += w;
                }
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = dims2(out.shape());
                let y = out.data();
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let dot: f64 = (0..n).map(|j| gd[r * n + j] * y[r * n + j]).sum();
                    for j in 0..n {
                        da[r * n + j] = y[r * n + j] * (gd[r * n + j] - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNormRows { x, inv_std } => {
                let (m, n) = dims2(out.shape());
                let y = out.data();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let gr = &gd[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Conv2d { x, kernel, bias } => self.conv2d_backward(*x, *kernel, *bias, gd, grads),
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gd[o];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, gd.to_vec());
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        kernel: Var,
        bias: Var,
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let (k, f) = (ks[0], ks[3]);
        let (oh, ow) = (h - k + 1, w - k + 1);
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        if self.rg(bias) {
            let mut db = vec![0.0; f];
            for o in 0..oh * ow {
                for ff in 0..f {
                    db[ff] += gd[o * f + ff];
                }
            }
            self.accumulate(grads, bias, db);
        }
        let need_k = self.rg(kernel);
        let need_x = self.rg(x);
        if !need_k && !need_x {
            return;
        }
        let mut dk = if need_k { vec![0.0; kv.len()] } else { Vec::new() };
        let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let val = xv[(i * w + j) * c + ch];
                    if val == 0.0 && !need_x {
                        continue;
                    }
                    let mut acc = 0.0;
                    for ki in 0..k.min(i + 1) {
                        let oi = i - ki;
                        if oi >= oh {
                            continue;
                        }
                        for kj in 0..k.min(j + 1) {
                            let oj = j - kj;
                            if oj >= ow {
                                continue;
                            }
                            let kbase = ((ki * k + kj) * c + ch) * f;
                            let obase = (oi * ow + oj) * f;
                            for ff in 0..f {
                                if need_k && val != 0.0 {
                                    dk[kbase + ff] += val * gd[obase + ff];
                                }
                                if need_x {
                                    acc += kv[kbase + ff] * gd[obase + ff];
                                }
                            }
                        }
                    }
                    if need_x {
                        dx[(i * w + j) * c + ch] = acc;
                    }
                }
            }
        }
        if need_k {
            self.accumulate(grads, kernel, dk);
        }
        if need_x {
            self.accumulate(grads, x, dx);
        }
    }

    /// Adds this tape's parameter gradients into `store.grad`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        let uid = store.uid();
        for (&(s, id), v) in &self.params {
            if s != uid {
                continue;
            }
            if let Some(g) = self.grad(*v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }

    /// The parameter of `store` this node was loaded from, if any.
    pub fn param_of(&self, v: Var, store: &ParamStore) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param { store: s, id } if s == store.uid() => Some(id),
            _ => None,
        }
    }

    /// Whether the node was created from a parameter of `store`.
    pub fn is_param_of(&self, v: Var, store: &ParamStore) -> bool {
        self.param_of(v, store).is_some()
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
