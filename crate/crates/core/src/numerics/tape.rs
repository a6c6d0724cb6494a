//! Reverse-mode differentiation on an explicit tape.
//!
//! A [`Tape`] records every operation of one forward pass together with the
//! values it needs for the backward sweep. Parameters live in a
//! [`ParamStore`]; each parameter enters a tape at most once, so gradients of
//! weights that are reused (recurrent matrices across time steps) accumulate
//! on a single node.
//!
//! Operations specific to one subsystem (sketch convolution, question-type
//! gating) plug in through the [`Function`] trait instead of growing the
//! built-in op set.

use std::collections::{BTreeMap, HashMap};

use super::tensor::{gemm, gemm_nt, gemm_tn, sigmoid_scalar, softmax_in_place, ElementwiseOp, Tensor};
use crate::error::{shape_err, Error, Result};

/// Probability floor used by cross-entropy, `-ln(max(p, CE_FLOOR))`.
pub const CE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; replaces the value if the name already exists.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.values[id.0] = value;
            return id;
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// All parameters concatenated in insertion order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for v in &self.values {
            out.extend_from_slice(v.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(shape_err(
                "assign_flat",
                format!("expected {} values, got {}", self.num_scalars(), flat.len()),
            ));
        }
        let mut offset = 0;
        for v in &mut self.values {
            let n = v.len();
            v.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Flattened gradients aligned with [`flatten`](Self::flatten); missing
    /// entries are zeros.
    pub fn flatten_grads(&self, grads: &Grads) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for id in self.ids() {
            match grads.param(id) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, self.get(id).len())),
            }
        }
        out
    }
}

/// Backward rule for an operation defined outside this module.
pub trait Function: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. each input, given the upstream gradient of the output.
    /// `None` means "no contribution".
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Elementwise(Var, Var, ElementwiseOp),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Gather(Var, Vec<usize>),
    SumRows(Var, Vec<Vec<usize>>),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
        clamped: Vec<bool>,
    },
    Sum(Var),
    Custom(Vec<Var>, Box<dyn Function>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Elementwise(..) => "elementwise",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Concat(_) => "concat",
            Op::Slice(..) => "slice",
            Op::Gather(..) => "gather",
            Op::SumRows(..) => "sum_rows",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::Sum(_) => "sum",
            Op::Custom(_, f) => f.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    first_non_finite: Option<&'static str>,
}

/// Result of a backward sweep.
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }
}

/// Number of rows when a tensor is viewed as `[rows × last]`.
fn rows_of(t: &Tensor) -> usize {
    match t.shape().last() {
        Some(&w) if w > 0 => t.len() / w,
        _ => 1,
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
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
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(op.name());
        }
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

    /// Fails if any recorded value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            None => Ok(()),
            Some(op) => Err(Error::NonFinite(op.to_string())),
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (gradients w.r.t. inputs).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(
            av.ndim() == 2 && bv.ndim() == 2 && av.cols() == bv.rows(),
            "tape matmul {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out).unwrap(), Op::MatMul(a, b), rg)
    }

    pub fn elementwise(&mut self, a: Var, b: Var, op: ElementwiseOp) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "tape elementwise shapes");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| op.apply(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Elementwise(a, b, op), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.elementwise(a, b, ElementwiseOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.elementwise(a, b, ElementwiseOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.elementwise(a, b, ElementwiseOp::Mul)
    }

    /// `x[r, :] + bias` for every row `r`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        let w = last_dim(xv);
        assert_eq!(bv.len(), w, "add_row bias width");
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(w.max(1)) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(value, Op::AddRow(x, bias), rg)
    }

    /// `x · W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid_scalar);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    /// Concatenation along the last axis. All inputs must have the same
    /// number of rows; 1-D inputs give a 1-D result.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = rows_of(self.value(parts[0]));
        let one_d = parts.iter().all(|&p| self.value(p).ndim() == 1);
        let widths: Vec<usize> = parts.iter().map(|&p| last_dim(self.value(p))).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = self.value(p);
                assert_eq!(rows_of(v) * w, v.len());
                assert_eq!(rows_of(v), rows, "concat row mismatch");
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let shape = if one_d { vec![total] } else { vec![rows, total] };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, data).unwrap(), Op::Concat(parts.to_vec()), rg)
    }

    /// Columns `start..end` along the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let w = last_dim(xv);
        assert!(start <= end && end <= w, "slice {start}..{end} of width {w}");
        let rows = rows_of(xv);
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * w + start..r * w + end]);
        }
        let shape = if xv.ndim() == 1 {
            vec![end - start]
        } else {
            vec![rows, end - start]
        };
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).unwrap(), Op::Slice(x, start, end), rg)
    }

    /// Rows `ids` of a `[V×d]` table, giving `[ids.len()×d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < tv.rows(), "gather row {i} of {}", tv.rows());
            data.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new(vec![ids.len(), d], data).unwrap(),
            Op::Gather(table, ids.to_vec()),
            rg,
        )
    }

    /// One output row per group: the sum of the listed table rows.
    pub fn sum_rows(&mut self, table: Var, groups: &[Vec<usize>]) -> Var {
        let tv = self.value(table);
        let d = tv.cols();
        let mut data = vec![0.0; groups.len() * d];
        for (g, ids) in groups.iter().enumerate() {
            let out = &mut data[g * d..(g + 1) * d];
            for &i in ids {
                assert!(i < tv.rows(), "sum_rows row {i} of {}", tv.rows());
                for (o, v) in out.iter_mut().zip(tv.row(i)) {
                    *o += v;
                }
            }
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new(vec![groups.len(), d], data).unwrap(),
            Op::SumRows(table, groups.to_vec()),
            rg,
        )
    }

    /// Mean over rows of `-ln(max(softmax(logits)[r, target_r], CE_FLOOR))`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let k = last_dim(lv);
        let rows = rows_of(lv);
        assert_eq!(rows, targets.len(), "softmax_xent targets");
        let mut probs = lv.clone();
        let mut clamped = Vec::with_capacity(rows);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < k, "target {t} of {k} classes");
            let row = &mut probs.data_mut()[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let nll = lse - row[t];
            softmax_in_place(row);
            let limit = -CE_FLOOR.ln();
            clamped.push(nll > limit);
            total += nll.min(limit);
        }
        let value = Tensor::scalar(total / rows.max(1) as f64);
        let rg = self.rg(logits);
        self.push(
            value,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
                clamped,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Records an externally defined operation whose forward value has already
    /// been computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, f: Box<dyn Function>) -> Var {
        let rg = inputs.iter().any(|&i| self.rg(i));
        self.push(value, Op::Custom(inputs.to_vec(), f), rg)
    }

    /// Backward sweep from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err("backward", format!("loss shape {:?}", lv.shape())));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.backward_from(loss, Tensor::filled(lv.shape().to_vec(), 1.0))
    }

    /// Backward sweep seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_from(&self, out: Var, upstream: Tensor) -> Result<Grads> {
        if upstream.shape() != self.value(out).shape() {
            return Err(shape_err(
                "backward_from",
                format!("{:?} vs {:?}", upstream.shape(), self.value(out).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(upstream);

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (&id, &v) in &self.param_vars {
            if let Some(g) = &grads[v.0] {
                params.insert(id, g.clone());
            }
        }
        Ok(Grads {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g.data(), bv.data(), &mut ga, m, n, k);
                    acc(grads, *a, Tensor::new(vec![m, k], ga).unwrap());
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(av.data(), g.data(), &mut gb, m, k, n);
                    acc(grads, *b, Tensor::new(vec![k, n], gb).unwrap());
                }
            }
            Op::Elementwise(a, b, op) => match op {
                ElementwiseOp::Add => {
                    acc(grads, *a, g.clone());
                    acc(grads, *b, g.clone());
                }
                ElementwiseOp::Sub => {
                    acc(grads, *a, g.clone());
                    acc(grads, *b, g.scale(-1.0));
                }
                ElementwiseOp::Mul => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        acc(grads, *a, zip_map(g, bv, |x, y| x * y));
                    }
                    if self.rg(*b) {
                        acc(grads, *b, zip_map(g, av, |x, y| x * y));
                    }
                }
            },
            Op::AddRow(x, b) => {
                acc(grads, *x, g.clone());
                if self.rg(*b) {
                    let bv = self.value(*b);
                    let w = bv.len();
                    let mut gb = vec![0.0; w];
                    for row in g.data().chunks(w.max(1)) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(grads, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
                }
            }
            Op::Scale(x, c) => acc(grads, *x, g.scale(*c)),
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(grads, *x, zip_map(g, xv, |gv, v| if v > 0.0 { gv } else { 0.0 }));
            }
            Op::Sigmoid(x) => {
                acc(grads, *x, zip_map(g, &node.value, |gv, y| gv * y * (1.0 - y)));
            }
            Op::Tanh(x) => {
                acc(grads, *x, zip_map(g, &node.value, |gv, y| gv * (1.0 - y * y)));
            }
            Op::Concat(parts) => {
                let rows = rows_of(&node.value);
                let total = last_dim(&node.value);
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = last_dim(pv);
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        acc(grads, p, Tensor::new(pv.shape().to_vec(), d).unwrap());
                    }
                    offset += w;
                }
            }
            Op::Slice(x, start, end) => {
                let xv = self.value(*x);
                let w = last_dim(xv);
                let rows = rows_of(xv);
                let sw = end - start;
                let mut d = vec![0.0; xv.len()];
                for r in 0..rows {
                    d[r * w + start..r * w + end].copy_from_slice(&g.data()[r * sw..(r + 1) * sw]);
                }
                acc(grads, *x, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::Gather(table, ids) => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut gt = vec![0.0; tv.len()];
                for (r, &i) in ids.iter().enumerate() {
                    for (o, v) in gt[i * d..(i + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                acc(grads, *table, Tensor::new(tv.shape().to_vec(), gt).unwrap());
            }
            Op::SumRows(table, groups) => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut gt = vec![0.0; tv.len()];
                for (r, ids) in groups.iter().enumerate() {
                    for &i in ids {
                        for (o, v) in gt[i * d..(i + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                }
                acc(grads, *table, Tensor::new(tv.shape().to_vec(), gt).unwrap());
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
                clamped,
            } => {
                let k = last_dim(probs);
                let rows = targets.len();
                let scale = g.item() / rows.max(1) as f64;
                let mut d = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if clamped[r] {
                        continue;
                    }
                    for j in 0..k {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        d[r * k + j] = (probs.data()[r * k + j] - onehot) * scale;
                    }
                }
                acc(grads, *logits, Tensor::new(probs.shape().to_vec(), d).unwrap());
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                acc(grads, *x, Tensor::filled(xv.shape().to_vec(), g.item()));
            }
            Op::Custom(inputs, f) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                let outs = f.backward(&ins, &node.value, g);
                debug_assert_eq!(outs.len(), inputs.len(), "{} backward arity", f.name());
                for (&i, gi) in inputs.iter().zip(outs) {
                    if let Some(gi) = gi {
                        debug_assert_eq!(gi.shape(), self.value(i).shape(), "{} grad shape", f.name());
                        acc(grads, i, gi);
                    }
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reused_param_accumulates_on_one_node() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::vector(&[3.0]));
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        assert_eq!(a, b);
        let sq = tape.mul(a, b);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(&[1.0, 2.0]));
        let x = tape.input(Tensor::vector(&[3.0, 4.0]));
        let y = tape.mul(c, x);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap());
        let w = tape.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.matmul(x, w);
        let t = tape.tanh(y);
        let grads = tape.backward_from(t, Tensor::zeros(vec![1, 2])).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.wrt(w).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn xent_of_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let l = tape.input(Tensor::zeros(vec![2, 5]));
        let loss = tape.softmax_xent(l, &[0, 3]);
        assert!((tape.value(loss).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn xent_is_clamped() {
        let mut tape = Tape::new();
        let l = tape.input(Tensor::matrix(1, 2, vec![0.0, 1e4]).unwrap());
        let loss = tape.softmax_xent(l, &[0]);
        assert!((tape.value(loss).item() + CE_FLOOR.ln()).abs() < 1e-9);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(l).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(&[f64::MAX]));
        let y = tape.add(x, x);
        assert!(tape.check_finite().is_err());
        let s = tape.sum(y);
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::vector(&[1.0, 2.0]));
        store.insert("b", Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let flat = store.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0]);
        store.assign_flat(&[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(store.by_name("b").unwrap().data(), &[6.0]);
        assert!(store.assign_flat(&[1.0]).is_err());
    }
}
