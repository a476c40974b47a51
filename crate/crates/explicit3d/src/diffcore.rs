//! Minimal reverse-mode differentiation kernel.
//!
//! Values live on a [`Tape`] arena; creation order is a topological order,
//! so the backward pass is a single reverse sweep that visits each node
//! once. Scalars are plain length-1 vectors, matrices are row-major.
//!
//! Gradients accumulate: each [`Tape::backward`] call adds the exact
//! derivative of its root into every node's `grad` buffer, and
//! [`Tape::flush_grads`] folds parameter-leaf gradients back into the
//! [`ParamStore`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffValue(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    /// Leaf bound to a named store parameter.
    Param(usize),
    /// Differentiable leaf not bound to the store.
    Var,
    /// Leaf that must not receive gradient.
    Const,
    Interior,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatVec { w: usize, x: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Sqrt(usize),
    Recip(usize),
    Sin(usize),
    Cos(usize),
    Wrap(usize),
    Concat(Vec<usize>),
    Slice { p: usize, start: usize },
    Sum(usize),
    BroadcastMul { s: usize, v: usize },
    Min2(usize, usize),
    Max2(usize, usize),
    ReduceMax(usize),
    ReduceMin(usize),
    Atan2 { y: usize, x: usize },
    SoftmaxCe { logits: usize, target: usize },
}

struct Node {
    data: Vec<f64>,
    grad: Vec<f64>,
    rows: usize,
    cols: usize,
    kind: Kind,
    op: Op,
}

/// Computation graph arena. One tape per forward pass.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn wrap_angle(a: f64) -> f64 {
    crate::geometry::wrap_angle(a)
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, data: Vec<f64>, rows: usize, cols: usize, kind: Kind, op: Op) -> DiffValue {
        debug_assert_eq!(data.len(), rows * cols);
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            data,
            grad,
            rows,
            cols,
            kind,
            op,
        });
        DiffValue(self.nodes.len() - 1)
    }

    pub fn len(&self, v: DiffValue) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: DiffValue) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn data(&self, v: DiffValue) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: DiffValue) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn scalar(&self, v: DiffValue) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Differentiable leaf.
    pub fn var(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> DiffValue {
        self.push(data, rows, cols, Kind::Var, Op::Leaf)
    }

    pub fn var_vec(&mut self, data: Vec<f64>) -> DiffValue {
        let n = data.len();
        self.var(data, n, 1)
    }

    /// Leaf marked constant: no gradient ever flows into it.
    pub fn constant(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> DiffValue {
        self.push(data, rows, cols, Kind::Const, Op::Leaf)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> DiffValue {
        let n = data.len();
        self.constant(data, n, 1)
    }

    pub fn constant_scalar(&mut self, x: f64) -> DiffValue {
        self.constant(vec![x], 1, 1)
    }

    /// Leaf bound to a named parameter in `store`; [`Tape::flush_grads`]
    /// folds its gradient back.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<DiffValue> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let p = store.by_index(idx);
        Ok(self.push(p.data.clone(), p.rows, p.cols, Kind::Param(idx), Op::Leaf))
    }

    // ---- primitive ops ----

    pub fn matvec(&mut self, w: DiffValue, x: DiffValue) -> Result<DiffValue> {
        let (wr, wc) = self.shape(w);
        let (xr, xc) = self.shape(x);
        if xc != 1 || wc != xr {
            return Err(invalid(format!(
                "matvec shape mismatch: ({wr}x{wc}) * ({xr}x{xc})"
            )));
        }
        let mut out = vec![0.0; wr];
        {
            let wd = &self.nodes[w.0].data;
            let xd = &self.nodes[x.0].data;
            for (i, o) in out.iter_mut().enumerate() {
                let row = &wd[i * wc..(i + 1) * wc];
                *o = row.iter().zip(xd.iter()).map(|(a, b)| a * b).sum();
            }
        }
        Ok(self.push(out, wr, 1, Kind::Interior, Op::MatVec { w: w.0, x: x.0 }))
    }

    fn binary(
        &mut self,
        a: DiffValue,
        b: DiffValue,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<DiffValue> {
        if self.shape(a) != self.shape(b) {
            return Err(invalid(format!(
                "elementwise shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (r, c) = self.shape(a);
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(data, r, c, Kind::Interior, op))
    }

    pub fn add(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.binary(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn min2(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.binary(a, b, f64::min, Op::Min2(a.0, b.0))
    }

    pub fn max2(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.binary(a, b, f64::max, Op::Max2(a.0, b.0))
    }

    fn unary(&mut self, a: DiffValue, f: impl Fn(f64) -> f64, op: Op) -> DiffValue {
        let (r, c) = self.shape(a);
        let data = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        self.push(data, r, c, Kind::Interior, op)
    }

    pub fn scale(&mut self, a: DiffValue, k: f64) -> DiffValue {
        self.unary(a, |x| k * x, Op::Scale(a.0, k))
    }

    pub fn add_const(&mut self, a: DiffValue, k: f64) -> DiffValue {
        self.unary(a, |x| x + k, Op::AddConst(a.0))
    }

    pub fn relu(&mut self, a: DiffValue) -> DiffValue {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: DiffValue) -> DiffValue {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: DiffValue) -> DiffValue {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: DiffValue) -> DiffValue {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn sqrt(&mut self, a: DiffValue) -> DiffValue {
        self.unary(a, f64::sqrt, Op::Sqrt(a.0))
    }

    pub fn recip(&mut self, a: DiffValue) -> DiffValue {
        self.unary(a, |x| 1.0 / x, Op::Recip(a.0))
    }

    pub fn sin(&mut self, a: DiffValue) -> DiffValue {
        self.unary(a, f64::sin, Op::Sin(a.0))
    }

    pub fn cos(&mut self, a: DiffValue) -> DiffValue {
        self.unary(a, f64::cos, Op::Cos(a.0))
    }

    /// Elementwise wrap to `[-pi, pi)`; derivative 1 almost everywhere.
    pub fn wrap(&mut self, a: DiffValue) -> DiffValue {
        self.unary(a, wrap_angle, Op::Wrap(a.0))
    }

    pub fn concat(&mut self, parts: &[DiffValue]) -> DiffValue {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let n = data.len();
        self.push(
            data,
            n,
            1,
            Kind::Interior,
            Op::Concat(parts.iter().map(|p| p.0).collect()),
        )
    }

    pub fn slice(&mut self, a: DiffValue, start: usize, len: usize) -> Result<DiffValue> {
        if start + len > self.len(a) {
            return Err(invalid("slice out of range"));
        }
        let data = self.nodes[a.0].data[start..start + len].to_vec();
        Ok(self.push(data, len, 1, Kind::Interior, Op::Slice { p: a.0, start }))
    }

    pub fn index(&mut self, a: DiffValue, i: usize) -> Result<DiffValue> {
        self.slice(a, i, 1)
    }

    pub fn sum(&mut self, a: DiffValue) -> DiffValue {
        let s = self.nodes[a.0].data.iter().sum();
        self.push(vec![s], 1, 1, Kind::Interior, Op::Sum(a.0))
    }

    /// Scalar times vector.
    pub fn broadcast_mul(&mut self, s: DiffValue, v: DiffValue) -> Result<DiffValue> {
        if self.len(s) != 1 {
            return Err(invalid("broadcast_mul expects a scalar multiplier"));
        }
        let k = self.nodes[s.0].data[0];
        let (r, c) = self.shape(v);
        let data = self.nodes[v.0].data.iter().map(|&x| k * x).collect();
        Ok(self.push(data, r, c, Kind::Interior, Op::BroadcastMul { s: s.0, v: v.0 }))
    }

    pub fn reduce_max(&mut self, a: DiffValue) -> DiffValue {
        let m = self.nodes[a.0].data.iter().cloned().fold(f64::MIN, f64::max);
        self.push(vec![m], 1, 1, Kind::Interior, Op::ReduceMax(a.0))
    }

    pub fn reduce_min(&mut self, a: DiffValue) -> DiffValue {
        let m = self.nodes[a.0].data.iter().cloned().fold(f64::MAX, f64::min);
        self.push(vec![m], 1, 1, Kind::Interior, Op::ReduceMin(a.0))
    }

    pub fn atan2(&mut self, y: DiffValue, x: DiffValue) -> Result<DiffValue> {
        if self.len(y) != 1 || self.len(x) != 1 {
            return Err(invalid("atan2 expects scalars"));
        }
        let v = self.nodes[y.0].data[0].atan2(self.nodes[x.0].data[0]);
        Ok(self.push(vec![v], 1, 1, Kind::Interior, Op::Atan2 { y: y.0, x: x.0 }))
    }

    // ---- composed helpers ----

    /// `w * x + b`.
    pub fn linear(&mut self, x: DiffValue, w: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    /// Mean squared difference against a constant target.
    pub fn mse(&mut self, a: DiffValue, target: &[f64]) -> Result<DiffValue> {
        if self.len(a) != target.len() {
            return Err(invalid("mse shape mismatch"));
        }
        let t = self.constant_vec(target.to_vec());
        let d = self.sub(a, t)?;
        let sq = self.mul(d, d)?;
        let s = self.sum(sq);
        Ok(self.scale(s, 1.0 / target.len() as f64))
    }

    /// Euclidean norm; zero-safe (zero gradient at the origin).
    pub fn norm2(&mut self, a: DiffValue) -> Result<DiffValue> {
        let sq = self.mul(a, a)?;
        let s = self.sum(sq);
        Ok(self.sqrt(s))
    }

    /// Numerically stabilized `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: DiffValue, target: usize) -> Result<DiffValue> {
        let n = self.len(logits);
        if target >= n {
            return Err(invalid(format!(
                "cross-entropy target {target} out of range for {n} logits"
            )));
        }
        let d = &self.nodes[logits.0].data;
        let max = d.iter().cloned().fold(f64::MIN, f64::max);
        let log_sum: f64 = d.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        let loss = log_sum - d[target];
        Ok(self.push(
            vec![loss],
            1,
            1,
            Kind::Interior,
            Op::SoftmaxCe {
                logits: logits.0,
                target,
            },
        ))
    }

    /// Standard GRU cell: `h = (1 - z) .* h_prev + z .* h_cand`.
    pub fn gru_step(
        &mut self,
        h_prev: DiffValue,
        x: DiffValue,
        p: &GruWeights,
    ) -> Result<DiffValue> {
        let zx = self.matvec(p.wz, x)?;
        let zh = self.matvec(p.uz, h_prev)?;
        let z = {
            let s = self.add(zx, zh)?;
            let s = self.add(s, p.bz)?;
            self.sigmoid(s)
        };
        let rx = self.matvec(p.wr, x)?;
        let rh = self.matvec(p.ur, h_prev)?;
        let r = {
            let s = self.add(rx, rh)?;
            let s = self.add(s, p.br)?;
            self.sigmoid(s)
        };
        let cx = self.matvec(p.wh, x)?;
        let rhp = self.mul(r, h_prev)?;
        let ch = self.matvec(p.uh, rhp)?;
        let cand = {
            let s = self.add(cx, ch)?;
            let s = self.add(s, p.bh)?;
            self.tanh(s)
        };
        let zc = self.mul(z, cand)?;
        let neg_z = self.scale(z, -1.0);
        let one_minus_z = self.add_const(neg_z, 1.0);
        let keep = self.mul(one_minus_z, h_prev)?;
        self.add(keep, zc)
    }

    /// Reverse sweep from a scalar root; adds `d root / d node` into every
    /// node's accumulated gradient.
    pub fn backward(&mut self, root: DiffValue) -> Result<()> {
        if self.len(root) != 1 {
            return Err(invalid("backward root must be scalar"));
        }
        let mut local: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .take(root.0 + 1)
            .map(|n| vec![0.0; n.data.len()])
            .collect();
        local[root.0][0] = 1.0;
        for i in (0..=root.0).rev() {
            if local[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut local[i]);
            self.propagate(i, &g, &mut local);
            local[i] = g;
        }
        for (node, l) in self.nodes.iter_mut().zip(local.into_iter()) {
            if node.kind == Kind::Const {
                continue;
            }
            for (acc, add) in node.grad.iter_mut().zip(l.into_iter()) {
                *acc += add;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatVec { w, x } => {
                let cols = self.nodes[*x].data.len();
                let xd = &self.nodes[*x].data;
                let wd = &self.nodes[*w].data;
                for (r, &gr) in g.iter().enumerate() {
                    if gr == 0.0 {
                        continue;
                    }
                    for c in 0..cols {
                        local[*w][r * cols + c] += gr * xd[c];
                        local[*x][c] += gr * wd[r * cols + c];
                    }
                }
            }
            Op::Add(a, b) => {
                for (k, &gr) in g.iter().enumerate() {
                    local[*a][k] += gr;
                    local[*b][k] += gr;
                }
            }
            Op::Sub(a, b) => {
                for (k, &gr) in g.iter().enumerate() {
                    local[*a][k] += gr;
                    local[*b][k] -= gr;
                }
            }
            Op::Mul(a, b) => {
                let ad = &self.nodes[*a].data;
                let bd = &self.nodes[*b].data;
                for (k, &gr) in g.iter().enumerate() {
                    local[*a][k] += gr * bd[k];
                    local[*b][k] += gr * ad[k];
                }
            }
            Op::Scale(a, k) => {
                for (idx, &gr) in g.iter().enumerate() {
                    local[*a][idx] += gr * k;
                }
            }
            Op::AddConst(a) => {
                for (idx, &gr) in g.iter().enumerate() {
                    local[*a][idx] += gr;
                }
            }
            Op::Relu(a) => {
                let ad = &self.nodes[*a].data;
                for (k, &gr) in g.iter().enumerate() {
                    if ad[k] > 0.0 {
                        local[*a][k] += gr;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let yd = &node.data;
                for (k, &gr) in g.iter().enumerate() {
                    local[*a][k] += gr * yd[k] * (1.0 - yd[k]);
                }
            }
            Op::Tanh(a) => {
                let yd = &node.data;
                for (k, &gr) in g.iter().enumerate() {
                    local[*a][k] += gr * (1.0 - yd[k] * yd[k]);
                }
            }
            Op::Exp(a) => {
                let yd = &node.data;
                for (k, &gr) in g.iter().enumerate() {
                    local[*a][k] += gr * yd[k];
                }
            }
            Op::Sqrt(a) => {
                let yd = &node.data;
                for (k, &gr) in g.iter().enumerate() {
                    if yd[k] > 0.0 {
                        local[*a][k] += gr * 0.5 / yd[k];
                    }
                }
            }
            Op::Recip(a) => {
                let yd = &node.data;
                for (k, &gr) in g.iter().enumerate() {
                    local[*a][k] -= gr * yd[k] * yd[k];
                }
            }
            Op::Sin(a) => {
                let ad = &self.nodes[*a].data;
                for (k, &gr) in g.iter().enumerate() {
                    local[*a][k] += gr * ad[k].cos();
                }
            }
            Op::Cos(a) => {
                let ad = &self.nodes[*a].data;
                for (k, &gr) in g.iter().enumerate() {
                    local[*a][k] -= gr * ad[k].sin();
                }
            }
            Op::Wrap(a) => {
                for (k, &gr) in g.iter().enumerate() {
                    local[*a][k] += gr;
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].data.len();
                    for k in 0..len {
                        local[p][k] += g[off + k];
                    }
                    off += len;
                }
            }
            Op::Slice { p, start } => {
                for (k, &gr) in g.iter().enumerate() {
                    local[*p][start + k] += gr;
                }
            }
            Op::Sum(a) => {
                let gr = g[0];
                for slot in local[*a].iter_mut() {
                    *slot += gr;
                }
            }
            Op::BroadcastMul { s, v } => {
                let k = self.nodes[*s].data[0];
                let vd = &self.nodes[*v].data;
                for (idx, &gr) in g.iter().enumerate() {
                    local[*v][idx] += gr * k;
                    local[*s][0] += gr * vd[idx];
                }
            }
            Op::Min2(a, b) => {
                let ad = &self.nodes[*a].data;
                let bd = &self.nodes[*b].data;
                for (k, &gr) in g.iter().enumerate() {
                    if ad[k] <= bd[k] {
                        local[*a][k] += gr;
                    } else {
                        local[*b][k] += gr;
                    }
                }
            }
            Op::Max2(a, b) => {
                let ad = &self.nodes[*a].data;
                let bd = &self.nodes[*b].data;
                for (k, &gr) in g.iter().enumerate() {
                    if ad[k] >= bd[k] {
                        local[*a][k] += gr;
                    } else {
                        local[*b][k] += gr;
                    }
                }
            }
            Op::ReduceMax(a) => {
                let ad = &self.nodes[*a].data;
                let (arg, _) = ad
                    .iter()
                    .enumerate()
                    .fold((0, f64::MIN), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
                local[*a][arg] += g[0];
            }
            Op::ReduceMin(a) => {
                let ad = &self.nodes[*a].data;
                let (arg, _) = ad
                    .iter()
                    .enumerate()
                    .fold((0, f64::MAX), |acc, (k, &v)| if v < acc.1 { (k, v) } else { acc });
                local[*a][arg] += g[0];
            }
            Op::Atan2 { y, x } => {
                let yv = self.nodes[*y].data[0];
                let xv = self.nodes[*x].data[0];
                let denom = yv * yv + xv * xv;
                if denom > 0.0 {
                    local[*y][0] += g[0] * xv / denom;
                    local[*x][0] -= g[0] * yv / denom;
                }
            }
            Op::SoftmaxCe { logits, target } => {
                let d = &self.nodes[*logits].data;
                let max = d.iter().cloned().fold(f64::MIN, f64::max);
                let denom: f64 = d.iter().map(|&v| (v - max).exp()).sum();
                for (k, slot) in local[*logits].iter_mut().enumerate() {
                    let p = (d[k] - max).exp() / denom;
                    let onehot = if k == *target { 1.0 } else { 0.0 };
                    *slot += g[0] * (p - onehot);
                }
            }
        }
    }

    /// Fold accumulated parameter-leaf gradients into the store.
    pub fn flush_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let Kind::Param(idx) = node.kind {
                let p = store.by_index_mut(idx);
                for (acc, &g) in p.grad.iter_mut().zip(node.grad.iter()) {
                    *acc += g;
                }
            }
        }
    }
}

/// Layer-size description of a fully connected ReLU network. Parameters are
/// registered as `<name>.w<i>` / `<name>.b<i>`.
#[derive(Debug, Clone)]
pub struct MlpDef {
    pub name: String,
    pub dims: Vec<usize>,
}

impl MlpDef {
    pub fn new(name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        Self {
            name: name.to_string(),
            dims: dims.to_vec(),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for l in 0..self.dims.len() - 1 {
            store.insert_gaussian(
                &format!("{}.w{l}", self.name),
                self.dims[l + 1],
                self.dims[l],
                rng,
            )?;
            store.insert_zeros(&format!("{}.b{l}", self.name), self.dims[l + 1], 1)?;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<MlpBound> {
        let mut layers = Vec::new();
        for l in 0..self.dims.len() - 1 {
            let w = tape.param(store, &format!("{}.w{l}", self.name))?;
            let b = tape.param(store, &format!("{}.b{l}", self.name))?;
            layers.push((w, b));
        }
        Ok(MlpBound { layers })
    }
}

/// Tape-bound MLP weights; ReLU between layers, linear output.
#[derive(Debug, Clone)]
pub struct MlpBound {
    pub layers: Vec<(DiffValue, DiffValue)>,
}

impl MlpBound {
    pub fn forward(&self, tape: &mut Tape, x: DiffValue) -> Result<DiffValue> {
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.linear(h, w, b)?;
            if l + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Register the nine GRU parameter tensors under `<name>.*`.
pub fn register_gru(
    name: &str,
    dim: usize,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for mat in ["wz", "uz", "wr", "ur", "wh", "uh"] {
        store.insert_gaussian(&format!("{name}.{mat}"), dim, dim, rng)?;
    }
    for bias in ["bz", "br", "bh"] {
        store.insert_zeros(&format!("{name}.{bias}"), dim, 1)?;
    }
    Ok(())
}

pub fn bind_gru(name: &str, tape: &mut Tape, store: &ParamStore) -> Result<GruWeights> {
    Ok(GruWeights {
        wz: tape.param(store, &format!("{name}.wz"))?,
        uz: tape.param(store, &format!("{name}.uz"))?,
        bz: tape.param(store, &format!("{name}.bz"))?,
        wr: tape.param(store, &format!("{name}.wr"))?,
        ur: tape.param(store, &format!("{name}.ur"))?,
        br: tape.param(store, &format!("{name}.br"))?,
        wh: tape.param(store, &format!("{name}.wh"))?,
        uh: tape.param(store, &format!("{name}.uh"))?,
        bh: tape.param(store, &format!("{name}.bh"))?,
    })
}

/// GRU weight handles on a tape (3 input matrices, 3 state matrices, 3
/// biases).
#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    pub wz: DiffValue,
    pub uz: DiffValue,
    pub bz: DiffValue,
    pub wr: DiffValue,
    pub ur: DiffValue,
    pub br: DiffValue,
    pub wh: DiffValue,
    pub uh: DiffValue,
    pub bh: DiffValue,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
    #[serde(default)]
    pub adam_m: Vec<f64>,
    #[serde(default)]
    pub adam_v: Vec<f64>,
}

/// Named parameters plus Adam state, iterated in insertion order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
    pub adam_t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuild the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        for p in &mut self.params {
            let n = p.data.len();
            p.grad = vec![0.0; n];
            if p.adam_m.len() != n {
                p.adam_m = vec![0.0; n];
            }
            if p.adam_v.len() != n {
                p.adam_v = vec![0.0; n];
            }
        }
    }

    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        assert_eq!(data.len(), rows * cols);
        let n = data.len();
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            rows,
            cols,
            data,
            grad: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
        });
        Ok(())
    }

    /// Fan-in-scaled Gaussian init.
    pub fn insert_gaussian(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let std = (1.0 / cols.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| {
                // Box-Muller
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
            })
            .collect();
        self.insert(name, rows, cols, data)
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        self.insert(name, rows, cols, vec![0.0; rows * cols])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    fn by_index(&self, i: usize) -> &Param {
        &self.params[i]
    }

    fn by_index_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// One Adam update over all parameters from the accumulated gradients.
    pub fn adam_step(&mut self, lr: f64) {
        self.adam_t += 1;
        let t = self.adam_t as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for p in &mut self.params {
            for k in 0..p.data.len() {
                let g = p.grad[k];
                p.adam_m[k] = ADAM_BETA1 * p.adam_m[k] + (1.0 - ADAM_BETA1) * g;
                p.adam_v[k] = ADAM_BETA2 * p.adam_v[k] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = p.adam_m[k] / bc1;
                let v_hat = p.adam_v[k] / bc2;
                p.data[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}
