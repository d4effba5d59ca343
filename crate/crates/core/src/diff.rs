//! Minimal reverse-mode differentiation over dense 2-D arrays.
//!
//! A [`Tape`] records every operation of one forward pass. Row vectors
//! (`1 × d`) broadcast over the batch dimension in [`Tape::add`] and
//! [`Tape::mul`]. [`Tape::backward`] walks the recording in reverse and
//! accumulates gradients additively for every node that depends on a
//! parameter leaf.
//!
//! The operation set is exactly what the RealMLP forward pass needs; it is
//! not a general-purpose autodiff engine.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// SELU scale.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// SELU negative-branch coefficient.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Selu,
    Mish,
}

/// `(t, 1 − t², sigmoid(x))` with `t = tanh(softplus(x))`, from a single
/// exponential: `t = N / (N + 2)` for `n = eˣ`, `N = n(n + 2)`.
fn mish_parts(x: f64) -> (f64, f64, f64) {
    if x > 20.0 {
        // tanh(softplus(x)) rounds to 1 here
        return (1.0, 0.0, 1.0);
    }
    let n = x.exp();
    let big = n * (n + 2.0);
    let d = big + 2.0;
    (big / d, 4.0 * (big + 1.0) / (d * d), n / (1.0 + n))
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
                }
            }
            Activation::Mish => x * mish_parts(x).0,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        self.apply_with_derivative(x).1
    }

    /// `(σ(x), σ'(x))`.
    pub fn apply_with_derivative(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Activation::Selu => {
                if x > 0.0 {
                    (SELU_LAMBDA * x, SELU_LAMBDA)
                } else {
                    let e = x.exp();
                    (
                        SELU_LAMBDA * SELU_ALPHA * x.exp_m1(),
                        SELU_LAMBDA * SELU_ALPHA * e,
                    )
                }
            }
            Activation::Mish => {
                let (t, sech2, sig) = mish_parts(x);
                (x * t, t + x * sech2 * sig)
            }
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Cos(Var),
    Sin(Var),
    Act(Var, Activation),
    ParamAct(Var, Var, Activation),
    Concat(Vec<Var>),
    SelectCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    GroupedLinear {
        x: Var,
        w: Var,
        groups: usize,
        k_in: usize,
        k_out: usize,
    },
    Dropout(Var, Array2<f64>),
    SoftmaxCe {
        logits: Var,
        targets: Array2<f64>,
        probs: Array2<f64>,
    },
    Mse(Var, Array2<f64>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes ownership of a gradient, or zeros of the given shape when the
    /// loss did not depend on `v`.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims(a: &Array2<f64>) -> String {
    format!("{}x{}", a.nrows(), a.ncols())
}

/// Sums rows when the forward pass broadcast a row vector.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    if g.dim() == shape {
        g
    } else {
        g.sum_axis(Axis(0)).insert_axis(Axis(0))
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
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

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
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

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a non-trainable leaf (data, fixed inputs).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(shape_err("matmul", format!("{} · {}", dims(av), dims(bv))));
        }
        let out = av.dot(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`; `b` is stored output-major, as linear-layer weights are.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(shape_err(
                "matmul_nt",
                format!("{} · ({})ᵀ", dims(av), dims(bv)),
            ));
        }
        let out = av.dot(&bv.t());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        let ok = av.ncols() == bv.ncols() && (av.nrows() == bv.nrows() || bv.nrows() == 1);
        if ok {
            Ok(())
        } else {
            Err(shape_err(op, format!("{} with {}", dims(av), dims(bv))))
        }
    }

    /// Elementwise `a + b`; `b` may be a `1 × d` row broadcast over rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise `a * b`; `b` may be a `1 × d` row broadcast over rows of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::cos);
        let rg = self.rg(a);
        self.push(out, Op::Cos(a), rg)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::sin);
        let rg = self.rg(a);
        self.push(out, Op::Sin(a), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let out = self.value(a).mapv(|x| act.apply(x));
        let rg = self.rg(a);
        self.push(out, Op::Act(a, act), rg)
    }

    /// Parametric activation `(1 − α)·x + α·σ(x)` with one `α` per column.
    pub fn param_activation(&mut self, x: Var, alpha: Var, act: Activation) -> Result<Var> {
        let (xv, av) = (self.value(x), self.value(alpha));
        if av.nrows() != 1 || av.ncols() != xv.ncols() {
            return Err(shape_err(
                "param_activation",
                format!("{} with alpha {}", dims(xv), dims(av)),
            ));
        }
        let mut out = xv.clone();
        Zip::from(out.rows_mut()).for_each(|mut row| {
            Zip::from(&mut row).and(av.row(0)).for_each(|v, &a| {
                *v = (1.0 - a) * *v + a * act.apply(*v);
            });
        });
        let rg = self.rg(x) || self.rg(alpha);
        Ok(self.push(out, Op::ParamAct(x, alpha, act), rg))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let n = self.value(*first).nrows();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).nrows() != n) {
            return Err(shape_err(
                "concat",
                format!("row count {} vs {}", self.value(*bad).nrows(), n),
            ));
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| shape_err("concat", e.to_string()))?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Output column `j` is input column `cols[j]`; repeats and permutations allowed.
    pub fn select_cols(&mut self, a: Var, cols: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if let Some(&c) = cols.iter().find(|&&c| c >= av.ncols()) {
            return Err(shape_err(
                "select_cols",
                format!("column {c} of {}", dims(av)),
            ));
        }
        let out = av.select(Axis(1), &cols);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SelectCols(a, cols), rg))
    }

    /// Output row `i` is table row `rows[i]` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, rows: Vec<usize>) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&r) = rows.iter().find(|&&r| r >= tv.nrows()) {
            return Err(shape_err("gather_rows", format!("row {r} of {}", dims(tv))));
        }
        let out = tv.select(Axis(0), &rows);
        let rg = self.rg(table);
        Ok(self.push(out, Op::GatherRows(table, rows), rg))
    }

    /// Block-diagonal linear map: `x` holds `groups` blocks of `k_in`
    /// columns; row `g` of `w` is the `k_out × k_in` matrix of block `g`,
    /// flattened row-major. Output holds `groups` blocks of `k_out` columns.
    pub fn grouped_linear(
        &mut self,
        x: Var,
        w: Var,
        groups: usize,
        k_in: usize,
        k_out: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ncols() != groups * k_in || wv.dim() != (groups, k_out * k_in) {
            return Err(shape_err(
                "grouped_linear",
                format!(
                    "x {} w {} for {groups} groups {k_in}->{k_out}",
                    dims(xv),
                    dims(wv)
                ),
            ));
        }
        let n = xv.nrows();
        let mut out = Array2::zeros((n, groups * k_out));
        for g in 0..groups {
            let xg = xv.slice(s![.., g * k_in..(g + 1) * k_in]);
            let wg = wv
                .row(g)
                .into_shape_with_order((k_out, k_in))
                .map_err(|e| shape_err("grouped_linear", e.to_string()))?;
            out.slice_mut(s![.., g * k_out..(g + 1) * k_out])
                .assign(&xg.dot(&wg.t()));
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            out,
            Op::GroupedLinear {
                x,
                w,
                groups,
                k_in,
                k_out,
            },
            rg,
        ))
    }

    /// Multiplies by a fixed mask. Inverted dropout uses mask entries in
    /// `{0, 1/(1−p)}`; the mask is a constant for differentiation.
    pub fn dropout(&mut self, a: Var, mask: Array2<f64>) -> Result<Var> {
        let av = self.value(a);
        if av.dim() != mask.dim() {
            return Err(shape_err(
                "dropout",
                format!("{} with mask {}", dims(av), dims(&mask)),
            ));
        }
        let out = av * &mask;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Dropout(a, mask), rg))
    }

    /// Mean softmax cross-entropy against `q = (1 − ε)·onehot + ε/K`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        smoothing: f64,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = lv.dim();
        if labels.len() != n || n == 0 {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} logits, {} labels", n, labels.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("label {l} with {k} classes"),
            ));
        }
        let probs = softmax_rows(lv);
        let mut targets = Array2::from_elem((n, k), smoothing / k as f64);
        for (r, &l) in labels.iter().enumerate() {
            targets[[r, l]] += 1.0 - smoothing;
        }
        let mut loss = 0.0;
        for (lrow, trow) in lv.rows().into_iter().zip(targets.rows()) {
            let lse = log_sum_exp(lrow.iter().copied());
            for (&z, &q) in lrow.iter().zip(trow.iter()) {
                if q != 0.0 {
                    loss -= q * (z - lse);
                }
            }
        }
        loss /= n as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: Var, target: Array2<f64>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.dim() != target.dim() || pv.is_empty() {
            return Err(shape_err(
                "mse",
                format!("{} vs {}", dims(pv), dims(&target)),
            ));
        }
        let loss = (pv - &target).mapv(|d| d * d).mean().unwrap_or(0.0);
        let rg = self.rg(pred);
        Ok(self.push(Array2::from_elem((1, 1), loss), Op::Mse(pred, target), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a), rg)
    }

    /// Propagates `∂loss/∂node` for every node that depends on a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(shape_err(
                "backward",
                format!("loss must be 1x1, got {}", dims(lv)),
            ));
        }
        if !lv[[0, 0]].is_finite() {
            return Err(Error::NonFinite(format!("loss {}", lv[[0, 0]])));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.dot(&val(*b).t()));
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], val(*a).t().dot(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.dot(val(*b)));
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], g.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], reduce_to(g.clone(), val(*b).dim()));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g * val(*b));
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], reduce_to(g * val(*a), val(*b).dim()));
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g * *c);
                }
            }
            Op::Cos(a) => {
                if wants(*a) {
                    let mut d = val(*a).mapv(|x| -x.sin());
                    d *= g;
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Sin(a) => {
                if wants(*a) {
                    let mut d = val(*a).mapv(f64::cos);
                    d *= g;
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Act(a, act) => {
                if wants(*a) {
                    let mut d = val(*a).mapv(|x| act.derivative(x));
                    d *= g;
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::ParamAct(x, alpha, act) => {
                let (xv, av) = (val(*x), val(*alpha));
                let mut dx = Array2::zeros(xv.dim());
                let mut da = Array2::zeros(av.dim());
                Zip::from(dx.rows_mut())
                    .and(xv.rows())
                    .and(g.rows())
                    .for_each(|mut drow, xrow, grow| {
                        Zip::from(&mut drow)
                            .and(da.row_mut(0))
                            .and(xrow)
                            .and(grow)
                            .and(av.row(0))
                            .for_each(|dv, acc, &xi, &gi, &a| {
                                let (f, df) = act.apply_with_derivative(xi);
                                *dv = gi * ((1.0 - a) + a * df);
                                *acc += gi * (f - xi);
                            });
                    });
                if wants(*x) {
                    accumulate(&mut grads[x.0], dx);
                }
                if wants(*alpha) {
                    accumulate(&mut grads[alpha.0], da);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if wants(*p) {
                        accumulate(
                            &mut grads[p.0],
                            g.slice(s![.., offset..offset + w]).to_owned(),
                        );
                    }
                    offset += w;
                }
            }
            Op::SelectCols(a, cols) => {
                if wants(*a) {
                    let mut d = Array2::zeros(val(*a).dim());
                    for (j, &c) in cols.iter().enumerate() {
                        let mut dst = d.column_mut(c);
                        dst += &g.column(j);
                    }
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::GatherRows(table, rows) => {
                if wants(*table) {
                    let mut d = Array2::zeros(val(*table).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(r);
                        dst += &g.row(i);
                    }
                    accumulate(&mut grads[table.0], d);
                }
            }
            Op::GroupedLinear {
                x,
                w,
                groups,
                k_in,
                k_out,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = wants(*x).then(|| Array2::zeros(xv.dim()));
                let mut dw = wants(*w).then(|| Array2::zeros(wv.dim()));
                for grp in 0..*groups {
                    let gg = g.slice(s![.., grp * k_out..(grp + 1) * k_out]);
                    let wg = wv
                        .row(grp)
                        .into_shape_with_order((*k_out, *k_in))
                        .map_err(|e| shape_err("grouped_linear", e.to_string()))?;
                    if let Some(dx) = dx.as_mut() {
                        dx.slice_mut(s![.., grp * k_in..(grp + 1) * k_in])
                            .assign(&gg.dot(&wg));
                    }
                    if let Some(dw) = dw.as_mut() {
                        let xg = xv.slice(s![.., grp * k_in..(grp + 1) * k_in]);
                        let block = gg.t().dot(&xg);
                        let flat = block.iter().copied();
                        for (dst, v) in dw.row_mut(grp).iter_mut().zip(flat) {
                            *dst += v;
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads[w.0], dw);
                }
            }
            Op::Dropout(a, mask) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g * mask);
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                if wants(*logits) {
                    let n = probs.nrows() as f64;
                    let scale = g[[0, 0]] / n;
                    accumulate(&mut grads[logits.0], (probs - targets) * scale);
                }
            }
            Op::Mse(pred, target) => {
                if wants(*pred) {
                    let pv = val(*pred);
                    let scale = 2.0 * g[[0, 0]] / pv.len() as f64;
                    accumulate(&mut grads[pred.0], (pv - target) * scale);
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], Array2::from_elem(val(*a).dim(), g[[0, 0]]));
                }
            }
        }
        Ok(())
    }
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + it.map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - m).exp());
        let s = row.sum();
        row.mapv_inplace(|e| e / s);
    }
    out
}

/// Maximum over all parameter entries of
/// `|analytic − central difference| / max(1, |central difference|)`.
///
/// `f` must build a scalar loss from the parameter handles it receives;
/// it is re-run on fresh tapes for each perturbation.
pub fn grad_check<F>(f: F, params: &[Array2<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Array2<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.scalar(loss);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("loss {v} during gradient check")))
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Array2<f64>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(params[pi].dim()));
        for idx in 0..params[pi].len() {
            let (r, c) = (idx / params[pi].ncols(), idx % params[pi].ncols());
            let orig = params[pi][[r, c]];
            work[pi][[r, c]] = orig + h;
            let up = eval(&work)?;
            work[pi][[r, c]] = orig - h;
            let down = eval(&work)?;
            work[pi][[r, c]] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (analytic[[r, c]] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
