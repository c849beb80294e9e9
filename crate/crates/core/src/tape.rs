//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and the ids of its
//! inputs. `backward` walks the tape once in reverse. Nodes that do not
//! depend on any trainable leaf are skipped.

use crate::tensor::{self, Tensor};

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
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRow(Var, usize),
    NegLogPick { probs: Var, index: usize, floor: f64 },
    Sum(Var),
    BceWithLogits(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by node; `None` where nothing flowed.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when none flowed.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(like.rows, like.cols))
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = Tensor::matmul(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`; with `b` a weight matrix stored `out × in` this is a linear map.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = Tensor::matmul_nt(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let v = Tensor::from_vec(x.rows, x.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
        let v = Tensor::from_vec(x.rows, x.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((1, x.cols), y.shape(), "add_row shape mismatch");
        let mut data = x.data.clone();
        for row in data.chunks_mut(x.cols) {
            for (d, bv) in row.iter_mut().zip(&y.data) {
                *d += bv;
            }
        }
        let v = Tensor::from_vec(x.rows, x.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::AddRow(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let v = Tensor::from_vec(x.rows, x.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let v = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|p| p * s).collect());
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|p| p.tanh()).collect());
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|&p| sigmoid(p)).collect());
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows {
            data.extend(tensor::softmax(x.row(r)));
        }
        let v = Tensor::from_vec(x.rows, x.cols, data);
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols, "reshape changes element count");
        let v = Tensor::from_vec(rows, cols, x.data.clone());
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice out of range");
        let mut data = Vec::with_capacity(x.rows * len);
        for r in 0..x.rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let v = Tensor::from_vec(x.rows, len, data);
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows, rows, "concat row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Row `index` of `table` as a `1 × cols` tensor (embedding lookup).
    pub fn gather_row(&mut self, table: Var, index: usize) -> Var {
        let t = self.value(table);
        let v = Tensor::row_vector(t.row(index).to_vec());
        let ng = self.ng(table);
        self.push(v, Op::GatherRow(table, index), ng)
    }

    /// `-ln(max(p[index], floor))` for a `1 × n` probability row.
    pub fn neg_log_pick(&mut self, probs: Var, index: usize, floor: f64) -> Var {
        let p = self.value(probs).data[index];
        let v = Tensor::scalar(-(p.max(floor)).ln());
        let ng = self.ng(probs);
        self.push(v, Op::NegLogPick { probs, index, floor }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// Numerically stable binary cross-entropy on a `1 × 1` logit.
    pub fn bce_with_logits(&mut self, logit: Var, label: f64) -> Var {
        let z = self.value(logit).item();
        let loss = z.max(0.0) - z * label + (-z.abs()).exp().ln_1p();
        let ng = self.ng(logit);
        self.push(Tensor::scalar(loss), Op::BceWithLogits(logit, label), ng)
    }

    /// Sum of `1 × 1` terms; a zero constant when `terms` is empty.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut iter = terms.iter();
        match iter.next() {
            None => self.constant(Tensor::scalar(0.0)),
            Some(&first) => iter.fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let x = self.value(v);
        grads[v.0].get_or_insert_with(|| Tensor::zeros(x.rows, x.cols))
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_val = self.value(root);
        grads[root.0] = Some(Tensor::from_vec(root_val.rows, root_val.cols, vec![1.0; root_val.len()]));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = Tensor::matmul_nt(&g, self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        Tensor::matmul_tn_acc(self.grad_slot(&mut grads, *b), self.value(*a), &g);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.ng(*a) {
                        let ga = Tensor::matmul(&g, self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        Tensor::matmul_tn_acc(self.grad_slot(&mut grads, *b), &g, self.value(*a));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        let mut neg = g;
                        neg.scale_in_place(-1.0);
                        accumulate(&mut grads, *b, neg);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.ng(*b) {
                        let mut gb = Tensor::zeros(1, g.cols);
                        for row in g.data.chunks(g.cols) {
                            for (d, v) in gb.data.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let ga = elementwise(&g, self.value(*b), |x, y| x * y);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = elementwise(&g, self.value(*a), |x, y| x * y);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.scale_in_place(*s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = elementwise(&g, &node.value, |x, y| x * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = elementwise(&g, &node.value, |x, y| x * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner = tensor::dot(yr, gr);
                        for c in 0..y.cols {
                            ga.data[r * y.cols + c] = yr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::from_vec(x.rows, x.cols, g.data));
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        ga.data[r * x.cols + start..r * x.cols + start + g.cols]
                            .copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.value(*p).cols;
                        if self.ng(*p) {
                            let mut data = Vec::with_capacity(g.rows * cols);
                            for r in 0..g.rows {
                                data.extend_from_slice(&g.row(r)[offset..offset + cols]);
                            }
                            accumulate(&mut grads, *p, Tensor::from_vec(g.rows, cols, data));
                        }
                        offset += cols;
                    }
                }
                Op::GatherRow(table, index) => {
                    let cols = self.value(*table).cols;
                    let slot = self.grad_slot(&mut grads, *table);
                    let row = &mut slot.data[index * cols..(index + 1) * cols];
                    for (d, v) in row.iter_mut().zip(&g.data) {
                        *d += v;
                    }
                }
                Op::NegLogPick { probs, index, floor } => {
                    let p = self.value(*probs);
                    let mut gp = Tensor::zeros(p.rows, p.cols);
                    if p.data[*index] > *floor {
                        gp.data[*index] = -g.item() / p.data[*index];
                    }
                    accumulate(&mut grads, *probs, gp);
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::from_vec(x.rows, x.cols, vec![g.item(); x.len()]));
                }
                Op::BceWithLogits(logit, label) => {
                    let z = self.value(*logit).item();
                    accumulate(&mut grads, *logit, Tensor::scalar(g.item() * (sigmoid(z) - label)));
                }
            }
        }
        Gradients { grads }
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

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data[i] += h;
                let mut m = x.clone();
                m.data[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn build(tape: &mut Tape, w: &Tensor) -> (Var, Var) {
        let wv = tape.param(w);
        let x = tape.constant(Tensor::from_vec(2, 3, vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7]));
        let h = tape.matmul_nt(x, wv);
        let h = tape.tanh(h);
        let s = tape.slice_cols(h, 1, 2);
        let c = tape.concat_cols(&[s, h]);
        let r = tape.reshape(c, 1, 10);
        let p = tape.softmax_rows(r);
        let l = tape.neg_log_pick(p, 3, 1e-10);
        let sg = tape.sigmoid(r);
        let s2 = tape.sum(sg);
        let total = tape.add(l, s2);
        (wv, total)
    }

    #[test]
    fn composite_gradient_matches_finite_difference() {
        let w = Tensor::from_vec(3, 3, vec![0.2, -0.4, 0.1, 0.7, 0.3, -0.2, -0.5, 0.6, 0.05]);
        let mut tape = Tape::new();
        let (wv, total) = build(&mut tape, &w);
        let grads = tape.backward(total);
        let analytic = grads.get(wv).unwrap().data.clone();
        let numeric = numeric_grad(
            |t| {
                let mut tape = Tape::new();
                let (_, total) = build(&mut tape, t);
                tape.value(total).item()
            },
            &w,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let p = tape.param(&Tensor::scalar(3.0));
        let m = tape.mul(c, p);
        let g = tape.backward(m);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().item(), 2.0);
    }

    #[test]
    fn bce_matches_definition() {
        let mut tape = Tape::new();
        let z = tape.param(&Tensor::scalar(0.3));
        let l = tape.bce_with_logits(z, 1.0);
        let expected = -(sigmoid(0.3)).ln();
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
        let g = tape.backward(l);
        assert!((g.get(z).unwrap().item() - (sigmoid(0.3) - 1.0)).abs() < 1e-12);
    }
}
