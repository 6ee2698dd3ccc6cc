//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] borrows a [`ParamSet`] read-only, records every forward op as a
//! node, and on [`Graph::backward`] replays the tape in reverse. Parameter
//! gradients come back as a [`Gradients`] value that the caller accumulates
//! into the parameter set, so several graphs (for example one per training
//! example) can contribute to one optimizer step.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::param::{ParamId, ParamSet};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Op families that a [`GradFault`] can target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    MaskedSoftmax,
    LayerNorm,
    Gelu,
}

/// Deliberately wrong gradient rule, used as a negative control for
/// gradient checking: the input gradient of every `op` node is multiplied
/// by `factor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradFault {
    pub op: OpKind,
    pub factor: f64,
}

enum Op<F> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Gelu(Var),
    Tanh(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Sum(Var),
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<'p, F> {
    params: &'p ParamSet<F>,
    nodes: Vec<Node<F>>,
    param_vars: BTreeMap<ParamId, Var>,
    fault: Option<GradFault>,
}

/// Parameter gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    grads: BTreeMap<ParamId, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    /// Adds every gradient into the matching parameter's grad buffer.
    pub fn accumulate_into(&self, params: &mut ParamSet<F>) {
        for (&id, g) in &self.grads {
            let p = params.get_mut(id);
            for (dst, &src) in p.grad_mut().data_mut().iter_mut().zip(g.data()) {
                *dst += src;
            }
        }
    }
}

fn dims2(t: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p ParamSet<F>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(mut self, fault: Option<GradFault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn params(&self) -> &'p ParamSet<F> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters read by this graph so far, in id order.
    pub fn touched_params(&self) -> Vec<ParamId> {
        self.param_vars.keys().copied().collect()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; gradients are not tracked through it.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf for a parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.params.get(id);
        let node = Node {
            value: p.shared_value(),
            op: Op::Param(id),
            requires_grad: p.trainable,
        };
        self.nodes.push(node);
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_nt")?;
        let (n, k2) = dims2(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", &[m, k], &[n, k2]));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "add_row")?;
        let tb = self.value(bias);
        if tb.shape() != [n] {
            return Err(Error::shape("add_row", &[m, n], tb.shape()));
        }
        let b = tb.data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape(), tx.data().iter().map(|&v| v * c).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// Row-wise softmax of `x + mask`, stabilised by the row maximum.
    pub fn masked_softmax(&mut self, x: Var, mask: &AttentionMask) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "masked_softmax")?;
        if mask.shape() != [r, c] {
            return Err(Error::shape("masked_softmax", &[r, c], &mask.shape()));
        }
        mask.validate()?;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let dst = &mut out[i * c..(i + 1) * c];
            for (j, (d, &v)) in dst.iter_mut().zip(row).enumerate() {
                *d = v + F::lit(mask.entry(i, j));
            }
            let max = dst.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for d in dst.iter_mut() {
                *d = (*d - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::MaskedSoftmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer norm eps must be > 0, got {eps}")));
        }
        let (n, d) = dims2(self.value(x), "layer_norm")?;
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(Error::shape("layer_norm", &[n, d], self.value(p).shape()));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let dn = F::lit(d as f64);
        let mut xhat = vec![F::zero(); n * d];
        let mut inv_std = vec![F::zero(); n];
        let mut out = vec![F::zero(); n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let is = F::one() / (var + F::lit(eps)).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::new(&[n, d], out)?, op, rg))
    }

    /// GELU with the exact Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let half = F::lit(0.5);
        let inv_sqrt2 = F::lit(std::f64::consts::FRAC_1_SQRT_2);
        let data = tx
            .data()
            .iter()
            .map(|&v| half * v * (F::one() + (v * inv_sqrt2).erf()))
            .collect();
        let t = Tensor::new(tx.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape(), tx.data().iter().map(|v| v.tanh()).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Tanh(x), rg)
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], table_name: &'static str) -> Result<Var> {
        let (rows, d) = dims2(self.value(table), "embedding")?;
        if let Some((index, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= rows) {
            return Err(Error::IdOutOfRange {
                table: table_name,
                index,
                id,
                size: rows,
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(Tensor::new(&[ids.len(), d], out)?, op, rg))
    }

    /// Selects rows of a matrix, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.embedding(x, rows, "row")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, c) = dims2(self.value(first), "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c2) = dims2(self.value(p), "concat_rows")?;
            if c2 != c {
                return Err(Error::shape("concat_rows", &[rows, c], &[r, c2]));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[rows, c], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (r, _) = dims2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = dims2(self.value(p), "concat_cols")?;
            if r2 != r {
                return Err(Error::shape("concat_cols", &[r, 0], &[r2, c]));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "slice_cols")?;
        if start + len > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = dims2(self.value(logits), "cross_entropy")?;
        if targets.len() != n || n == 0 {
            return Err(Error::shape("cross_entropy", &[n, c], &[targets.len()]));
        }
        if let Some((index, &id)) = targets.iter().enumerate().find(|(_, &t)| t >= c) {
            return Err(Error::IdOutOfRange {
                table: "class",
                index,
                id,
                size: c,
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![F::zero(); n * c];
        let mut total = F::zero();
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp();
                sum += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= sum;
            }
            total += sum.ln() + max - row[targets[i]];
        }
        let loss = total / F::lit(n as f64);
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Backpropagates from a scalar loss with seed gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        self.backward_scaled(loss, F::one())
    }

    /// Backpropagates `seed · d loss`. Only nodes up to `loss` are visited.
    pub fn backward_scaled(&self, loss: Var, seed: F) -> Result<Gradients<F>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![seed]);
        let mut out = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, g, &mut grads, &mut out)?;
        }
        Ok(Gradients { grads: out })
    }

    fn fault_factor(&self, kind: OpKind) -> Option<F> {
        self.fault
            .filter(|f| f.op == kind)
            .map(|f| F::lit(f.factor))
    }

    fn propagate(
        &self,
        node: &Node<F>,
        g: Vec<F>,
        grads: &mut [Option<Vec<F>>],
        out: &mut BTreeMap<ParamId, Tensor<F>>,
    ) -> Result<()> {
        let val = |v: Var| -> &Tensor<F> { &self.nodes[v.0].value };
        let rg = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                out.insert(*id, Tensor::new(node.value.shape(), g)?);
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2(val(*a), "matmul")?;
                let n = val(*b).cols();
                if rg(*a) {
                    let mut ga = vec![F::zero(); m * k];
                    gemm_nt(&g, val(*b).data(), &mut ga, m, n, k);
                    if let Some(f) = self.fault_factor(OpKind::MatMul) {
                        ga.iter_mut().for_each(|v| *v *= f);
                    }
                    accumulate(grads, *a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![F::zero(); k * n];
                    gemm_tn(val(*a).data(), &g, &mut gb, m, k, n);
                    accumulate(grads, *b, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                // c = a·bᵀ: da = g·b, db = gᵀ·a
                let (m, k) = dims2(val(*a), "matmul_nt")?;
                let n = val(*b).rows();
                if rg(*a) {
                    let mut ga = vec![F::zero(); m * k];
                    gemm(&g, val(*b).data(), &mut ga, m, n, k);
                    accumulate(grads, *a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![F::zero(); n * k];
                    gemm_tn(&g, val(*a).data(), &mut gb, m, n, k);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if rg(*a) && rg(*b) {
                    accumulate(grads, *b, g.clone());
                    accumulate(grads, *a, g);
                } else if rg(*a) {
                    accumulate(grads, *a, g);
                } else if rg(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::AddRow(x, bias) => {
                if rg(*bias) {
                    let n = val(*bias).numel();
                    let mut gb = vec![F::zero(); n];
                    for row in g.chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *bias, gb);
                }
                if rg(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let ga = g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, ga);
                }
                if rg(*b) {
                    let gb = g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, c) => {
                accumulate(grads, *x, g.iter().map(|&v| v * *c).collect());
            }
            Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut gx = vec![F::zero(); y.len()];
                for ((gr, yr), dst) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                if let Some(f) = self.fault_factor(OpKind::MaskedSoftmax) {
                    gx.iter_mut().for_each(|v| *v *= f);
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = val(*gain).numel();
                let gn = val(*gain).data();
                if rg(*gain) {
                    let mut gg = vec![F::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &gv), &hv) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += gv * hv;
                        }
                    }
                    accumulate(grads, *gain, gg);
                }
                if rg(*bias) {
                    let mut gb = vec![F::zero(); d];
                    for gr in g.chunks(d) {
                        for (o, &gv) in gb.iter_mut().zip(gr) {
                            *o += gv;
                        }
                    }
                    accumulate(grads, *bias, gb);
                }
                if rg(*x) {
                    let dn = F::lit(d as f64);
                    let mut gx = vec![F::zero(); g.len()];
                    for (i, ((gr, hr), dst)) in
                        g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate()
                    {
                        let mut mean_dh = F::zero();
                        let mut mean_dhh = F::zero();
                        for j in 0..d {
                            let dh = gr[j] * gn[j];
                            mean_dh += dh;
                            mean_dhh += dh * hr[j];
                        }
                        mean_dh /= dn;
                        mean_dhh /= dn;
                        for j in 0..d {
                            let dh = gr[j] * gn[j];
                            dst[j] = inv_std[i] * (dh - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                    if let Some(f) = self.fault_factor(OpKind::LayerNorm) {
                        gx.iter_mut().for_each(|v| *v *= f);
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Gelu(x) => {
                let inv_sqrt2 = F::lit(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt2pi = F::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = F::lit(0.5);
                let mut gx: Vec<F> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &v)| {
                        let cdf = half * (F::one() + (v * inv_sqrt2).erf());
                        let pdf = (-half * v * v).exp() * inv_sqrt2pi;
                        gv * (cdf + v * pdf)
                    })
                    .collect();
                if let Some(f) = self.fault_factor(OpKind::Gelu) {
                    gx.iter_mut().for_each(|v| *v *= f);
                }
                accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * (F::one() - y * y))
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Gather { table, ids } => {
                let t = val(*table);
                let d = t.cols();
                let mut gt = vec![F::zero(); t.numel()];
                for (gr, &id) in g.chunks(d).zip(ids) {
                    for (o, &v) in gt[id * d..(id + 1) * d].iter_mut().zip(gr) {
                        *o += v;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if rg(p) {
                        accumulate(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if rg(p) {
                        let gp = g
                            .chunks(total)
                            .flat_map(|row| row[start..start + w].iter().copied())
                            .collect();
                        accumulate(grads, p, gp);
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let w = node.value.cols();
                let mut gx = vec![F::zero(); val(*x).numel()];
                for (dst, gr) in gx.chunks_mut(c).zip(g.chunks(w)) {
                    dst[*start..*start + w].copy_from_slice(gr);
                }
                accumulate(grads, *x, gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = val(*logits).cols();
                let scale = g[0] / F::lit(targets.len() as f64);
                let mut gl: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * c + t] -= scale;
                }
                accumulate(grads, *logits, gl);
            }
            Op::Sum(x) => {
                accumulate(grads, *x, vec![g[0]; val(*x).numel()]);
            }
        }
        Ok(())
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, contribution: Vec<F>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::AttentionMask;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let ps = ParamSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let i2 = g.input(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = g.input(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out), g.value(m));
    }

    #[test]
    fn matmul_row_by_column() {
        let ps = ParamSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let a = g.input(Tensor::from_rows(&[&[1.0, 2.0]]));
        let b = g.input(Tensor::from_rows(&[&[3.0], &[4.0]]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 1]);
        assert_eq!(g.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let ps = ParamSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_single_visible() {
        let ps = ParamSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::from_rows(&[&[0.0, 0.0, 0.0]]));
        let y = g.masked_softmax(x, &AttentionMask::from_fn(1, 3, |_, _| true).unwrap()).unwrap();
        for &p in g.value(y).data() {
            assert!(close(p, 1.0 / 3.0, 1e-15));
        }
        let x = g.input(Tensor::from_rows(&[&[5.0, 1.0]]));
        let y = g.masked_softmax(x, &AttentionMask::from_fn(1, 2, |_, j| j == 0).unwrap()).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_partial_mask_matches_scalar_oracle() {
        let ps = ParamSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]));
        let y = g.masked_softmax(x, &AttentionMask::from_fn(1, 3, |_, j| j < 2).unwrap()).unwrap();
        let z = 1f64.exp() + 2f64.exp();
        let expect = [1f64.exp() / z, 2f64.exp() / z, 0.0];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!(close(*a, b, 1e-15));
        }
        assert_eq!(g.value(y).data()[2], 0.0);
    }

    #[test]
    fn softmax_rejects_mismatched_mask() {
        let ps = ParamSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::zeros(&[2, 2]));
        let wrong = AttentionMask::from_fn(1, 2, |_, _| true).unwrap();
        assert!(matches!(g.masked_softmax(x, &wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let mut ps = ParamSet::<f64>::new();
        let gain = ps.add_constant("g", &[4], 1.0).unwrap();
        let bias = ps.add_constant("b", &[4], 0.0).unwrap();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::from_rows(&[&[5.0, 5.0, 5.0, 5.0]]));
        let (gv, bv) = (g.param(gain), g.param(bias));
        let y = g.layer_norm(x, gv, bv, 1e-12).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_normalized_row_is_fixed_point() {
        let mut ps = ParamSet::<f64>::new();
        let gain = ps.add_constant("g", &[2], 1.0).unwrap();
        let bias = ps.add_constant("b", &[2], 0.0).unwrap();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::from_rows(&[&[1.0, -1.0]]));
        let (gv, bv) = (g.param(gain), g.param(bias));
        let y = g.layer_norm(x, gv, bv, 1e-12).unwrap();
        for (a, b) in g.value(y).data().iter().zip([1.0, -1.0]) {
            assert!(close(*a, b, 1e-10));
        }
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let mut ps = ParamSet::<f64>::new();
        let gain = ps.add_constant("g", &[2], 1.0).unwrap();
        let bias = ps.add_constant("b", &[2], 0.0).unwrap();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::zeros(&[1, 2]));
        let (gv, bv) = (g.param(gain), g.param(bias));
        assert!(g.layer_norm(x, gv, bv, 0.0).is_err());
    }

    #[test]
    fn quadratic_gradient() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        let mut g = Graph::new(&ps);
        let wv = g.param(w);
        let sq = g.mul(wv, wv).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_leaves_grads_zero() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add_constant("w", &[3], 1.0).unwrap();
        let grads = {
            let mut g = Graph::new(&ps);
            let c = g.input(Tensor::scalar(4.0));
            g.backward(c).unwrap()
        };
        grads.accumulate_into(&mut ps);
        assert_eq!(ps.get(w).grad().data(), &[0.0; 3]);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        for _ in 0..2 {
            let grads = {
                let mut g = Graph::new(&ps);
                let wv = g.param(w);
                let loss = g.sum(wv);
                g.backward(loss).unwrap()
            };
            grads.accumulate_into(&mut ps);
        }
        assert_eq!(ps.get(w).grad().data(), &[2.0, 2.0]);
        ps.zero_grad();
        assert_eq!(ps.get(w).grad().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add_constant("w", &[2], 1.0).unwrap();
        let mut g = Graph::new(&ps);
        let wv = g.param(w);
        assert!(matches!(g.backward(wv), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_has_unit_gradient() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add_constant("w", &[4], 0.3).unwrap();
        let mut g = Graph::new(&ps);
        let wv = g.param(w);
        let loss = g.sum(wv);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn frozen_parameter_gets_no_gradient() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add_constant("w", &[2], 1.0).unwrap();
        ps.get_mut(w).trainable = false;
        let mut g = Graph::new(&ps);
        let wv = g.param(w);
        let loss = g.sum(wv);
        assert!(g.backward(loss).unwrap().get(w).is_none());
    }

    #[test]
    fn embedding_out_of_range_names_index() {
        let mut ps = ParamSet::<f32>::new();
        let t = ps.add_constant("tok", &[5, 2], 0.0).unwrap();
        let mut g = Graph::new(&ps);
        let tv = g.param(t);
        let err = g.embedding(tv, &[1, 7, 2], "token").unwrap_err();
        assert!(matches!(err, Error::IdOutOfRange { index: 1, id: 7, size: 5, .. }));
    }

    #[test]
    fn uniform_cross_entropy_is_log_classes() {
        let ps = ParamSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::zeros(&[3, 4]));
        let l = g.cross_entropy(x, &[0, 1, 3]).unwrap();
        assert!(close(g.value(l).item(), 4f64.ln(), 1e-12));
    }
}
