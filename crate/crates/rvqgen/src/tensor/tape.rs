//! Reverse-mode automatic differentiation on a Wengert list.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] replays it once in
//! reverse and accumulates gradients additively, after which the tape is
//! consumed. Parameters are re-bound as leaves on a fresh tape every step.

use super::kernels;
use super::{Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a[m,k] * b[k,n]`
    Matmul { a: Var, b: Var },
    /// `a[m,k] * b[n,k]^T`
    MatmulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// `a + c * b`
    AddScaled { a: Var, b: Var, c: f64 },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    /// `a * s` with `s` a `[1,1]` node, broadcast over `a`.
    ScaleByVar { a: Var, s: Var },
    /// `a` plus a fixed row vector broadcast over rows; the constant needs no
    /// gradient, so it is not retained.
    AddRowConst { a: Var },
    Silu { a: Var },
    /// Sum of all entries, `[1,1]`.
    Sum { a: Var },
    /// Mean of rows `start..start+len`, `[1,cols]`.
    MeanRows { a: Var, start: usize, len: usize },
    /// Row lookup with repetition, `[rows.len(), cols]`.
    RowGather { a: Var, rows: Vec<usize> },
    RowConcat { parts: Vec<Var> },
    ColSlice { a: Var, start: usize, len: usize },
    ColConcat { parts: Vec<Var> },
    RmsNorm { x: Var, gain: Var, eps: f64 },
    Rope { x: Var, positions: Vec<usize>, base: f64 },
    /// Row-wise softmax of `x / temp`. The node value holds the probabilities;
    /// masked entries are exactly zero there, which is all backward needs.
    Softmax { x: Var, temp: f64 },
    /// `weight * sum over masked rows of -ln softmax(logits)[target]`, `[1,1]`.
    MaskedCe {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        weight: f64,
    },
}

#[derive(Debug)]
struct Node<E> {
    value: Tensor<E>,
    grad: Option<Tensor<E>>,
    needs: bool,
    op: Op,
}

/// Single-use reverse-mode tape.
#[derive(Debug)]
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    consumed: bool,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Binds a differentiable leaf (a parameter view).
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Binds a non-differentiable input.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node, available after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<E>, needs: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        self.nodes[v.0].value.dims2().map_err(|_| TensorError::NotMatrix {
            op,
            shape: self.nodes[v.0].value.shape().to_vec(),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            out.data_mut(),
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::Matmul { a, b }))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            0.0,
            out.data_mut(),
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::MatmulNt { a, b }))
    }

    fn elementwise_pair(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| E::from_f64(f(x.to_f64(), y.to_f64())))
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise_pair(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    /// `a + c * b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Result<Var, TensorError> {
        self.elementwise_pair(a, b, "add_scaled", |x, y| x + c * y, Op::AddScaled { a, b, c })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise_pair(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .map(|x| E::from_f64(x.to_f64() * c))
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(out, needs, Op::Scale { a, c })
    }

    /// Broadcast product with a `[1,1]` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let sv = self.value(s).data()[0].to_f64();
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .map(|x| E::from_f64(x.to_f64() * sv))
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(out, needs, Op::ScaleByVar { a, s }))
    }

    /// Adds a fixed row vector to every row; the row takes no gradient.
    pub fn add_row_const(&mut self, a: Var, row: &[E]) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(a, "add_row_const")?;
        if row.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_const",
                lhs: vec![r, c],
                rhs: vec![row.len()],
            });
        }
        let mut data = self.value(a).data().to_vec();
        for rr in 0..r {
            for cc in 0..c {
                data[rr * c + cc] =
                    E::from_f64(data[rr * c + cc].to_f64() + row[cc].to_f64());
            }
        }
        let out = Tensor::from_vec(&[r, c], data).expect("same shape");
        let needs = self.needs(a);
        Ok(self.push(out, needs, Op::AddRowConst { a }))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut out = Tensor::zeros(self.value(a).shape());
        kernels::silu_slice(self.value(a).data(), out.data_mut());
        let needs = self.needs(a);
        self.push(out, needs, Op::Silu { a })
    }

    /// Sum of all entries as a `[1,1]` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().map(|x| x.to_f64()).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(E::from_f64(total)), needs, Op::Sum { a })
    }

    /// Mean of rows `start..start+len` as a `[1, cols]` node.
    pub fn mean_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(a, "mean_rows")?;
        if len == 0 || start + len > r {
            return Err(TensorError::RangeOutOfBounds {
                op: "mean_rows",
                start,
                end: start + len,
                extent: r,
            });
        }
        let mut acc = vec![0.0f64; c];
        for rr in start..start + len {
            for cc in 0..c {
                acc[cc] += self.value(a).at2(rr, cc).to_f64();
            }
        }
        let data: Vec<E> = acc.iter().map(|x| E::from_f64(x / len as f64)).collect();
        let out = Tensor::from_vec(&[1, c], data).expect("len matches");
        let needs = self.needs(a);
        Ok(self.push(out, needs, Op::MeanRows { a, start, len }))
    }

    /// Row lookup: output row `i` is input row `rows[i]`. Rows may repeat.
    pub fn row_gather(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(a, "row_gather")?;
        if let Some(&bad) = rows.iter().find(|&&x| x >= r) {
            return Err(TensorError::RangeOutOfBounds {
                op: "row_gather",
                start: bad,
                end: bad + 1,
                extent: r,
            });
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &rr in rows {
            data.extend_from_slice(&self.value(a).data()[rr * c..(rr + 1) * c]);
        }
        let out = Tensor::from_vec(&[rows.len(), c], data).expect("len matches");
        let needs = self.needs(a);
        Ok(self.push(
            out,
            needs,
            Op::RowGather {
                a,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Vertical concatenation; all parts must share a column count.
    pub fn row_concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "row_concat of zero parts");
        let (_, c) = self.dims2(parts[0], "row_concat")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims2(p, "row_concat")?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "row_concat",
                    lhs: vec![rows, c],
                    rhs: vec![pr, pc],
                });
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(&[rows, c], data).expect("len matches");
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            needs,
            Op::RowConcat {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(a, "col_slice")?;
        if len == 0 || start + len > c {
            return Err(TensorError::RangeOutOfBounds {
                op: "col_slice",
                start,
                end: start + len,
                extent: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for rr in 0..r {
            data.extend_from_slice(&self.value(a).data()[rr * c + start..rr * c + start + len]);
        }
        let out = Tensor::from_vec(&[r, len], data).expect("len matches");
        let needs = self.needs(a);
        Ok(self.push(out, needs, Op::ColSlice { a, start, len }))
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn col_concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "col_concat of zero parts");
        let (r, _) = self.dims2(parts[0], "col_concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "col_concat")?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "col_concat",
                    lhs: vec![r, total],
                    rhs: vec![pr, pc],
                });
            }
            widths.push(pc);
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for rr in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[rr * w..(rr + 1) * w]);
            }
        }
        let out = Tensor::from_vec(&[r, total], data).expect("len matches");
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            needs,
            Op::ColConcat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Row-wise RMS normalization with a `[1, cols]` gain node.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x, "rms_norm")?;
        let (gr, gc) = self.dims2(gain, "rms_norm")?;
        if gr != 1 || gc != c {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                lhs: vec![r, c],
                rhs: vec![gr, gc],
            });
        }
        let mut out = Tensor::zeros(&[r, c]);
        kernels::rms_norm_rows(
            self.value(x).data(),
            r,
            c,
            self.value(gain).data(),
            eps,
            out.data_mut(),
        );
        let needs = self.needs(x) || self.needs(gain);
        Ok(self.push(out, needs, Op::RmsNorm { x, gain, eps }))
    }

    /// Rotary position encoding; row `r` rotates by `positions[r]`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x, "rope")?;
        if positions.len() != r || c % 2 != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "rope",
                lhs: vec![r, c],
                rhs: vec![positions.len()],
            });
        }
        let mut out = Tensor::zeros(&[r, c]);
        kernels::rope_rows(
            self.value(x).data(),
            r,
            c,
            positions,
            base,
            false,
            out.data_mut(),
        );
        let needs = self.needs(x);
        Ok(self.push(
            out,
            needs,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                base,
            },
        ))
    }

    /// Row-wise softmax of `x / temp`. Rejects non-finite inputs.
    pub fn softmax_rows(&mut self, x: Var, temp: f64) -> Result<Var, TensorError> {
        if let Some(idx) = self
            .value(x)
            .data()
            .iter()
            .position(|v| !v.is_finite())
        {
            return Err(TensorError::NonFinite {
                op: "softmax_rows",
                index: idx,
            });
        }
        self.softmax_inner(x, temp, None, None)
    }

    /// Attention softmax of `x / temp` with a causal row limit and a key
    /// visibility mask. Skips the finite check: attention scores are products
    /// of finite activations.
    pub fn attn_softmax(
        &mut self,
        x: Var,
        temp: f64,
        row_limit: Option<Vec<usize>>,
        key_visible: Option<Vec<bool>>,
    ) -> Result<Var, TensorError> {
        self.softmax_inner(x, temp, row_limit, key_visible)
    }

    fn softmax_inner(
        &mut self,
        x: Var,
        temp: f64,
        row_limit: Option<Vec<usize>>,
        key_visible: Option<Vec<bool>>,
    ) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x, "softmax_rows")?;
        if let Some(l) = &row_limit {
            if l.len() != r {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows",
                    lhs: vec![r, c],
                    rhs: vec![l.len()],
                });
            }
        }
        if let Some(v) = &key_visible {
            if v.len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows",
                    lhs: vec![r, c],
                    rhs: vec![v.len()],
                });
            }
        }
        let mut out = Tensor::zeros(&[r, c]);
        kernels::softmax_rows_masked(
            self.value(x).data(),
            r,
            c,
            temp,
            row_limit.as_deref(),
            key_visible.as_deref(),
            out.data_mut(),
        );
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::Softmax { x, temp }))
    }

    /// `weight * sum over rows with mask set of -ln softmax(logits)[target]`.
    ///
    /// Rows with the mask cleared contribute nothing, to the value and to the
    /// gradient alike.
    pub fn masked_ce(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        weight: f64,
    ) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(logits, "masked_ce")?;
        if targets.len() != r || mask.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "masked_ce",
                lhs: vec![r, c],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let mut loss = 0.0f64;
        for rr in 0..r {
            if !mask[rr] {
                continue;
            }
            assert!(targets[rr] < c, "masked_ce: target {} >= vocab {c}", targets[rr]);
            let row = &self.value(logits).data()[rr * c..(rr + 1) * c];
            loss -= log_softmax_at(row, targets[rr]);
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(E::from_f64(weight * loss)),
            needs,
            Op::MaskedCe {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                weight,
            },
        ))
    }

    fn take_grad_buf(&mut self, v: Var) -> Tensor<E> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        self.nodes[v.0]
            .grad
            .take()
            .unwrap_or_else(|| Tensor::zeros(&shape))
    }

    fn put_grad_buf(&mut self, v: Var, buf: Tensor<E>) {
        self.nodes[v.0].grad = Some(buf);
    }

    /// Adds `scale * delta` into the gradient of `v` if it needs one.
    fn accumulate(&mut self, v: Var, delta: &[E], scale: f64) {
        if !self.needs(v) {
            return;
        }
        let mut buf = self.take_grad_buf(v);
        for (g, d) in buf.data_mut().iter_mut().zip(delta) {
            *g = E::from_f64(g.to_f64() + scale * d.to_f64());
        }
        self.put_grad_buf(v, buf);
    }

    /// Runs reverse accumulation from a scalar loss. Consumes the tape:
    /// a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::ConsumedTape);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(E::ONE));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs || self.nodes[idx].grad.is_none() {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let g = self.nodes[idx].grad.take().expect("checked above");
            self.backprop_node(Var(idx), &op, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, node: Var, op: &Op, g: &Tensor<E>) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.value(*a).dims2().expect("checked at build");
                let n = self.value(*b).shape()[1];
                if self.needs(*a) {
                    let mut buf = self.take_grad_buf(*a);
                    kernels::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        self.value(*b).data(),
                        true,
                        1.0,
                        buf.data_mut(),
                    );
                    self.put_grad_buf(*a, buf);
                }
                if self.needs(*b) {
                    let mut buf = self.take_grad_buf(*b);
                    kernels::gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        true,
                        g.data(),
                        false,
                        1.0,
                        buf.data_mut(),
                    );
                    self.put_grad_buf(*b, buf);
                }
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = self.value(*a).dims2().expect("checked at build");
                let n = self.value(*b).shape()[0];
                if self.needs(*a) {
                    let mut buf = self.take_grad_buf(*a);
                    kernels::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        self.value(*b).data(),
                        false,
                        1.0,
                        buf.data_mut(),
                    );
                    self.put_grad_buf(*a, buf);
                }
                if self.needs(*b) {
                    let mut buf = self.take_grad_buf(*b);
                    kernels::gemm(
                        n,
                        m,
                        k,
                        g.data(),
                        true,
                        self.value(*a).data(),
                        false,
                        1.0,
                        buf.data_mut(),
                    );
                    self.put_grad_buf(*b, buf);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g.data(), 1.0);
                self.accumulate(*b, g.data(), 1.0);
            }
            Op::AddScaled { a, b, c } => {
                self.accumulate(*a, g.data(), 1.0);
                self.accumulate(*b, g.data(), *c);
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let delta: Vec<E> = g
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(gg, bb)| E::from_f64(gg.to_f64() * bb.to_f64()))
                        .collect();
                    self.accumulate(*a, &delta, 1.0);
                }
                if self.needs(*b) {
                    let delta: Vec<E> = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gg, aa)| E::from_f64(gg.to_f64() * aa.to_f64()))
                        .collect();
                    self.accumulate(*b, &delta, 1.0);
                }
            }
            Op::Scale { a, c } => self.accumulate(*a, g.data(), *c),
            Op::ScaleByVar { a, s } => {
                let sv = self.value(*s).data()[0].to_f64();
                self.accumulate(*a, g.data(), sv);
                if self.needs(*s) {
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gg, aa)| gg.to_f64() * aa.to_f64())
                        .sum();
                    self.accumulate(*s, &[E::from_f64(dot)], 1.0);
                }
            }
            Op::AddRowConst { a } => self.accumulate(*a, g.data(), 1.0),
            Op::Silu { a } => {
                let delta: Vec<E> = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gg, xx)| {
                        let x = xx.to_f64();
                        let sig = 1.0 / (1.0 + (-x).exp());
                        E::from_f64(gg.to_f64() * sig * (1.0 + x * (1.0 - sig)))
                    })
                    .collect();
                self.accumulate(*a, &delta, 1.0);
            }
            Op::Sum { a } => {
                if self.needs(*a) {
                    let gv = g.data()[0].to_f64();
                    let delta = vec![E::from_f64(gv); self.value(*a).numel()];
                    self.accumulate(*a, &delta, 1.0);
                }
            }
            Op::MeanRows { a, start, len } => {
                if self.needs(*a) {
                    let (r, c) = self.value(*a).dims2().expect("checked at build");
                    let mut delta = vec![E::ZERO; r * c];
                    let inv = 1.0 / *len as f64;
                    for rr in *start..*start + *len {
                        for cc in 0..c {
                            delta[rr * c + cc] = E::from_f64(g.data()[cc].to_f64() * inv);
                        }
                    }
                    self.accumulate(*a, &delta, 1.0);
                }
            }
            Op::RowGather { a, rows } => {
                if self.needs(*a) {
                    let (r, c) = self.value(*a).dims2().expect("checked at build");
                    let mut delta = vec![E::ZERO; r * c];
                    for (i, &rr) in rows.iter().enumerate() {
                        for cc in 0..c {
                            let slot = &mut delta[rr * c + cc];
                            *slot = E::from_f64(slot.to_f64() + g.data()[i * c + cc].to_f64());
                        }
                    }
                    self.accumulate(*a, &delta, 1.0);
                }
            }
            Op::RowConcat { parts } => {
                let mut row0 = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).dims2().expect("checked at build");
                    if self.needs(p) {
                        let block = &g.data()[row0 * pc..(row0 + pr) * pc];
                        self.accumulate(p, block, 1.0);
                    }
                    row0 += pr;
                }
            }
            Op::ColSlice { a, start, len } => {
                if self.needs(*a) {
                    let (r, c) = self.value(*a).dims2().expect("checked at build");
                    let mut delta = vec![E::ZERO; r * c];
                    for rr in 0..r {
                        for cc in 0..*len {
                            delta[rr * c + start + cc] = g.data()[rr * len + cc];
                        }
                    }
                    self.accumulate(*a, &delta, 1.0);
                }
            }
            Op::ColConcat { parts } => {
                let rows = self.value(node).shape()[0];
                let total = self.value(node).shape()[1];
                let mut col0 = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.needs(p) {
                        let mut delta = vec![E::ZERO; rows * pc];
                        for rr in 0..rows {
                            for cc in 0..pc {
                                delta[rr * pc + cc] = g.data()[rr * total + col0 + cc];
                            }
                        }
                        self.accumulate(p, &delta, 1.0);
                    }
                    col0 += pc;
                }
            }
            Op::RmsNorm { x, gain, eps } => {
                let (r, c) = self.value(*x).dims2().expect("checked at build");
                let nf = c as f64;
                let mut dx = vec![E::ZERO; r * c];
                let mut dg = vec![0.0f64; c];
                for rr in 0..r {
                    let xrow = &self.value(*x).data()[rr * c..(rr + 1) * c];
                    let grow = &g.data()[rr * c..(rr + 1) * c];
                    let mut ms = 0.0f64;
                    for v in xrow {
                        ms += v.to_f64() * v.to_f64();
                    }
                    let inv = 1.0 / (ms / nf + eps).sqrt();
                    let mut proj = 0.0f64;
                    for cc in 0..c {
                        let u = grow[cc].to_f64() * self.value(*gain).data()[cc].to_f64();
                        proj += u * xrow[cc].to_f64();
                        dg[cc] += grow[cc].to_f64() * xrow[cc].to_f64() * inv;
                    }
                    for cc in 0..c {
                        let u = grow[cc].to_f64() * self.value(*gain).data()[cc].to_f64();
                        let xv = xrow[cc].to_f64();
                        dx[rr * c + cc] =
                            E::from_f64(inv * u - xv * inv * inv * inv * proj / nf);
                    }
                }
                self.accumulate(*x, &dx, 1.0);
                if self.needs(*gain) {
                    let dgv: Vec<E> = dg.iter().map(|v| E::from_f64(*v)).collect();
                    self.accumulate(*gain, &dgv, 1.0);
                }
            }
            Op::Rope { x, positions, base } => {
                if self.needs(*x) {
                    let (r, c) = self.value(*x).dims2().expect("checked at build");
                    let mut delta = vec![E::ZERO; r * c];
                    kernels::rope_rows(g.data(), r, c, positions, *base, true, &mut delta);
                    self.accumulate(*x, &delta, 1.0);
                }
            }
            Op::Softmax { x, temp } => {
                if self.needs(*x) {
                    let (r, c) = self.value(node).dims2().expect("checked at build");
                    let probs = self.value(node).data();
                    let mut delta = vec![E::ZERO; r * c];
                    for rr in 0..r {
                        let prow = &probs[rr * c..(rr + 1) * c];
                        let grow = &g.data()[rr * c..(rr + 1) * c];
                        let dot: f64 = prow
                            .iter()
                            .zip(grow)
                            .map(|(p, gg)| p.to_f64() * gg.to_f64())
                            .sum();
                        for cc in 0..c {
                            delta[rr * c + cc] = E::from_f64(
                                prow[cc].to_f64() * (grow[cc].to_f64() - dot) / temp,
                            );
                        }
                    }
                    self.accumulate(*x, &delta, 1.0);
                }
            }
            Op::MaskedCe {
                logits,
                targets,
                mask,
                weight,
            } => {
                if self.needs(*logits) {
                    let (r, c) = self.value(*logits).dims2().expect("checked at build");
                    let gv = g.data()[0].to_f64() * weight;
                    let mut delta = vec![E::ZERO; r * c];
                    for rr in 0..r {
                        if !mask[rr] {
                            continue;
                        }
                        let row = &self.value(*logits).data()[rr * c..(rr + 1) * c];
                        let probs = softmax_f64(row);
                        for cc in 0..c {
                            let ind = if cc == targets[rr] { 1.0 } else { 0.0 };
                            delta[rr * c + cc] = E::from_f64(gv * (probs[cc] - ind));
                        }
                    }
                    self.accumulate(*logits, &delta, 1.0);
                }
            }
        }
    }
}

/// `ln softmax(row)[target]` in f64.
fn log_softmax_at<E: Scalar>(row: &[E], target: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
    let mut sum = 0.0f64;
    for v in row {
        sum += (v.to_f64() - max).exp();
    }
    row[target].to_f64() - max - sum.ln()
}

fn softmax_f64<E: Scalar>(row: &[E]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
    let mut out: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}
