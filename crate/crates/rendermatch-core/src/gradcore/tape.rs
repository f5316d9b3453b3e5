//! Operation tape: records one forward pass, replays adjoints in reverse.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels as k;
use super::{GradError, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(pub(crate) u32);

impl VarId {
    fn ix(self) -> usize {
        self.0 as usize
    }
}

/// Non-finite detection policy. `Strict` scans every op output (the
/// default; faults surface at the op that produced them), `LossOnly`
/// checks only scalars handed to `backward`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FiniteCheck {
    #[default]
    Strict,
    LossOnly,
}

/// An operation with a hand-derived adjoint, recorded via [`Tape::custom`].
///
/// `backward` returns one optional gradient buffer per input (None for
/// inputs the op treats as constants). Anything needed by the adjoint is
/// recomputed from `inputs`/`output`; nothing is stashed at forward time.
pub trait CustomOp<E: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>, GradError>;
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad_out: &[E],
    ) -> Vec<Option<Vec<E>>>;
}

enum Op<E: Real> {
    Leaf { needs_grad: bool },
    Add,
    Mul,
    Div,
    Scale(E),
    Relu,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    Reshape,
    Dense,
    Conv2d { stride: usize, pad: usize },
    ConvT2d { stride: usize, pad: usize },
    Resize,
    LstmCell { gates: Vec<E> },
    GruCell { saved: Vec<E> },
    L1Mean,
    L2Norm,
    ReduceMean,
    Custom(Box<dyn CustomOp<E>>),
}

struct Node<E: Real> {
    value: Tensor<E>,
    inputs: Vec<VarId>,
    op: Op<E>,
}

/// Records one forward pass. Single-writer; independent passes use
/// independent tapes and may run on different threads.
pub struct Tape<E: Real> {
    nodes: Vec<Node<E>>,
    finite: FiniteCheck,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<E: Real> {
    buffers: Vec<Option<Vec<E>>>,
}

impl<E: Real> Gradients<E> {
    /// Gradient buffer for `id`, if anything flowed into it.
    pub fn get(&self, id: VarId) -> Option<&[E]> {
        self.buffers
            .get(id.ix())
            .and_then(|b| b.as_deref())
    }

    /// Dense gradient for `id`; zeros when the node is unused by the loss.
    pub fn tensor(&self, tape: &Tape<E>, id: VarId) -> Tensor<E> {
        let shape = tape.value(id).shape();
        match self.get(id) {
            Some(buf) => Tensor::new(shape, buf.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn acc_into<E: Real>(slot: &mut Option<Vec<E>>, contrib: &[E]) {
    match slot {
        Some(buf) => {
            for (b, c) in buf.iter_mut().zip(contrib) {
                *b += *c;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

/// (outer, axis_len, inner) decomposition of `shape` around `axis`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<E: Real> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            finite: FiniteCheck::Strict,
        }
    }

    pub fn with_finite_check(finite: FiniteCheck) -> Self {
        Tape {
            nodes: Vec::new(),
            finite,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<E> {
        &self.nodes[id.ix()].value
    }

    fn push(
        &mut self,
        op: Op<E>,
        opname: &'static str,
        inputs: Vec<VarId>,
        value: Tensor<E>,
    ) -> Result<VarId, GradError> {
        if matches!(self.finite, FiniteCheck::Strict) && !value.all_finite() {
            return Err(GradError::NonFinite { op: opname });
        }
        let id = VarId(self.nodes.len() as u32);
        self.nodes.push(Node { value, inputs, op });
        Ok(id)
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Register an input/parameter tensor. Gradients are only tracked for
    /// leaves with `needs_grad`.
    pub fn leaf(&mut self, t: Tensor<E>, needs_grad: bool) -> Result<VarId, GradError> {
        self.push(Op::Leaf { needs_grad }, "leaf", vec![], t)
    }

    pub fn constant(&mut self, t: Tensor<E>) -> Result<VarId, GradError> {
        self.leaf(t, false)
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn zip_shapes(
        &self,
        op: &'static str,
        a: VarId,
        b: VarId,
    ) -> Result<(), GradError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb || self.value(b).is_scalar() {
            Ok(())
        } else {
            Err(GradError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn zip(
        &mut self,
        op: Op<E>,
        opname: &'static str,
        a: VarId,
        b: VarId,
        f: impl Fn(E, E) -> E,
    ) -> Result<VarId, GradError> {
        self.zip_shapes(opname, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if tb.is_scalar() {
            let s = tb.scalar_value();
            Tensor::new(
                ta.shape(),
                ta.data().iter().map(|&x| f(x, s)).collect(),
            )?
        } else {
            Tensor::new(
                ta.shape(),
                ta.data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            )?
        };
        self.push(op, opname, vec![a, b], out)
    }

    /// Elementwise sum; `b` may be a scalar broadcast over `a`.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, GradError> {
        self.zip(Op::Add, "add", a, b, |x, y| x + y)
    }

    /// Elementwise product; `b` may be a scalar broadcast over `a`.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, GradError> {
        self.zip(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    /// Elementwise quotient; `b` may be a scalar broadcast over `a`.
    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId, GradError> {
        self.zip(Op::Div, "div", a, b, |x, y| x / y)
    }

    /// Multiply by a compile-time constant (no constant node needed).
    pub fn scale(&mut self, a: VarId, c: E) -> Result<VarId, GradError> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * c).collect())?;
        self.push(Op::Scale(c), "scale", vec![a], out)
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId, GradError> {
        let ta = self.value(a);
        let out = Tensor::new(
            ta.shape(),
            ta.data().iter().map(|&x| x.max(E::zero())).collect(),
        )?;
        self.push(Op::Relu, "relu", vec![a], out)
    }

    // ── Shape plumbing ──────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId, GradError> {
        if parts.is_empty() {
            return Err(GradError::Invalid {
                op: "concat",
                reason: "no inputs",
            });
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(GradError::Invalid {
                op: "concat",
                reason: "axis out of range",
            });
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(GradError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = around(&shape, axis);
        let mut data = vec![E::zero(); outer * axis_total * inner];
        for o in 0..outer {
            let mut at = 0;
            for &p in parts {
                let t = self.value(p);
                let alen = t.shape()[axis];
                let src = &t.data()[o * alen * inner..(o + 1) * alen * inner];
                let dst_start = (o * axis_total + at) * inner;
                data[dst_start..dst_start + alen * inner].copy_from_slice(src);
                at += alen;
            }
        }
        let out = Tensor::new(&shape, data)?;
        self.push(Op::Concat { axis }, "concat", parts.to_vec(), out)
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(
        &mut self,
        a: VarId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<VarId, GradError> {
        let s = self.value(a).shape().to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(GradError::Invalid {
                op: "narrow",
                reason: "window out of range",
            });
        }
        let (outer, alen, inner) = around(&s, axis);
        let src = self.value(a).data();
        let mut shape = s.clone();
        shape[axis] = len;
        let mut data = vec![E::zero(); outer * len * inner];
        for o in 0..outer {
            let from = (o * alen + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[from..from + len * inner]);
        }
        let out = Tensor::new(&shape, data)?;
        self.push(Op::Narrow { axis, start }, "narrow", vec![a], out)
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId, GradError> {
        let out = self.value(a).reshaped(shape)?;
        self.push(Op::Reshape, "reshape", vec![a], out)
    }

    // ── Layers ──────────────────────────────────────────────────────

    /// `y = W x + b` with `x: [n]`, `W: [m, n]`, `b: [m]`.
    pub fn dense(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId, GradError> {
        let (sx, sw, sb) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if sx.len() != 1 || sw.len() != 2 || sb.len() != 1 || sw[1] != sx[0] || sw[0] != sb[0] {
            return Err(GradError::ShapeMismatch {
                op: "dense",
                lhs: sw,
                rhs: sx,
            });
        }
        let mut out = vec![E::zero(); sw[0]];
        k::dense_fwd(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &mut out,
        );
        let t = Tensor::new(&[sw[0]], out)?;
        self.push(Op::Dense, "dense", vec![x, w, b], t)
    }

    /// 2-D convolution, `x: [C,H,W]`, `w: [O,C,kh,kw]`, `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
    ) -> Result<VarId, GradError> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let ok = sx.len() == 3 && sw.len() == 4 && sb.len() == 1 && sw[1] == sx[0] && sw[0] == sb[0];
        let oh = k::conv_out(sx.get(1).copied().unwrap_or(0), sw.get(2).copied().unwrap_or(1), stride, pad);
        let ow = k::conv_out(sx.get(2).copied().unwrap_or(0), sw.get(3).copied().unwrap_or(1), stride, pad);
        let (oh, ow) = match (ok, oh, ow) {
            (true, Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(GradError::ShapeMismatch {
                    op: "conv2d",
                    lhs: sx,
                    rhs: sw,
                })
            }
        };
        let mut out = vec![E::zero(); sw[0] * oh * ow];
        k::conv2d_fwd(
            self.value(x).data(),
            (sx[0], sx[1], sx[2]),
            self.value(w).data(),
            (sw[0], sw[2], sw[3]),
            self.value(b).data(),
            stride,
            pad,
            &mut out,
            (oh, ow),
        );
        let t = Tensor::new(&[sw[0], oh, ow], out)?;
        self.push(Op::Conv2d { stride, pad }, "conv2d", vec![x, w, b], t)
    }

    /// Transposed 2-D convolution, `x: [C,H,W]`, `w: [C,O,kh,kw]`, `b: [O]`.
    pub fn conv2d_transpose(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
    ) -> Result<VarId, GradError> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let ok = sx.len() == 3 && sw.len() == 4 && sb.len() == 1 && sw[0] == sx[0] && sw[1] == sb[0];
        let oh = k::convt_out(sx.get(1).copied().unwrap_or(1), sw.get(2).copied().unwrap_or(1), stride, pad);
        let ow = k::convt_out(sx.get(2).copied().unwrap_or(1), sw.get(3).copied().unwrap_or(1), stride, pad);
        let (oh, ow) = match (ok, oh, ow) {
            (true, Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(GradError::ShapeMismatch {
                    op: "conv2d_transpose",
                    lhs: sx,
                    rhs: sw,
                })
            }
        };
        let mut out = vec![E::zero(); sw[1] * oh * ow];
        k::convt2d_fwd(
            self.value(x).data(),
            (sx[0], sx[1], sx[2]),
            self.value(w).data(),
            (sw[1], sw[2], sw[3]),
            self.value(b).data(),
            stride,
            pad,
            &mut out,
            (oh, ow),
        );
        let t = Tensor::new(&[sw[1], oh, ow], out)?;
        self.push(
            Op::ConvT2d { stride, pad },
            "conv2d_transpose",
            vec![x, w, b],
            t,
        )
    }

    /// Bilinear resample of `[C,H,W]` to `[C,oh,ow]` (half-pixel centers,
    /// edges clamped).
    pub fn bilinear_resize(
        &mut self,
        x: VarId,
        oh: usize,
        ow: usize,
    ) -> Result<VarId, GradError> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 3 || oh == 0 || ow == 0 {
            return Err(GradError::ShapeMismatch {
                op: "bilinear_resize",
                lhs: sx,
                rhs: vec![oh, ow],
            });
        }
        let mut out = vec![E::zero(); sx[0] * oh * ow];
        k::resize_fwd(self.value(x).data(), (sx[0], sx[1], sx[2]), &mut out, (oh, ow));
        let t = Tensor::new(&[sx[0], oh, ow], out)?;
        self.push(Op::Resize, "bilinear_resize", vec![x], t)
    }

    /// LSTM cell. Output is `[2, hidden]`: row 0 = h', row 1 = c'.
    pub fn lstm_cell(
        &mut self,
        x: VarId,
        h: VarId,
        c: VarId,
        w_ih: VarId,
        w_hh: VarId,
        b: VarId,
    ) -> Result<VarId, GradError> {
        let (nin, nh) = (self.value(x).len(), self.value(h).len());
        let ok = self.value(x).shape().len() == 1
            && self.value(h).shape().len() == 1
            && self.value(c).shape() == self.value(h).shape()
            && self.value(w_ih).shape() == [4 * nh, nin]
            && self.value(w_hh).shape() == [4 * nh, nh]
            && self.value(b).shape() == [4 * nh];
        if !ok {
            return Err(GradError::ShapeMismatch {
                op: "lstm_cell",
                lhs: self.value(w_ih).shape().to_vec(),
                rhs: vec![nin, nh],
            });
        }
        let mut out = vec![E::zero(); 2 * nh];
        let mut gates = Vec::new();
        k::lstm_fwd(
            self.value(x).data(),
            self.value(h).data(),
            self.value(c).data(),
            self.value(w_ih).data(),
            self.value(w_hh).data(),
            self.value(b).data(),
            &mut out,
            &mut gates,
        );
        let t = Tensor::new(&[2, nh], out)?;
        self.push(
            Op::LstmCell { gates },
            "lstm_cell",
            vec![x, h, c, w_ih, w_hh, b],
            t,
        )
    }

    /// GRU cell. Output is the new hidden state `[hidden]`.
    pub fn gru_cell(
        &mut self,
        x: VarId,
        h: VarId,
        w_ih: VarId,
        w_hh: VarId,
        b_ih: VarId,
        b_hh: VarId,
    ) -> Result<VarId, GradError> {
        let (nin, nh) = (self.value(x).len(), self.value(h).len());
        let ok = self.value(x).shape().len() == 1
            && self.value(h).shape().len() == 1
            && self.value(w_ih).shape() == [3 * nh, nin]
            && self.value(w_hh).shape() == [3 * nh, nh]
            && self.value(b_ih).shape() == [3 * nh]
            && self.value(b_hh).shape() == [3 * nh];
        if !ok {
            return Err(GradError::ShapeMismatch {
                op: "gru_cell",
                lhs: self.value(w_ih).shape().to_vec(),
                rhs: vec![nin, nh],
            });
        }
        let mut out = vec![E::zero(); nh];
        let mut saved = Vec::new();
        k::gru_fwd(
            self.value(x).data(),
            self.value(h).data(),
            self.value(w_ih).data(),
            self.value(w_hh).data(),
            self.value(b_ih).data(),
            self.value(b_hh).data(),
            &mut out,
            &mut saved,
        );
        let t = Tensor::new(&[nh], out)?;
        self.push(
            Op::GruCell { saved },
            "gru_cell",
            vec![x, h, w_ih, w_hh, b_ih, b_hh],
            t,
        )
    }

    // ── Reductions ──────────────────────────────────────────────────

    /// Mean of absolute values, scalar output.
    pub fn l1_mean(&mut self, a: VarId) -> Result<VarId, GradError> {
        let ta = self.value(a);
        let n = E::from_f64(ta.len() as f64);
        let s: E = ta.data().iter().map(|&x| x.abs()).sum();
        let t = Tensor::scalar(s / n);
        self.push(Op::L1Mean, "l1_mean", vec![a], t)
    }

    /// Euclidean norm of all elements, scalar output.
    pub fn l2_norm(&mut self, a: VarId) -> Result<VarId, GradError> {
        let s: E = self.value(a).data().iter().map(|&x| x * x).sum();
        let t = Tensor::scalar(s.sqrt());
        self.push(Op::L2Norm, "l2_norm", vec![a], t)
    }

    /// Mean of all elements, scalar output.
    pub fn reduce_mean(&mut self, a: VarId) -> Result<VarId, GradError> {
        let ta = self.value(a);
        let n = E::from_f64(ta.len() as f64);
        let s: E = ta.data().iter().copied().sum();
        let t = Tensor::scalar(s / n);
        self.push(Op::ReduceMean, "reduce_mean", vec![a], t)
    }

    /// Record an op with a hand-derived adjoint.
    pub fn custom(
        &mut self,
        op: Box<dyn CustomOp<E>>,
        inputs: &[VarId],
    ) -> Result<VarId, GradError> {
        let name = op.name();
        let refs: Vec<&Tensor<E>> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = op.forward(&refs)?;
        if matches!(self.finite, FiniteCheck::Strict) && !out.all_finite() {
            return Err(GradError::NonFinite { op: name });
        }
        let id = VarId(self.nodes.len() as u32);
        self.nodes.push(Node {
            value: out,
            inputs: inputs.to_vec(),
            op: Op::Custom(op),
        });
        Ok(id)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss node. Returns gradients for leaf
    /// nodes; anything the loss never touched reads back as zero.
    pub fn backward(&self, loss: VarId) -> Result<Gradients<E>, GradError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(GradError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        if !lt.scalar_value().is_finite() {
            return Err(GradError::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        grads[loss.ix()] = Some(vec![E::one()]);

        for id in (0..=loss.ix()).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf { .. }) {
                if let Op::Leaf { needs_grad: false } = node.op {
                    grads[id] = None; // constants never report gradients
                }
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.node_backward(node, &g, &mut grads)?;
        }
        if matches!(self.finite, FiniteCheck::Strict) {
            for (i, buf) in grads.iter().enumerate() {
                if let Some(b) = buf {
                    if b.iter().any(|v| !v.is_finite()) {
                        let _ = i;
                        return Err(GradError::NonFinite { op: "backward" });
                    }
                }
            }
        }
        Ok(Gradients { buffers: grads })
    }

    fn node_backward(
        &self,
        node: &Node<E>,
        g: &[E],
        grads: &mut [Option<Vec<E>>],
    ) -> Result<(), GradError> {
        let ins = &node.inputs;
        let val = |i: usize| self.value(ins[i]);
        let mut put = |grads: &mut [Option<Vec<E>>], i: usize, contrib: &[E]| {
            acc_into(&mut grads[ins[i].ix()], contrib);
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add => {
                put(grads, 0, g);
                if val(1).is_scalar() && g.len() > 1 {
                    let s: E = g.iter().copied().sum();
                    put(grads, 1, &[s]);
                } else {
                    put(grads, 1, g);
                }
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                if b.is_scalar() && g.len() > 1 {
                    let s = b.scalar_value();
                    let da: Vec<E> = g.iter().map(|&gi| gi * s).collect();
                    let db: E = g.iter().zip(a.data()).map(|(&gi, &ai)| gi * ai).sum();
                    put(grads, 0, &da);
                    put(grads, 1, &[db]);
                } else {
                    let da: Vec<E> = g.iter().zip(b.data()).map(|(&gi, &bi)| gi * bi).collect();
                    let db: Vec<E> = g.iter().zip(a.data()).map(|(&gi, &ai)| gi * ai).collect();
                    put(grads, 0, &da);
                    put(grads, 1, &db);
                }
            }
            Op::Div => {
                let (a, b) = (val(0), val(1));
                if b.is_scalar() && g.len() > 1 {
                    let s = b.scalar_value();
                    let da: Vec<E> = g.iter().map(|&gi| gi / s).collect();
                    let db: E = g
                        .iter()
                        .zip(a.data())
                        .map(|(&gi, &ai)| -gi * ai / (s * s))
                        .sum();
                    put(grads, 0, &da);
                    put(grads, 1, &[db]);
                } else {
                    let da: Vec<E> = g.iter().zip(b.data()).map(|(&gi, &bi)| gi / bi).collect();
                    let db: Vec<E> = g
                        .iter()
                        .zip(a.data().iter().zip(b.data()))
                        .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                        .collect();
                    put(grads, 0, &da);
                    put(grads, 1, &db);
                }
            }
            Op::Scale(c) => {
                let da: Vec<E> = g.iter().map(|&gi| gi * *c).collect();
                put(grads, 0, &da);
            }
            Op::Relu => {
                let da: Vec<E> = g
                    .iter()
                    .zip(val(0).data())
                    .map(|(&gi, &xi)| if xi > E::zero() { gi } else { E::zero() })
                    .collect();
                put(grads, 0, &da);
            }
            Op::Concat { axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = around(shape, *axis);
                let mut at = 0;
                for i in 0..ins.len() {
                    let alen = val(i).shape()[*axis];
                    let mut contrib = vec![E::zero(); outer * alen * inner];
                    for o in 0..outer {
                        let src = (o * total + at) * inner;
                        contrib[o * alen * inner..(o + 1) * alen * inner]
                            .copy_from_slice(&g[src..src + alen * inner]);
                    }
                    put(grads, i, &contrib);
                    at += alen;
                }
            }
            Op::Narrow { axis, start } => {
                let in_shape = val(0).shape();
                let (outer, alen, inner) = around(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut contrib = vec![E::zero(); val(0).len()];
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    contrib[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                put(grads, 0, &contrib);
            }
            Op::Reshape => put(grads, 0, g),
            Op::Dense => {
                let (x, w) = (val(0), val(1));
                let mut dx = vec![E::zero(); x.len()];
                let mut dw = vec![E::zero(); w.len()];
                let mut db = vec![E::zero(); g.len()];
                k::dense_bwd(x.data(), w.data(), g, &mut dx, &mut dw, &mut db);
                put(grads, 0, &dx);
                put(grads, 1, &dw);
                put(grads, 2, &db);
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (val(0), val(1));
                let (sx, sw, so) = (x.shape(), w.shape(), node.value.shape());
                let mut dx = vec![E::zero(); x.len()];
                let mut dw = vec![E::zero(); w.len()];
                let mut db = vec![E::zero(); sw[0]];
                k::conv2d_bwd(
                    x.data(),
                    (sx[0], sx[1], sx[2]),
                    w.data(),
                    (sw[0], sw[2], sw[3]),
                    *stride,
                    *pad,
                    g,
                    (so[1], so[2]),
                    &mut dx,
                    &mut dw,
                    &mut db,
                );
                put(grads, 0, &dx);
                put(grads, 1, &dw);
                put(grads, 2, &db);
            }
            Op::ConvT2d { stride, pad } => {
                let (x, w) = (val(0), val(1));
                let (sx, sw, so) = (x.shape(), w.shape(), node.value.shape());
                let mut dx = vec![E::zero(); x.len()];
                let mut dw = vec![E::zero(); w.len()];
                let mut db = vec![E::zero(); sw[1]];
                k::convt2d_bwd(
                    x.data(),
                    (sx[0], sx[1], sx[2]),
                    w.data(),
                    (sw[1], sw[2], sw[3]),
                    *stride,
                    *pad,
                    g,
                    (so[1], so[2]),
                    &mut dx,
                    &mut dw,
                    &mut db,
                );
                put(grads, 0, &dx);
                put(grads, 1, &dw);
                put(grads, 2, &db);
            }
            Op::Resize => {
                let sx = val(0).shape();
                let so = node.value.shape();
                let mut dx = vec![E::zero(); val(0).len()];
                k::resize_bwd((sx[0], sx[1], sx[2]), g, (so[1], so[2]), &mut dx);
                put(grads, 0, &dx);
            }
            Op::LstmCell { gates } => {
                let (x, h, c, w_ih, w_hh) = (val(0), val(1), val(2), val(3), val(4));
                let mut dx = vec![E::zero(); x.len()];
                let mut dh = vec![E::zero(); h.len()];
                let mut dc = vec![E::zero(); c.len()];
                let mut dw_ih = vec![E::zero(); w_ih.len()];
                let mut dw_hh = vec![E::zero(); w_hh.len()];
                let mut db = vec![E::zero(); 4 * h.len()];
                k::lstm_bwd(
                    x.data(),
                    h.data(),
                    c.data(),
                    w_ih.data(),
                    w_hh.data(),
                    gates,
                    node.value.data(),
                    g,
                    &mut dx,
                    &mut dh,
                    &mut dc,
                    &mut dw_ih,
                    &mut dw_hh,
                    &mut db,
                );
                put(grads, 0, &dx);
                put(grads, 1, &dh);
                put(grads, 2, &dc);
                put(grads, 3, &dw_ih);
                put(grads, 4, &dw_hh);
                put(grads, 5, &db);
            }
            Op::GruCell { saved } => {
                let (x, h, w_ih, w_hh) = (val(0), val(1), val(2), val(3));
                let mut dx = vec![E::zero(); x.len()];
                let mut dh = vec![E::zero(); h.len()];
                let mut dw_ih = vec![E::zero(); w_ih.len()];
                let mut dw_hh = vec![E::zero(); w_hh.len()];
                let mut db_ih = vec![E::zero(); 3 * h.len()];
                let mut db_hh = vec![E::zero(); 3 * h.len()];
                k::gru_bwd(
                    x.data(),
                    h.data(),
                    w_ih.data(),
                    w_hh.data(),
                    saved,
                    g,
                    &mut dx,
                    &mut dh,
                    &mut dw_ih,
                    &mut dw_hh,
                    &mut db_ih,
                    &mut db_hh,
                );
                put(grads, 0, &dx);
                put(grads, 1, &dh);
                put(grads, 2, &dw_ih);
                put(grads, 3, &dw_hh);
                put(grads, 4, &db_ih);
                put(grads, 5, &db_hh);
            }
            Op::L1Mean => {
                let x = val(0);
                let n = E::from_f64(x.len() as f64);
                let s = g[0] / n;
                let da: Vec<E> = x
                    .data()
                    .iter()
                    .map(|&v| {
                        if v > E::zero() {
                            s
                        } else if v < E::zero() {
                            -s
                        } else {
                            E::zero()
                        }
                    })
                    .collect();
                put(grads, 0, &da);
            }
            Op::L2Norm => {
                let x = val(0);
                let norm = node.value.scalar_value();
                let da: Vec<E> = if norm > E::zero() {
                    x.data().iter().map(|&v| g[0] * v / norm).collect()
                } else {
                    vec![E::zero(); x.len()]
                };
                put(grads, 0, &da);
            }
            Op::ReduceMean => {
                let x = val(0);
                let s = g[0] / E::from_f64(x.len() as f64);
                let da = vec![s; x.len()];
                put(grads, 0, &da);
            }
            Op::Custom(op) => {
                let refs: Vec<&Tensor<E>> = ins.iter().map(|&i| self.value(i)).collect();
                let contribs = op.backward(&refs, &node.value, g);
                debug_assert_eq!(contribs.len(), ins.len());
                for (i, c) in contribs.into_iter().enumerate() {
                    if let Some(c) = c {
                        put(grads, i, &c);
                    }
                }
            }
        }
        Ok(())
    }
}

impl<E: Real> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, vals.to_vec()).unwrap()
    }

    #[test]
    fn conv_shape_matches_strided_arithmetic() {
        // 6x8x8 input, 4 filters 3x3 stride 2 pad 1 -> 4x4x4
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[6, 8, 8], 0.5), false).unwrap();
        let w = tape.leaf(Tensor::full(&[4, 6, 3, 3], 0.01), true).unwrap();
        let b = tape.leaf(Tensor::zeros(&[4]), true).unwrap();
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 4, 4]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[-1.0, 0.0, 2.0]), false).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn lstm_zero_weights_zero_state_outputs_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[0.3, -0.2, 0.9]), false).unwrap();
        let h = tape.leaf(Tensor::zeros(&[2]), false).unwrap();
        let c = tape.leaf(Tensor::zeros(&[2]), false).unwrap();
        let w_ih = tape.leaf(Tensor::zeros(&[8, 3]), true).unwrap();
        let w_hh = tape.leaf(Tensor::zeros(&[8, 2]), true).unwrap();
        let b = tape.leaf(Tensor::zeros(&[8]), true).unwrap();
        let y = tape.lstm_cell(x, h, c, w_ih, w_hh, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l1_mean_backward_is_sign_over_n() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[4], &[0.5, -1.5, 2.0, -0.25]), true).unwrap();
        let y = tape.l1_mean(x).unwrap();
        assert!((tape.value(y).scalar_value() - (0.5 + 1.5 + 2.0 + 0.25) / 4.0).abs() < 1e-15);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.25, -0.25, 0.25, -0.25]);
    }

    #[test]
    fn unused_parameter_gradient_is_exactly_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true).unwrap();
        let unused = tape.leaf(t64(&[2], &[3.0, 4.0]), true).unwrap();
        let y = tape.l1_mean(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        let z = g.tensor(&tape, unused);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(GradError::NotScalar { .. })
        ));
    }

    #[test]
    fn strict_mode_faults_on_non_finite() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 0.0]), false).unwrap();
        let z = tape.leaf(Tensor::scalar(0.0), false).unwrap();
        assert!(matches!(
            tape.div(x, z),
            Err(GradError::NonFinite { .. })
        ));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape
                .leaf(Tensor::from_fn(&[3, 8, 8], |i| (i as f32 * 0.37).sin()), false)
                .unwrap();
            let w = tape
                .leaf(Tensor::from_fn(&[5, 3, 3, 3], |i| (i as f32 * 0.11).cos()), false)
                .unwrap();
            let b = tape
                .leaf(Tensor::from_fn(&[5], |i| i as f32 * 0.01), false)
                .unwrap();
            let y = tape.conv2d(x, w, b, 2, 1).unwrap();
            let r = tape.relu(y).unwrap();
            tape.value(r).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true).unwrap();
        let b = tape.leaf(t64(&[1, 2], &[5.0, 6.0]), true).unwrap();
        let cat = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = tape.narrow(cat, 0, 2, 1).unwrap();
        assert_eq!(tape.value(back).data(), &[5.0, 6.0]);
        let loss = tape.reduce_mean(back).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(b).unwrap(), &[0.5, 0.5]);
        assert!(g.get(a).is_none());
    }
}
