//! Wengert tape for reverse-mode differentiation.
//!
//! Forward calls record one entry per operation into a linear tape;
//! `backward` replays the tape once in reverse, accumulating vector-Jacobian
//! products into per-buffer gradient slots. Buffers registered as parameters
//! carry a name so the optimizer can report which tensor misbehaved.

use crate::activations::ActKind;
use crate::error::{Error, Result};
use crate::layers::{alpha_chain_grad, effective_alpha_of};
use crate::linalg::matmul_acc;
use crate::ops;
use crate::tensor::Tensor;

pub type BufId = usize;

/// Where an activation gets its linearity coefficient from.
#[derive(Debug, Clone, Copy)]
pub enum AlphaRef {
    /// Fixed effective alpha; no gradient.
    Pinned(f32),
    /// Trainable raw parameter (1-element buffer); alpha = logistic(raw).
    Param(BufId),
}

struct Buf {
    data: Vec<f32>,
    shape: Vec<usize>,
    param_name: Option<String>,
}

enum Op {
    Matmul { a: BufId, b: BufId, out: BufId, m: usize, k: usize, n: usize },
    Dense { x: BufId, w: BufId, b: BufId, out: BufId, batch: usize, n_in: usize, n_out: usize },
    Conv2d {
        x: BufId,
        kernel: BufId,
        bias: BufId,
        out: BufId,
        batch: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        h_out: usize,
        w_out: usize,
    },
    Activation { x: BufId, out: BufId, kind: ActKind, alpha: AlphaRef, beta: f32 },
    MaxPool { x: BufId, out: BufId, argmax: Vec<u32> },
    Reshape { x: BufId, out: BufId },
    CrossEntropy { logits: BufId, out: BufId, labels: Vec<u32>, batch: usize, classes: usize },
    AlphaPenalty { entries: Vec<(BufId, ActKind)>, out: BufId },
    Add { a: BufId, b: BufId, out: BufId },
    Mul { a: BufId, b: BufId, out: BufId },
    Scale { x: BufId, c: f32, out: BufId },
    Sum { x: BufId, out: BufId },
}

pub struct GradTape {
    bufs: Vec<Buf>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { bufs: Vec::new(), ops: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, data: Vec<f32>, shape: Vec<usize>, param_name: Option<String>) -> BufId {
        let id = self.bufs.len();
        self.bufs.push(Buf { data, shape, param_name });
        self.grads.push(None);
        id
    }

    /// Register a non-parameter input (snapshot).
    pub fn input(&mut self, t: &Tensor) -> BufId {
        self.push(t.data().to_vec(), t.shape().to_vec(), None)
    }

    /// Register a trainable parameter (snapshot). The name is used in
    /// optimizer diagnostics.
    pub fn param(&mut self, name: &str, t: &Tensor) -> BufId {
        self.push(t.data().to_vec(), t.shape().to_vec(), Some(name.to_string()))
    }

    pub fn value(&self, id: BufId) -> &[f32] {
        &self.bufs[id].data
    }

    pub fn shape(&self, id: BufId) -> &[usize] {
        &self.bufs[id].shape
    }

    pub fn param_name(&self, id: BufId) -> Option<&str> {
        self.bufs[id].param_name.as_deref()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn dims2(&self, id: BufId, what: &str) -> Result<(usize, usize)> {
        match self.bufs[id].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("{what}: expected 2-d, got {other:?}"))),
        }
    }

    // ── Forward ops ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {m}x{k} vs {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.bufs[a].data, &self.bufs[b].data, &mut out, m, k, n);
        let out = self.push(out, vec![m, n], None);
        self.ops.push(Op::Matmul { a, b, out, m, k, n });
        Ok(out)
    }

    pub fn dense(&mut self, x: BufId, w: BufId, b: BufId) -> Result<BufId> {
        let (batch, n_in) = self.dims2(x, "dense input")?;
        let (n_out, n_in2) = self.dims2(w, "dense weight")?;
        if n_in != n_in2 || self.bufs[b].data.len() != n_out {
            return Err(Error::Shape(format!(
                "dense shapes do not compose: x {batch}x{n_in}, w {n_out}x{n_in2}, b {}",
                self.bufs[b].data.len()
            )));
        }
        let mut out = vec![0.0; batch * n_out];
        ops::dense_forward(
            &self.bufs[x].data,
            &self.bufs[w].data,
            &self.bufs[b].data,
            &mut out,
            batch,
            n_in,
            n_out,
        );
        let out = self.push(out, vec![batch, n_out], None);
        self.ops.push(Op::Dense { x, w, b, out, batch, n_in, n_out });
        Ok(out)
    }

    pub fn conv2d(
        &mut self,
        x: BufId,
        kernel: BufId,
        bias: BufId,
        stride: usize,
        padding: usize,
    ) -> Result<BufId> {
        let (batch, c_in, h, w) = match self.bufs[x].shape.as_slice() {
            [b, c, h, w] => (*b, *c, *h, *w),
            other => return Err(Error::Shape(format!("conv input: expected 4-d, got {other:?}"))),
        };
        let (c_out, c_in2, k) = match self.bufs[kernel].shape.as_slice() {
            [co, ci, kh, kw] if kh == kw => (*co, *ci, *kh),
            other => {
                return Err(Error::Shape(format!(
                    "conv kernel: expected square [c_out,c_in,k,k], got {other:?}"
                )))
            }
        };
        if c_in != c_in2 || self.bufs[bias].data.len() != c_out {
            return Err(Error::Shape(format!(
                "conv channels do not compose: input {c_in}, kernel {c_in2}, bias {}",
                self.bufs[bias].data.len()
            )));
        }
        let h_out = ops::conv_out_dim(h, k, stride, padding)
            .ok_or_else(|| Error::Shape(format!("conv output height not integral: h={h} k={k} s={stride} p={padding}")))?;
        let w_out = ops::conv_out_dim(w, k, stride, padding)
            .ok_or_else(|| Error::Shape(format!("conv output width not integral: w={w} k={k} s={stride} p={padding}")))?;
        let mut out = vec![0.0; batch * c_out * h_out * w_out];
        ops::conv2d_forward(
            &self.bufs[x].data,
            &self.bufs[kernel].data,
            &self.bufs[bias].data,
            &mut out,
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            h_out,
            w_out,
        );
        let out = self.push(out, vec![batch, c_out, h_out, w_out], None);
        self.ops.push(Op::Conv2d {
            x,
            kernel,
            bias,
            out,
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            h_out,
            w_out,
        });
        Ok(out)
    }

    pub fn activation(&mut self, x: BufId, kind: ActKind, alpha: AlphaRef, beta: f32) -> BufId {
        let a = self.effective_alpha(alpha, kind);
        let mut out = vec![0.0; self.bufs[x].data.len()];
        ops::activation_forward(&self.bufs[x].data, &mut out, kind, a, beta);
        let shape = self.bufs[x].shape.clone();
        let out = self.push(out, shape, None);
        self.ops.push(Op::Activation { x, out, kind, alpha, beta });
        out
    }

    fn effective_alpha(&self, alpha: AlphaRef, kind: ActKind) -> f32 {
        match alpha {
            AlphaRef::Pinned(a) => a,
            AlphaRef::Param(id) => effective_alpha_of(kind, self.bufs[id].data[0]),
        }
    }

    pub fn maxpool(&mut self, x: BufId, size: usize) -> Result<BufId> {
        let (batch, c, h, w) = match self.bufs[x].shape.as_slice() {
            [b, c, h, w] => (*b, *c, *h, *w),
            other => return Err(Error::Shape(format!("pool input: expected 4-d, got {other:?}"))),
        };
        if h % size != 0 || w % size != 0 {
            return Err(Error::Shape(format!("pool size {size} does not divide {h}x{w}")));
        }
        let (h_out, w_out) = (h / size, w / size);
        let mut out = vec![0.0; batch * c * h_out * w_out];
        let mut argmax = vec![0u32; out.len()];
        ops::maxpool_forward(&self.bufs[x].data, &mut out, &mut argmax, batch, c, h, w, size, h_out, w_out);
        let out = self.push(out, vec![batch, c, h_out, w_out], None);
        self.ops.push(Op::MaxPool { x, out, argmax });
        Ok(out)
    }

    /// Collapse all but the leading (batch) dimension.
    pub fn flatten(&mut self, x: BufId) -> BufId {
        let shape = &self.bufs[x].shape;
        let batch = shape[0];
        let rest: usize = shape[1..].iter().product();
        let data = self.bufs[x].data.clone();
        let out = self.push(data, vec![batch, rest], None);
        self.ops.push(Op::Reshape { x, out });
        out
    }

    pub fn cross_entropy(&mut self, logits: BufId, labels: &[u32]) -> Result<BufId> {
        let (batch, classes) = self.dims2(logits, "cross_entropy logits")?;
        if labels.len() != batch {
            return Err(Error::Data(format!(
                "cross_entropy: {} labels for batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Data(format!(
                "cross_entropy: label {bad} out of range for {classes} classes"
            )));
        }
        let loss = ops::cross_entropy_forward(&self.bufs[logits].data, labels, batch, classes);
        let out = self.push(vec![loss], vec![1], None);
        self.ops.push(Op::CrossEntropy { logits, out, labels: labels.to_vec(), batch, classes });
        Ok(out)
    }

    /// sum_i (1 - alpha_i)^2 over trainable activation coefficients.
    pub fn alpha_penalty(&mut self, entries: &[(BufId, ActKind)]) -> BufId {
        let total: f64 = entries
            .iter()
            .map(|&(id, kind)| {
                let a = effective_alpha_of(kind, self.bufs[id].data[0]) as f64;
                (1.0 - a) * (1.0 - a)
            })
            .sum();
        let out = self.push(vec![total as f32], vec![1], None);
        self.ops.push(Op::AlphaPenalty { entries: entries.to_vec(), out });
        out
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.bufs[a].shape != self.bufs[b].shape {
            return Err(Error::Shape("add: operand shapes differ".into()));
        }
        let data: Vec<f32> =
            self.bufs[a].data.iter().zip(&self.bufs[b].data).map(|(x, y)| x + y).collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.push(data, shape, None);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.bufs[a].shape != self.bufs[b].shape {
            return Err(Error::Shape("mul: operand shapes differ".into()));
        }
        let data: Vec<f32> =
            self.bufs[a].data.iter().zip(&self.bufs[b].data).map(|(x, y)| x * y).collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.push(data, shape, None);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: BufId, c: f32) -> BufId {
        let data: Vec<f32> = self.bufs[x].data.iter().map(|v| v * c).collect();
        let shape = self.bufs[x].shape.clone();
        let out = self.push(data, shape, None);
        self.ops.push(Op::Scale { x, c, out });
        out
    }

    pub fn sum(&mut self, x: BufId) -> BufId {
        let total: f32 = self.bufs[x].data.iter().sum();
        let out = self.push(vec![total], vec![1], None);
        self.ops.push(Op::Sum { x, out });
        out
    }

    // ── Backward ───────────────────────────────────────────────────

    /// Reverse replay from a scalar loss. Each recorded op is visited
    /// exactly once; parameters unreachable from the loss keep a zero
    /// gradient (see `grad`).
    pub fn backward(&mut self, loss: BufId) -> Result<()> {
        if self.bufs[loss].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.bufs[loss].shape
            )));
        }
        self.grads[loss] = Some(vec![1.0]);
        for i in (0..self.ops.len()).rev() {
            self.backward_op(i);
        }
        Ok(())
    }

    fn take_out_grad(&mut self, out: BufId) -> Option<Vec<f32>> {
        self.grads[out].clone()
    }

    fn accum(&mut self, id: BufId, g: &[f32]) {
        match &mut self.grads[id] {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => self.grads[id] = Some(g.to_vec()),
        }
    }

    fn backward_op(&mut self, idx: usize) {
        // Ops are replayed exactly once; grads flow only where d_out exists.
        match &self.ops[idx] {
            Op::Matmul { a, b, out, m, k, n } => {
                let (a, b, out, m, k, n) = (*a, *b, *out, *m, *k, *n);
                let Some(d_out) = self.take_out_grad(out) else { return };
                // d_A = d_out Bᵀ ; d_B = Aᵀ d_out
                let mut d_a = vec![0.0; m * k];
                let b_data = &self.bufs[b].data;
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += d_out[i * n + j] * b_data[p * n + j];
                        }
                        d_a[i * k + p] = s;
                    }
                }
                let mut d_b = vec![0.0; k * n];
                let a_data = &self.bufs[a].data;
                for p in 0..k {
                    for i in 0..m {
                        let a_ip = a_data[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            d_b[p * n + j] += a_ip * d_out[i * n + j];
                        }
                    }
                }
                self.accum(a, &d_a);
                self.accum(b, &d_b);
            }
            Op::Dense { x, w, b, out, batch, n_in, n_out } => {
                let (x, w, b, out, batch, n_in, n_out) = (*x, *w, *b, *out, *batch, *n_in, *n_out);
                let Some(d_out) = self.take_out_grad(out) else { return };
                let mut d_x = vec![0.0; batch * n_in];
                let mut d_w = vec![0.0; n_out * n_in];
                let mut d_b = vec![0.0; n_out];
                ops::dense_backward(
                    &d_out,
                    &self.bufs[x].data,
                    &self.bufs[w].data,
                    &mut d_x,
                    &mut d_w,
                    &mut d_b,
                    batch,
                    n_in,
                    n_out,
                );
                self.accum(x, &d_x);
                self.accum(w, &d_w);
                self.accum(b, &d_b);
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                out,
                batch,
                c_in,
                h,
                w,
                c_out,
                k,
                stride,
                padding,
                h_out,
                w_out,
            } => {
                let (x, kernel, bias, out) = (*x, *kernel, *bias, *out);
                let (batch, c_in, h, w, c_out, k, stride, padding, h_out, w_out) =
                    (*batch, *c_in, *h, *w, *c_out, *k, *stride, *padding, *h_out, *w_out);
                let Some(d_out) = self.take_out_grad(out) else { return };
                let mut d_x = vec![0.0; batch * c_in * h * w];
                let mut d_k = vec![0.0; c_out * c_in * k * k];
                let mut d_b = vec![0.0; c_out];
                ops::conv2d_backward(
                    &d_out,
                    &self.bufs[x].data,
                    &self.bufs[kernel].data,
                    &mut d_x,
                    &mut d_k,
                    &mut d_b,
                    batch,
                    c_in,
                    h,
                    w,
                    c_out,
                    k,
                    stride,
                    padding,
                    h_out,
                    w_out,
                );
                self.accum(x, &d_x);
                self.accum(kernel, &d_k);
                self.accum(bias, &d_b);
            }
            Op::Activation { x, out, kind, alpha, beta } => {
                let (x, out, kind, alpha, beta) = (*x, *out, *kind, *alpha, *beta);
                let Some(d_out) = self.take_out_grad(out) else { return };
                let a = self.effective_alpha(alpha, kind);
                let mut d_x = vec![0.0; self.bufs[x].data.len()];
                let d_alpha =
                    ops::activation_backward(&d_out, &self.bufs[x].data, &mut d_x, kind, a, beta);
                self.accum(x, &d_x);
                if let AlphaRef::Param(raw_id) = alpha {
                    let d_raw = d_alpha * alpha_chain_grad(kind, self.bufs[raw_id].data[0]);
                    self.accum(raw_id, &[d_raw]);
                }
            }
            Op::MaxPool { x, out, argmax } => {
                let (x, out) = (*x, *out);
                let argmax = argmax.clone();
                let Some(d_out) = self.take_out_grad(out) else { return };
                let mut d_x = vec![0.0; self.bufs[x].data.len()];
                ops::maxpool_backward(&d_out, &argmax, &mut d_x);
                self.accum(x, &d_x);
            }
            Op::Reshape { x, out } => {
                let (x, out) = (*x, *out);
                let Some(d_out) = self.take_out_grad(out) else { return };
                self.accum(x, &d_out);
            }
            Op::CrossEntropy { logits, out, labels, batch, classes } => {
                let (logits, out, batch, classes) = (*logits, *out, *batch, *classes);
                let labels = labels.clone();
                let Some(d_out) = self.take_out_grad(out) else { return };
                let mut d_logits = vec![0.0; batch * classes];
                ops::cross_entropy_backward(
                    &self.bufs[logits].data,
                    &labels,
                    d_out[0],
                    &mut d_logits,
                    batch,
                    classes,
                );
                self.accum(logits, &d_logits);
            }
            Op::AlphaPenalty { entries, out } => {
                let out = *out;
                let entries = entries.clone();
                let Some(d_out) = self.take_out_grad(out) else { return };
                for (id, kind) in entries {
                    let raw = self.bufs[id].data[0];
                    let a = effective_alpha_of(kind, raw);
                    // d/draw (1-a)^2 = -2(1-a) * da/draw
                    let d_raw = d_out[0] * (-2.0 * (1.0 - a)) * alpha_chain_grad(kind, raw);
                    self.accum(id, &[d_raw]);
                }
            }
            Op::Add { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let Some(d_out) = self.take_out_grad(out) else { return };
                self.accum(a, &d_out);
                self.accum(b, &d_out);
            }
            Op::Mul { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let Some(d_out) = self.take_out_grad(out) else { return };
                let d_a: Vec<f32> = d_out.iter().zip(&self.bufs[b].data).map(|(g, v)| g * v).collect();
                let d_b: Vec<f32> = d_out.iter().zip(&self.bufs[a].data).map(|(g, v)| g * v).collect();
                self.accum(a, &d_a);
                self.accum(b, &d_b);
            }
            Op::Scale { x, c, out } => {
                let (x, c, out) = (*x, *c, *out);
                let Some(d_out) = self.take_out_grad(out) else { return };
                let d_x: Vec<f32> = d_out.iter().map(|g| g * c).collect();
                self.accum(x, &d_x);
            }
            Op::Sum { x, out } => {
                let (x, out) = (*x, *out);
                let Some(d_out) = self.take_out_grad(out) else { return };
                let d_x = vec![d_out[0]; self.bufs[x].data.len()];
                self.accum(x, &d_x);
            }
        }
    }

    /// Gradient of a buffer. Parameters the loss never touched return zeros
    /// of the right size.
    pub fn grad(&self, id: BufId) -> Vec<f32> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![0.0; self.bufs[id].data.len()],
        }
    }
}
