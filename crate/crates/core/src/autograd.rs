//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records one forward pass. Every primitive stores what its
//! backward rule needs; [`Graph::backward`] walks the nodes in reverse
//! insertion order, which is a valid reverse topological order because a node
//! can only reference nodes created before it.
//!
//! Complex signals are carried as real tensors of shape `[batch, 2n]`: the
//! first `n` columns hold the real parts, the last `n` the imaginary parts.
//! Complex matrices are `[2, rows, cols]` tensors (real plane, then imaginary
//! plane).

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};

/// Dense row-major tensor with up to three axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(shape_err("Tensor::new", format!("{} axes", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    /// `[1, n]` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(shape_err(op, format!("expected 2 axes, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize },
    ReduceSum(Var),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Log { x: Var, eps: f64 },
    Softmax(Var),
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ComplexMatMul { a: Var, x: Var },
    PhaseDiag { theta: Var, x: Var },
    PowerNormalize { x: Var, rms: Vec<f64>, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub batch: usize,
}

/// Tape of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    warnings: Vec<String>,
}

/// Gradients returned by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    lhs.len() == 2
        && rhs.len() == 2
        && (rhs[0] == lhs[0] || rhs[0] == 1)
        && (rhs[1] == lhs[1] || rhs[1] == 1)
}

/// Index into a broadcast operand for element `(r, c)` of the full shape.
#[inline]
fn bidx(rshape: &[usize], r: usize, c: usize) -> usize {
    let rr = if rshape[0] == 1 { 0 } else { r };
    let cc = if rshape[1] == 1 { 0 } else { c };
    rr * rshape[1] + cc
}

/// Sums a full-shape gradient down onto a broadcast operand's shape.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape == shape {
        return g.clone();
    }
    let (rows, cols) = (g.shape[0], g.shape[1]);
    let mut out = Tensor::zeros(shape);
    for r in 0..rows {
        for c in 0..cols {
            out.data[bidx(shape, r, c)] += g.data[r * cols + c];
        }
    }
    out
}

/// `c = alpha * a * b + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // bounds of the strided views
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the slices cover every index addressed by the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Numerical clamps recorded during the forward pass.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn warn(&mut self, msg: String) {
        log::debug!("{msg}");
        self.warnings.push(msg);
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary_broadcast(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !broadcast_ok(&av.shape, &bv.shape) {
            return Err(shape_err(op, format!("{:?} with {:?}", av.shape, bv.shape)));
        }
        let (rows, cols) = (av.shape[0], av.shape[1]);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(f(av.data[r * cols + c], bv.data[bidx(&bv.shape, r, c)]));
            }
        }
        Ok(Tensor {
            shape: av.shape.clone(),
            data: out,
        })
    }

    /// `a + b`, `b` broadcast over rows and/or columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_broadcast("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product, `b` broadcast.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_broadcast("hadamard", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `[n, k] x [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.nodes[a.0].value.dims2("matmul")?;
        let (k2, m) = self.nodes[b.0].value.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{n}x{k} * {k2}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            1.0,
            &self.nodes[a.0].value.data,
            k,
            1,
            &self.nodes[b.0].value.data,
            m,
            1,
            0.0,
            &mut out,
            m,
            1,
        );
        let t = Tensor {
            shape: vec![n, m],
            data: out,
        };
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.nodes[a.0].value.dims2("transpose")?;
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    /// Fully connected layer `x W^T + b` with `W: [out, in]`, `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, wt)?;
        self.add(y, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut t = self.nodes[a.0].value.clone();
        t.data.iter_mut().for_each(|v| *v *= s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let mut t = self.nodes[a.0].value.clone();
        t.data.iter_mut().for_each(|v| *v += s);
        self.push(t, Op::AddScalar(a), &[a])
    }

    /// Concatenates 2-D tensors along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let rows = self.nodes[parts[0].0].value.dims2("concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.nodes[p.0].value.dims2("concat")?;
            if r != rows {
                return Err(shape_err("concat", format!("row counts {rows} and {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].value.data;
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let t = Tensor {
            shape: vec![rows, total],
            data: out,
        };
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.nodes[src.0].value.dims2("slice")?;
        if start + len > cols {
            return Err(shape_err(
                "slice",
                format!("columns {start}..{} of {cols}", start + len),
            ));
        }
        let s = &self.nodes[src.0].value.data;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&s[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor {
            shape: vec![rows, len],
            data: out,
        };
        Ok(self.push(t, Op::Slice { src, start }, &[src]))
    }

    /// Sum of all entries, as a `[1, 1]` tensor.
    pub fn reduce_sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::ReduceSum(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut t = self.nodes[a.0].value.clone();
        t.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut t = self.nodes[a.0].value.clone();
        t.data.iter_mut().for_each(|v| *v = stable_sigmoid(*v));
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let mut t = self.nodes[a.0].value.clone();
        t.data.iter_mut().for_each(|v| *v = v.max(0.0).sqrt());
        self.push(t, Op::Sqrt(a), &[a])
    }

    /// Natural log with inputs clamped from below at `eps`.
    pub fn log(&mut self, a: Var, eps: f64) -> Var {
        let mut t = self.nodes[a.0].value.clone();
        let mut clamped = 0usize;
        t.data.iter_mut().for_each(|v| {
            if *v < eps {
                clamped += 1;
                *v = eps;
            }
            *v = v.ln();
        });
        if clamped > 0 {
            self.warn(format!("log: {clamped} input(s) clamped at {eps:e}"));
        }
        self.push(t, Op::Log { x: a, eps }, &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.nodes[a.0].value.dims2("softmax")?;
        let mut t = self.nodes[a.0].value.clone();
        for r in 0..rows {
            let row = &mut t.data[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Batch normalization using the statistics of the current batch.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (b, n) = self.nodes[x.0].value.dims2("batchnorm")?;
        if b < 2 {
            return Err(shape_err("batchnorm", format!("training mode needs batch >= 2, got {b}")));
        }
        self.check_affine("batchnorm", gamma, beta, n)?;
        let xv = &self.nodes[x.0].value.data;
        let mut mean = vec![0.0; n];
        let mut var = vec![0.0; n];
        for r in 0..b {
            for c in 0..n {
                mean[c] += xv[r * n + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        for r in 0..b {
            for c in 0..n {
                let d = xv[r * n + c] - mean[c];
                var[c] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= b as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std);
        let stats = BatchStats { mean, var, batch: b };
        let v = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Batch normalization with frozen running statistics (an affine map).
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, n) = self.nodes[x.0].value.dims2("batchnorm")?;
        self.check_affine("batchnorm", gamma, beta, n)?;
        if running_mean.len() != n || running_var.len() != n {
            return Err(shape_err("batchnorm", "running statistics width"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, running_mean, &inv_std);
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    fn check_affine(&self, op: &'static str, gamma: Var, beta: Var, n: usize) -> Result<()> {
        for v in [gamma, beta] {
            if self.nodes[v.0].value.shape != [1, n] {
                return Err(shape_err(
                    op,
                    format!("affine parameter {:?}, expected [1, {n}]", self.nodes[v.0].value.shape),
                ));
            }
        }
        Ok(())
    }

    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Tensor, Vec<f64>) {
        let xv = &self.nodes[x.0].value;
        let (b, n) = (xv.shape[0], xv.shape[1]);
        let g = &self.nodes[gamma.0].value.data;
        let be = &self.nodes[beta.0].value.data;
        let mut xhat = vec![0.0; b * n];
        let mut out = vec![0.0; b * n];
        for r in 0..b {
            for c in 0..n {
                let i = r * n + c;
                xhat[i] = (xv.data[i] - mean[c]) * inv_std[c];
                out[i] = g[c] * xhat[i] + be[c];
            }
        }
        (
            Tensor {
                shape: vec![b, n],
                data: out,
            },
            xhat,
        )
    }

    /// Complex matrix-vector product on paired tensors: `a` is `[2, out, in]`,
    /// `x` is `[batch, 2 in]`, the result `[batch, 2 out]`.
    pub fn complex_matmul(&mut self, a: Var, x: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.shape.len() != 3 || av.shape[0] != 2 {
            return Err(shape_err("complex_matmul", format!("matrix shape {:?}", av.shape)));
        }
        let (out_n, in_n) = (av.shape[1], av.shape[2]);
        let (b, w) = self.nodes[x.0].value.dims2("complex_matmul")?;
        if w != 2 * in_n {
            return Err(shape_err(
                "complex_matmul",
                format!("{out_n}x{in_n} matrix applied to paired width {w}"),
            ));
        }
        let plane = out_n * in_n;
        let (are, aim) = av.data.split_at(plane);
        let xv = &self.nodes[x.0].value.data;
        let (xre, xim) = (xv, &xv[in_n..]);
        let ow = 2 * out_n;
        let mut out = vec![0.0; b * ow];
        // y_re = x_re A_re^T - x_im A_im^T
        gemm(b, in_n, out_n, 1.0, xre, w, 1, are, 1, in_n, 0.0, &mut out, ow, 1);
        gemm(b, in_n, out_n, -1.0, xim, w, 1, aim, 1, in_n, 1.0, &mut out, ow, 1);
        // y_im = x_re A_im^T + x_im A_re^T
        let yim = &mut out[out_n..];
        gemm(b, in_n, out_n, 1.0, xre, w, 1, aim, 1, in_n, 0.0, yim, ow, 1);
        gemm(b, in_n, out_n, 1.0, xim, w, 1, are, 1, in_n, 1.0, yim, ow, 1);
        let t = Tensor {
            shape: vec![b, ow],
            data: out,
        };
        Ok(self.push(t, Op::ComplexMatMul { a, x }, &[a, x]))
    }

    /// Multiplies each complex entry by `exp(j θ)`; `theta` is `[1, n]`, `x`
    /// is `[batch, 2n]`.
    pub fn phase_diag_apply(&mut self, theta: Var, x: Var) -> Result<Var> {
        let tv = &self.nodes[theta.0].value;
        let n = tv.len();
        if tv.shape != [1, n] {
            return Err(shape_err("phase_diag_apply", format!("phase shape {:?}", tv.shape)));
        }
        let (b, w) = self.nodes[x.0].value.dims2("phase_diag_apply")?;
        if w != 2 * n {
            return Err(shape_err(
                "phase_diag_apply",
                format!("{n} phases for paired width {w}"),
            ));
        }
        let (sin, cos): (Vec<f64>, Vec<f64>) = tv.data.iter().map(|t| t.sin_cos()).unzip();
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; b * w];
        for r in 0..b {
            let row = r * w;
            for i in 0..n {
                let (xr, xi) = (xv[row + i], xv[row + n + i]);
                out[row + i] = cos[i] * xr - sin[i] * xi;
                out[row + n + i] = sin[i] * xr + cos[i] * xi;
            }
        }
        let t = Tensor {
            shape: vec![b, w],
            data: out,
        };
        Ok(self.push(t, Op::PhaseDiag { theta, x }, &[theta, x]))
    }

    /// Scales each complex column of `x: [batch, 2n]` to unit mean power over
    /// the batch: `y = x / (sqrt(mean |x|^2) + eps)`.
    pub fn power_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (b, w) = self.nodes[x.0].value.dims2("power_normalize")?;
        if w % 2 != 0 {
            return Err(shape_err("power_normalize", format!("odd paired width {w}")));
        }
        let n = w / 2;
        let xv = &self.nodes[x.0].value.data;
        let mut rms = vec![0.0; n];
        for r in 0..b {
            for i in 0..n {
                let (xr, xi) = (xv[r * w + i], xv[r * w + n + i]);
                rms[i] += xr * xr + xi * xi;
            }
        }
        rms.iter_mut().for_each(|p| *p = (*p / b as f64).sqrt());
        let mut out = xv.clone();
        for r in 0..b {
            for i in 0..n {
                let d = rms[i] + eps;
                out[r * w + i] /= d;
                out[r * w + n + i] /= d;
            }
        }
        let dead = rms.iter().filter(|&&p| p == 0.0).count();
        if dead > 0 {
            self.warn(format!("power_normalize: {dead} all-zero stream(s)"));
        }
        let t = Tensor {
            shape: vec![b, w],
            data: out,
        };
        Ok(self.push(t, Op::PowerNormalize { x, rms, eps }, &[x]))
    }

    /// Signs of every ReLU input in the graph; differs between two forward
    /// passes exactly when some activation crossed its kink.
    pub fn relu_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                sig.extend(self.nodes[a.0].value.data.iter().map(|&v| v > 0.0));
            }
        }
        sig
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor {
            shape: self.nodes[loss.0].value.shape.clone(),
            data: vec![1.0],
        });
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // constants never carry gradients
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let gb = reduce_to(g, &self.nodes[b.0].value.shape);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let mut gb = reduce_to(g, &self.nodes[b.0].value.shape);
                    gb.data.iter_mut().for_each(|v| *v = -*v);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let cols = av.shape[1];
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for (k, v) in ga.data.iter_mut().enumerate() {
                        *v *= bv.data[bidx(&bv.shape, k / cols, k % cols)];
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut full = g.clone();
                    for (k, v) in full.data.iter_mut().enumerate() {
                        *v *= av.data[k];
                    }
                    self.accumulate(grads, *b, reduce_to(&full, &bv.shape));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (n, k, m) = (av.shape[0], av.shape[1], bv.shape[1]);
                if self.wants(*a) {
                    // dA = G B^T
                    let mut ga = vec![0.0; n * k];
                    gemm(n, m, k, 1.0, &g.data, m, 1, &bv.data, 1, m, 0.0, &mut ga, k, 1);
                    self.accumulate(grads, *a, Tensor { shape: vec![n, k], data: ga });
                }
                if self.wants(*b) {
                    // dB = A^T G
                    let mut gb = vec![0.0; k * m];
                    gemm(k, n, m, 1.0, &av.data, 1, k, &g.data, m, 1, 0.0, &mut gb, m, 1);
                    self.accumulate(grads, *b, Tensor { shape: vec![k, m], data: gb });
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (g.shape[0], g.shape[1]);
                let mut ga = vec![0.0; n * m];
                for j in 0..m {
                    for i in 0..n {
                        ga[i * m + j] = g.data[j * n + i];
                    }
                }
                self.accumulate(grads, *a, Tensor { shape: vec![n, m], data: ga });
            }
            Op::Scale(a, s) => {
                let mut ga = g.clone();
                ga.data.iter_mut().for_each(|v| *v *= s);
                self.accumulate(grads, *a, ga);
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Concat(parts) => {
                let rows = g.shape[0];
                let total = g.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape[1];
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor { shape: vec![rows, w], data: gp });
                    }
                    offset += w;
                }
            }
            Op::Slice { src, start } => {
                let sv = &self.nodes[src.0].value;
                let (rows, cols) = (sv.shape[0], sv.shape[1]);
                let len = g.shape[1];
                let mut gs = Tensor::zeros(&sv.shape);
                for r in 0..rows {
                    gs.data[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *src, gs);
            }
            Op::ReduceSum(a) => {
                let shape = &self.nodes[a.0].value.shape;
                self.accumulate(grads, *a, Tensor::full(shape, g.data[0]));
            }
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                let mut ga = g.clone();
                for (v, x) in ga.data.iter_mut().zip(&av.data) {
                    if *x <= 0.0 {
                        *v = 0.0;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                for (v, y) in ga.data.iter_mut().zip(&out.data) {
                    *v *= y * (1.0 - y);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let mut ga = g.clone();
                for (v, y) in ga.data.iter_mut().zip(&out.data) {
                    *v = if *y > 0.0 { *v / (2.0 * y) } else { 0.0 };
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Log { x, eps } => {
                let xv = &self.nodes[x.0].value;
                let mut gx = g.clone();
                for (v, xi) in gx.data.iter_mut().zip(&xv.data) {
                    *v = if *xi < *eps { 0.0 } else { *v / xi };
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(a) => {
                let (rows, cols) = (out.shape[0], out.shape[1]);
                let mut ga = g.clone();
                for r in 0..rows {
                    let y = &out.data[r * cols..(r + 1) * cols];
                    let gr = &mut ga.data[r * cols..(r + 1) * cols];
                    let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    for (gv, yv) in gr.iter_mut().zip(y) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, n) = (out.shape[0], out.shape[1]);
                let gam = &self.nodes[gamma.0].value.data;
                let mut sum_g = vec![0.0; n];
                let mut sum_gx = vec![0.0; n];
                for r in 0..b {
                    for c in 0..n {
                        let i = r * n + c;
                        sum_g[c] += g.data[i];
                        sum_gx[c] += g.data[i] * xhat[i];
                    }
                }
                if self.wants(*x) {
                    let bf = b as f64;
                    let mut gx = vec![0.0; b * n];
                    for r in 0..b {
                        for c in 0..n {
                            let i = r * n + c;
                            gx[i] = gam[c] * inv_std[c] / bf
                                * (bf * g.data[i] - sum_g[c] - xhat[i] * sum_gx[c]);
                        }
                    }
                    self.accumulate(grads, *x, Tensor { shape: vec![b, n], data: gx });
                }
                self.accumulate(grads, *gamma, Tensor { shape: vec![1, n], data: sum_gx });
                self.accumulate(grads, *beta, Tensor { shape: vec![1, n], data: sum_g });
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, n) = (out.shape[0], out.shape[1]);
                let gam = &self.nodes[gamma.0].value.data;
                let mut sum_g = vec![0.0; n];
                let mut sum_gx = vec![0.0; n];
                let mut gx = vec![0.0; b * n];
                for r in 0..b {
                    for c in 0..n {
                        let i = r * n + c;
                        sum_g[c] += g.data[i];
                        sum_gx[c] += g.data[i] * xhat[i];
                        gx[i] = g.data[i] * gam[c] * inv_std[c];
                    }
                }
                self.accumulate(grads, *x, Tensor { shape: vec![b, n], data: gx });
                self.accumulate(grads, *gamma, Tensor { shape: vec![1, n], data: sum_gx });
                self.accumulate(grads, *beta, Tensor { shape: vec![1, n], data: sum_g });
            }
            Op::ComplexMatMul { a, x } => {
                let av = &self.nodes[a.0].value;
                let (out_n, in_n) = (av.shape[1], av.shape[2]);
                let plane = out_n * in_n;
                let (are, aim) = av.data.split_at(plane);
                let b = g.shape[0];
                let (ow, iw) = (2 * out_n, 2 * in_n);
                let (gre, gim) = (&g.data[..], &g.data[out_n..]);
                if self.wants(*x) {
                    let mut gx = vec![0.0; b * iw];
                    // gx_re = g_re A_re + g_im A_im
                    gemm(b, out_n, in_n, 1.0, gre, ow, 1, are, in_n, 1, 0.0, &mut gx, iw, 1);
                    gemm(b, out_n, in_n, 1.0, gim, ow, 1, aim, in_n, 1, 1.0, &mut gx, iw, 1);
                    // gx_im = -g_re A_im + g_im A_re
                    let gxim = &mut gx[in_n..];
                    gemm(b, out_n, in_n, -1.0, gre, ow, 1, aim, in_n, 1, 0.0, gxim, iw, 1);
                    gemm(b, out_n, in_n, 1.0, gim, ow, 1, are, in_n, 1, 1.0, gxim, iw, 1);
                    self.accumulate(grads, *x, Tensor { shape: vec![b, iw], data: gx });
                }
                if self.wants(*a) {
                    let xv = &self.nodes[x.0].value.data;
                    let (xre, xim) = (&xv[..], &xv[in_n..]);
                    let mut ga = vec![0.0; 2 * plane];
                    {
                        let (gare, gaim) = ga.split_at_mut(plane);
                        // gA_re = g_re^T x_re + g_im^T x_im
                        gemm(out_n, b, in_n, 1.0, gre, 1, ow, xre, iw, 1, 0.0, gare, in_n, 1);
                        gemm(out_n, b, in_n, 1.0, gim, 1, ow, xim, iw, 1, 1.0, gare, in_n, 1);
                        // gA_im = -g_re^T x_im + g_im^T x_re
                        gemm(out_n, b, in_n, -1.0, gre, 1, ow, xim, iw, 1, 0.0, gaim, in_n, 1);
                        gemm(out_n, b, in_n, 1.0, gim, 1, ow, xre, iw, 1, 1.0, gaim, in_n, 1);
                    }
                    self.accumulate(grads, *a, Tensor { shape: av.shape.clone(), data: ga });
                }
            }
            Op::PhaseDiag { theta, x } => {
                let tv = &self.nodes[theta.0].value.data;
                let n = tv.len();
                let (b, w) = (g.shape[0], g.shape[1]);
                let (sin, cos): (Vec<f64>, Vec<f64>) = tv.iter().map(|t| t.sin_cos()).unzip();
                if self.wants(*x) {
                    let mut gx = vec![0.0; b * w];
                    for r in 0..b {
                        let row = r * w;
                        for i in 0..n {
                            let (gr, gi) = (g.data[row + i], g.data[row + n + i]);
                            gx[row + i] = cos[i] * gr + sin[i] * gi;
                            gx[row + n + i] = -sin[i] * gr + cos[i] * gi;
                        }
                    }
                    self.accumulate(grads, *x, Tensor { shape: vec![b, w], data: gx });
                }
                if self.wants(*theta) {
                    let mut gt = vec![0.0; n];
                    for r in 0..b {
                        let row = r * w;
                        for i in 0..n {
                            let (gr, gi) = (g.data[row + i], g.data[row + n + i]);
                            let (yr, yi) = (out.data[row + i], out.data[row + n + i]);
                            gt[i] += gi * yr - gr * yi;
                        }
                    }
                    self.accumulate(grads, *theta, Tensor { shape: vec![1, n], data: gt });
                }
            }
            Op::PowerNormalize { x, rms, eps } => {
                let xv = &self.nodes[x.0].value.data;
                let (b, w) = (g.shape[0], g.shape[1]);
                let n = w / 2;
                let bf = b as f64;
                // <g, x> per stream
                let mut dot = vec![0.0; n];
                for r in 0..b {
                    for i in 0..n {
                        dot[i] += g.data[r * w + i] * xv[r * w + i]
                            + g.data[r * w + n + i] * xv[r * w + n + i];
                    }
                }
                let mut gx = vec![0.0; b * w];
                for i in 0..n {
                    let d = rms[i] + eps;
                    let corr = if rms[i] > 0.0 {
                        dot[i] / (d * d * bf * rms[i])
                    } else {
                        0.0
                    };
                    for r in 0..b {
                        for k in [r * w + i, r * w + n + i] {
                            gx[k] = g.data[k] / d - corr * xv[k];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor { shape: vec![b, w], data: gx });
            }
        }
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Entries skipped because a perturbation moved a ReLU across its kink.
    pub skipped_kinks: usize,
}

/// Compares analytic gradients with central differences for every scalar of
/// every parameter.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, floor)`; the
/// floor keeps entries whose true gradient is at round-off level from
/// dominating the report.
pub fn grad_check<F>(
    params: &BTreeMap<String, Tensor>,
    h: f64,
    floor: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    if !(1e-8..=1e-4).contains(&h) {
        return Err(Error::InvalidArgument(format!("step h = {h:e} outside [1e-8, 1e-4]")));
    }
    let eval = |p: &BTreeMap<String, Tensor>| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let vars: BTreeMap<String, Var> =
            p.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect();
        let loss = build(&mut g, &vars)?;
        Ok((g.value(loss).data[0], g.relu_signature()))
    };

    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> = params
        .iter()
        .map(|(k, t)| (k.clone(), g.param(t.clone())))
        .collect();
    let loss = build(&mut g, &vars)?;
    let base_sig = g.relu_signature();
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut work = params.clone();
    for (name, t) in params {
        let analytic = grads
            .get(vars[name])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        for k in 0..t.len() {
            let orig = t.data[k];
            work.get_mut(name).unwrap().data[k] = orig + h;
            let (fp, sp) = eval(&work)?;
            work.get_mut(name).unwrap().data[k] = orig - h;
            let (fm, sm) = eval(&work)?;
            work.get_mut(name).unwrap().data[k] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((name.clone(), k));
                }
            }
        }
    }
    Ok(report)
}
