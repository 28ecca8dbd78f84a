//! Reverse-mode tape. Every differentiable op appends one node holding its output value and
//! whatever it needs for the backward sweep; `backward` replays the nodes in reverse once.

use super::kernels::{self, ConvGeometry};
use super::{check_finite, Real, Tensor};
use crate::error::{LitError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    AddSuffix(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    MeanAxis(Var, usize),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Select { x: Var, axis: usize, index: usize },
    Softmax { x: Var, axis: usize },
    Gelu(Var),
    Norm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F>, kind: NormKind },
    Im2col { x: Var, geom: ConvGeometry },
    DeformIm2col { x: Var, offsets: Var, geom: ConvGeometry },
    BilinearSample { x: Var, loc: Var },
    Gather { x: Var, index: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<F> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormKind {
    /// Statistics per row over the last axis.
    Layer,
    /// Statistics per channel (last axis) over all rows.
    BatchTrain,
    /// Fixed running statistics; `rstd` is per channel.
    BatchEval,
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased variance (the one used for normalization).
    pub var: Vec<F>,
    /// Number of values each channel was averaged over.
    pub count: usize,
}

/// Record of one forward computation. Not shareable across concurrent computations.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    consumed: bool,
    macs: u64,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), consumed: false, macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations executed by matmul-like ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor { shape: n.shape.clone(), data: n.value.clone(), requires_grad: false, grad: None }
    }

    /// Gradient of the last `backward` loss with respect to `v`, if one reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<F>> {
        self.grad(v).map(|g| Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: g.to_vec(),
            requires_grad: false,
            grad: None,
        })
    }

    /// Copy the gradient of `v` into `t.grad` (zeros when no gradient reached `v`).
    pub fn write_grad(&self, v: Var, t: &mut Tensor<F>) {
        let g = self.grad(v).map(<[F]>::to_vec).unwrap_or_else(|| vec![F::ZERO; t.numel()]);
        t.grad = Some(g);
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, value: Vec<F>, kind: Op<F>) -> Result<Var> {
        if self.consumed {
            return Err(LitError::State(format!("tape already consumed by backward; cannot record {op}")));
        }
        check_finite(op, &value)?;
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = match &kind {
            Op::Leaf => false,
            other => inputs(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { shape, value, op: kind, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a leaf; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.leaf_raw(t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.leaf_raw(t.shape.clone(), t.data.clone(), false)
    }

    pub(crate) fn leaf_raw(&mut self, shape: Vec<usize>, value: Vec<F>, requires_grad: bool) -> Var {
        assert!(!self.consumed, "tape already consumed by backward");
        self.nodes.push(Node { shape, value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(LitError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.push("add", self.shape(a).to_vec(), value, Op::Add(a, b))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (broadcast over leading axes).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(LitError::shape("add_broadcast", format!("{sb:?} is not a suffix of {sa:?}")));
        }
        let nb = self.value(b).len();
        let bv = self.value(b);
        let value = self.value(a).chunks(nb).flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y)).collect();
        self.push("add_broadcast", sa.to_vec(), value, Op::AddSuffix(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        self.push("mul", self.shape(a).to_vec(), value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| x * s).collect();
        self.push("scale", self.shape(a).to_vec(), value, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(LitError::shape("mean_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let x = self.value(a);
        let inv = F::ONE / F::from_f64(len as f64);
        let mut out = vec![F::ZERO; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push("mean_axis", out_shape, out, Op::MeanAxis(a, axis))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(LitError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::ZERO; m * n];
        kernels::gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// Batched matmul `[B×m×k] · [B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(LitError::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::ZERO; bt * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..bt {
            kernels::gemm_nn(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.macs += (bt * m * k * n) as u64;
        self.push("bmm", vec![bt, m, n], out, Op::Bmm(a, b))
    }

    /// `x[..×Cin] · w[Cin×Cout] + b[Cout]` applied to every row of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let cin = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != cin {
            return Err(LitError::shape("linear", format!("input {sx:?}, weight {sw:?}")));
        }
        let cout = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(LitError::shape("linear", format!("bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / cin;
        let mut out = vec![F::ZERO; rows * cout];
        kernels::gemm_nn(self.value(x), self.value(w), &mut out, rows, cin, cout);
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(cout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        self.macs += (rows * cin * cout) as u64;
        let mut shape = sx;
        *shape.last_mut().unwrap() = cout;
        self.push("linear", shape, out, Op::Linear { x, w, b })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(LitError::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let value = self.value(a).to_vec();
        self.push("reshape", shape.to_vec(), value, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&i| i >= shape.len() || std::mem::replace(&mut seen[i], true))
        {
            return Err(LitError::shape("permute", format!("axes {axes:?} for {shape:?}")));
        }
        let value = kernels::permute(self.value(a), &shape, axes);
        let out_shape = axes.iter().map(|&i| shape[i]).collect();
        self.push("permute", out_shape, value, Op::Permute(a, axes.to_vec()))
    }

    /// Take index `index` along `axis`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(LitError::shape("select", format!("axis {axis} index {index} for {shape:?}")));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let x = self.value(a);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let s = (o * len + index) * inner;
            out.extend_from_slice(&x[s..s + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push("select", out_shape, out, Op::Select { x: a, axis, index })
    }

    /// Numerically stable softmax along `axis` (max subtraction always applied).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(LitError::shape("softmax", format!("axis {axis} for {shape:?}")));
        }
        check_finite("softmax input", self.value(a))?;
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let x = self.value(a);
        let mut out = vec![F::ZERO; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut m = x[at(0)];
                for l in 1..len {
                    m = m.max(x[at(l)]);
                }
                let mut z = F::ZERO;
                for l in 0..len {
                    let e = (x[at(l)] - m).exp();
                    out[at(l)] = e;
                    z += e;
                }
                let inv = F::ONE / z;
                for l in 0..len {
                    out[at(l)] *= inv;
                }
            }
        }
        self.push("softmax", shape, out, Op::Softmax { x: a, axis })
    }

    /// Exact GELU, `x·Φ(x)` with the erf-based normal CDF.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push("gelu", self.shape(a).to_vec(), value, Op::Gelu(a))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        self.check_affine("layer_norm", gamma, beta, c)?;
        let xv = self.value(x);
        let rows = xv.len() / c;
        let inv_c = F::ONE / F::from_f64(c as f64);
        let mut xhat = vec![F::ZERO; xv.len()];
        let mut rstd = vec![F::ZERO; rows];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<F>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_c;
            let rs = F::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for (h, &v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
        }
        let out = affine(&xhat, self.value(gamma), self.value(beta));
        self.push("layer_norm", shape, out, Op::Norm { x, gamma, beta, xhat, rstd, kind: NormKind::Layer })
    }

    /// Batch normalization with batch statistics over every axis but the last.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<(Var, BatchStats<F>)> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        self.check_affine("batch_norm", gamma, beta, c)?;
        let xv = self.value(x);
        let rows = xv.len() / c;
        let inv = F::ONE / F::from_f64(rows as f64);
        let mut mean = vec![F::ZERO; c];
        for row in xv.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv);
        let mut var = vec![F::ZERO; c];
        for row in xv.chunks(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s *= inv);
        let rstd: Vec<F> = var.iter().map(|&v| F::ONE / (v + eps).sqrt()).collect();
        let xhat = normalize_channels(xv, &mean, &rstd);
        let out = affine(&xhat, self.value(gamma), self.value(beta));
        let var_out =
            self.push("batch_norm", shape, out, Op::Norm { x, gamma, beta, xhat, rstd, kind: NormKind::BatchTrain })?;
        Ok((var_out, BatchStats { mean, var, count: rows }))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
        eps: F,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        self.check_affine("batch_norm", gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(LitError::shape("batch_norm", "running statistics extent"));
        }
        let rstd: Vec<F> = running_var.iter().map(|&v| F::ONE / (v + eps).sqrt()).collect();
        let xhat = normalize_channels(self.value(x), running_mean, &rstd);
        let out = affine(&xhat, self.value(gamma), self.value(beta));
        self.push("batch_norm", shape, out, Op::Norm { x, gamma, beta, xhat, rstd, kind: NormKind::BatchEval })
    }

    fn check_affine(&self, op: &'static str, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(LitError::shape(
                op,
                format!("affine {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok(())
    }

    /// Unfold `x[N×H×W×C]` into convolution columns `[N×Ho×Wo×(K·K·C)]`.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.geometry("im2col", x, kernel, stride, padding)?;
        let cols = kernels::im2col(self.value(x), &geom);
        self.push(
            "im2col",
            vec![geom.batch, geom.out_height, geom.out_width, geom.col_width()],
            cols,
            Op::Im2col { x, geom },
        )
    }

    /// Deformable unfold. `offsets[N×Ho×Wo×2KK]` holds (Δy, Δx) per tap in row-major tap order.
    pub fn deform_im2col(&mut self, x: Var, offsets: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.geometry("deform_im2col", x, kernel, stride, padding)?;
        let want = [geom.batch, geom.out_height, geom.out_width, 2 * geom.taps()];
        if self.shape(offsets) != want {
            return Err(LitError::shape(
                "deform_im2col",
                format!("offsets {:?}, expected {want:?}", self.shape(offsets)),
            ));
        }
        check_finite("deform_im2col offsets", self.value(offsets))?;
        let cols = kernels::deform_im2col(self.value(x), self.value(offsets), &geom);
        self.push(
            "deform_im2col",
            vec![geom.batch, geom.out_height, geom.out_width, geom.col_width()],
            cols,
            Op::DeformIm2col { x, offsets, geom },
        )
    }

    fn geometry(&self, op: &'static str, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<ConvGeometry> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(LitError::shape(op, format!("expected N×H×W×C, got {s:?}")));
        }
        if stride == 0 {
            return Err(LitError::shape(op, "stride must be at least 1"));
        }
        ConvGeometry::new(s[0], s[1], s[2], s[3], kernel, stride, padding)
            .ok_or_else(|| LitError::shape(op, format!("kernel {kernel} stride {stride} padding {padding} on {s:?}")))
    }

    /// Bilinear sample of `x[H×W×C]` at `loc = [y, x]`; out-of-bounds corners contribute zero.
    pub fn bilinear_sample(&mut self, x: Var, loc: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(loc) != [2] {
            return Err(LitError::shape("bilinear_sample", format!("input {s:?}, loc {:?}", self.shape(loc))));
        }
        check_finite("bilinear_sample loc", self.value(loc))?;
        let l = self.value(loc);
        let mut out = vec![F::ZERO; s[2]];
        kernels::sample_into(self.value(x), s[0], s[1], s[2], l[0], l[1], &mut out);
        self.push("bilinear_sample", vec![s[2]], out, Op::BilinearSample { x, loc })
    }

    /// Flat gather: `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if index.iter().any(|&i| i >= n) || shape.iter().product::<usize>() != index.len() {
            return Err(LitError::shape("gather", format!("{} indices into {n}", index.len())));
        }
        let xv = self.value(x);
        let out = index.iter().map(|&i| xv[i]).collect();
        self.push("gather", shape.to_vec(), out, Op::Gather { x, index })
    }

    /// Mean softmax cross-entropy of `logits[N×K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(LitError::shape("cross_entropy", format!("logits {s:?}, {} labels", labels.len())));
        }
        let k = s[1];
        let x = self.value(logits);
        let mut probs = vec![F::ZERO; x.len()];
        let mut loss = F::ZERO;
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(row[0], F::max);
            let z: F = row.iter().map(|&v| (v - m).exp()).sum();
            let lz = z.ln();
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - m - lz).exp();
            }
            loss += lz + m - row[label];
        }
        loss = loss / F::from_f64(labels.len() as f64);
        self.push("cross_entropy", vec![1], vec![loss], Op::CrossEntropy { logits, labels: labels.to_vec(), probs })
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape: further ops or a second
    /// backward are state errors.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(LitError::State("tape already consumed by backward".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(LitError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].shape),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if let Some(gv) = g {
                check_finite("backward", gv)?;
            }
            if !self.nodes[i].needs_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        accumulate(grads, v, g.iter().copied());
                    }
                }
            }
            Op::AddSuffix(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.iter().copied());
                }
                if wants(*b) {
                    let nb = self.nodes[b.0].value.len();
                    let mut gb = vec![F::ZERO; nb];
                    for row in g.chunks(nb) {
                        for (d, &s) in gb.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    accumulate(grads, *a, g.iter().zip(bv).map(|(&d, &y)| d * y));
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().zip(av).map(|(&d, &x)| d * x));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, g.iter().map(|&d| d * s));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, std::iter::repeat_n(g[0], n));
            }
            Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = kernels::axis_split(self.shape(*a), *axis);
                let inv = F::ONE / F::from_f64(len as f64);
                let mut ga = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        ga.extend(g[o * inner..(o + 1) * inner].iter().map(|&d| d * inv));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let mut ga = vec![F::ZERO; m * k];
                    kernels::gemm_nt(g, self.value(*b), &mut ga, m, n, k);
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![F::ZERO; k * n];
                    kernels::gemm_tn(self.value(*a), g, &mut gb, k, m, n);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let mut ga = vec![F::ZERO; bt * m * k];
                    for t in 0..bt {
                        kernels::gemm_nt(
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![F::ZERO; bt * k * n];
                    for t in 0..bt {
                        kernels::gemm_tn(
                            &av[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[t * k * n..(t + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (cin, cout) = (sw[0], sw[1]);
                let rows = g.len() / cout;
                if wants(*x) {
                    let mut gx = vec![F::ZERO; rows * cin];
                    kernels::gemm_nt(g, self.value(*w), &mut gx, rows, cout, cin);
                    accumulate(grads, *x, gx);
                }
                if wants(*w) {
                    let mut gw = vec![F::ZERO; cin * cout];
                    kernels::gemm_tn(self.value(*x), g, &mut gw, cin, rows, cout);
                    accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let mut gb = vec![F::ZERO; cout];
                        for row in g.chunks(cout) {
                            for (d, &s) in gb.iter_mut().zip(row) {
                                *d += s;
                            }
                        }
                        accumulate(grads, *b, gb);
                    }
                }
            }
            Op::Reshape(a) => accumulate(grads, *a, g.iter().copied()),
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                accumulate(grads, *a, kernels::permute(g, &node.shape, &inverse));
            }
            Op::Select { x, axis, index } => {
                let (outer, len, inner) = kernels::axis_split(self.shape(*x), *axis);
                let mut gx = vec![F::ZERO; outer * len * inner];
                for o in 0..outer {
                    let d = (o * len + index) * inner;
                    gx[d..d + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                accumulate(grads, *x, gx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::axis_split(&node.shape, *axis);
                let y = &node.value;
                let mut gx = vec![F::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: F = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                accumulate(grads, *a, g.iter().zip(xv).map(|(&d, &x)| d * gelu_grad(x)));
            }
            Op::Norm { x, gamma, beta, xhat, rstd, kind } => {
                let gam = self.value(*gamma);
                let c = gam.len();
                if wants(*gamma) {
                    let mut gg = vec![F::ZERO; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, &s), &h) in gg.iter_mut().zip(gr).zip(hr) {
                            *d += s * h;
                        }
                    }
                    accumulate(grads, *gamma, gg);
                }
                if wants(*beta) {
                    let mut gb = vec![F::ZERO; c];
                    for gr in g.chunks(c) {
                        for (d, &s) in gb.iter_mut().zip(gr) {
                            *d += s;
                        }
                    }
                    accumulate(grads, *beta, gb);
                }
                if wants(*x) {
                    let gx = match kind {
                        NormKind::Layer => layer_norm_dx(g, xhat, rstd, gam),
                        NormKind::BatchTrain => batch_norm_dx(g, xhat, rstd, gam),
                        NormKind::BatchEval => g
                            .chunks(c)
                            .flat_map(|row| row.iter().zip(gam).zip(rstd).map(|((&d, &gm), &r)| d * gm * r))
                            .collect(),
                    };
                    accumulate(grads, *x, gx);
                }
            }
            Op::Im2col { x, geom } => {
                let mut gx = vec![F::ZERO; self.value(*x).len()];
                kernels::col2im(g, geom, &mut gx);
                accumulate(grads, *x, gx);
            }
            Op::DeformIm2col { x, offsets, geom } => {
                let xv = self.value(*x);
                let ov = self.value(*offsets);
                let mut doff = vec![F::ZERO; ov.len()];
                if wants(*x) {
                    let mut gx = vec![F::ZERO; xv.len()];
                    kernels::deform_col2im(xv, ov, g, geom, Some(&mut gx), &mut doff);
                    accumulate(grads, *x, gx);
                } else {
                    kernels::deform_col2im(xv, ov, g, geom, None, &mut doff);
                }
                if wants(*offsets) {
                    accumulate(grads, *offsets, doff);
                }
            }
            Op::BilinearSample { x, loc } => {
                let s = self.shape(*x);
                let l = self.value(*loc);
                let mut gx = vec![F::ZERO; self.value(*x).len()];
                let (gy, gxl) =
                    kernels::sample_backward(self.value(*x), s[0], s[1], s[2], l[0], l[1], g, Some(&mut gx));
                if wants(*x) {
                    accumulate(grads, *x, gx);
                }
                if wants(*loc) {
                    accumulate(grads, *loc, [gy, gxl]);
                }
            }
            Op::Gather { x, index } => {
                let mut gx = vec![F::ZERO; self.value(*x).len()];
                for (&i, &d) in index.iter().zip(g) {
                    gx[i] += d;
                }
                accumulate(grads, *x, gx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / F::from_f64(labels.len() as f64);
                let mut gl: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    gl[r * k + label] -= scale;
                }
                accumulate(grads, *logits, gl);
            }
        }
    }
}

fn inputs<F>(op: &Op<F>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::AddSuffix(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Bmm(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _) | Op::Sum(a) | Op::MeanAxis(a, _) | Op::Reshape(a) | Op::Permute(a, _) | Op::Gelu(a) => {
            vec![*a]
        }
        Op::Select { x, .. } | Op::Softmax { x, .. } | Op::Im2col { x, .. } | Op::Gather { x, .. } => {
            vec![*x]
        }
        Op::Linear { x, w, b } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::Norm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::DeformIm2col { x, offsets, .. } => vec![*x, *offsets],
        Op::BilinearSample { x, loc } => vec![*x, *loc],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, g: impl IntoIterator<Item = F>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(g) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(g.into_iter().collect()),
    }
}

fn affine<F: Real>(xhat: &[F], gamma: &[F], beta: &[F]) -> Vec<F> {
    let c = gamma.len();
    xhat.chunks(c).flat_map(|row| row.iter().zip(gamma).zip(beta).map(|((&h, &g), &b)| h * g + b)).collect()
}

fn normalize_channels<F: Real>(x: &[F], mean: &[F], rstd: &[F]) -> Vec<F> {
    let c = mean.len();
    x.chunks(c).flat_map(|row| row.iter().zip(mean).zip(rstd).map(|((&v, &m), &r)| (v - m) * r)).collect()
}

fn layer_norm_dx<F: Real>(g: &[F], xhat: &[F], rstd: &[F], gamma: &[F]) -> Vec<F> {
    let c = gamma.len();
    let inv_c = F::ONE / F::from_f64(c as f64);
    let mut gx = vec![F::ZERO; g.len()];
    for (r, &rs) in rstd.iter().enumerate() {
        let gr = &g[r * c..(r + 1) * c];
        let hr = &xhat[r * c..(r + 1) * c];
        let mut mean_d = F::ZERO;
        let mut mean_dh = F::ZERO;
        for j in 0..c {
            let d = gr[j] * gamma[j];
            mean_d += d;
            mean_dh += d * hr[j];
        }
        mean_d *= inv_c;
        mean_dh *= inv_c;
        for j in 0..c {
            gx[r * c + j] = rs * (gr[j] * gamma[j] - mean_d - hr[j] * mean_dh);
        }
    }
    gx
}

fn batch_norm_dx<F: Real>(g: &[F], xhat: &[F], rstd: &[F], gamma: &[F]) -> Vec<F> {
    let c = gamma.len();
    let rows = g.len() / c;
    let inv = F::ONE / F::from_f64(rows as f64);
    let mut mean_d = vec![F::ZERO; c];
    let mut mean_dh = vec![F::ZERO; c];
    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
        for j in 0..c {
            let d = gr[j] * gamma[j];
            mean_d[j] += d;
            mean_dh[j] += d * hr[j];
        }
    }
    mean_d.iter_mut().for_each(|v| *v *= inv);
    mean_dh.iter_mut().for_each(|v| *v *= inv);
    let mut gx = vec![F::ZERO; g.len()];
    for (r, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
        for j in 0..c {
            gx[r * c + j] = rstd[j] * (gr[j] * gamma[j] - mean_d[j] - hr[j] * mean_dh[j]);
        }
    }
    gx
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub(crate) fn gelu<F: Real>(x: F) -> F {
    let half = F::from_f64(0.5);
    half * x * (F::ONE + (x * F::from_f64(FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<F: Real>(x: F) -> F {
    let half = F::from_f64(0.5);
    let cdf = half * (F::ONE + (x * F::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = F::from_f64(FRAC_1_SQRT_2PI) * (-(x * x) * half).exp();
    cdf + x * pdf
}
