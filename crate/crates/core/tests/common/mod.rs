#![allow(dead_code)]

use lit_core::rng::seeded;
use lit_core::{Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -2.0, 2.0, &mut seeded(seed))
}

/// `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Contract a non-scalar output with fixed random weights so every output element matters.
pub fn contract(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(tape.shape(v), -1.0, 1.0, &mut seeded(seed ^ 0xfeed));
    let w = tape.constant(&w);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

/// Largest relative error between tape gradients and central differences over every input
/// element. `build` maps the recorded inputs to a scalar loss.
pub fn grad_check<G>(inputs: &[Tensor<f64>], build: G) -> f64
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let loss = build(&mut tape, &vars).expect("forward");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> =
        vars.iter().zip(inputs).map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec)).collect();

    let eval = |ins: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x)).collect();
        let l = build(&mut t, &vs).expect("forward");
        t.value(l)[0]
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Literal convolution: `out[n,oy,ox,o] = b[o] + Σ_{ky,kx,c} x[n, oy·s−p+ky, ox·s−p+kx, c] · w[ky,kx,c,o]`.
pub fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<usize>, Vec<f64>) {
    let (n, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, cout) = (w.shape()[0], w.shape()[3]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * ho * wo * cout];
    for b_ in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for o in 0..cout {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for c in 0..cin {
                                acc += x.get(&[b_, iy as usize, ix as usize, c]) * w.get(&[ky, kx, c, o]);
                            }
                        }
                    }
                    out[((b_ * ho + oy) * wo + ox) * cout + o] = acc;
                }
            }
        }
    }
    (vec![n, ho, wo, cout], out)
}

/// Scalar bilinear interpolation with zero outside the grid.
pub fn bilinear_oracle(x: &Tensor<f64>, n: usize, y: f64, xx: f64, c: usize) -> f64 {
    let (h, w) = (x.shape()[1] as isize, x.shape()[2] as isize);
    let (y0, x0) = (y.floor(), xx.floor());
    let (ly, lx) = (y - y0, xx - x0);
    let mut acc = 0.0;
    for (dy, dx, wt) in
        [(0, 0, (1.0 - ly) * (1.0 - lx)), (0, 1, (1.0 - ly) * lx), (1, 0, ly * (1.0 - lx)), (1, 1, ly * lx)]
    {
        let (iy, ix) = (y0 as isize + dy, x0 as isize + dx);
        if iy >= 0 && ix >= 0 && iy < h && ix < w {
            acc += wt * x.get(&[n, iy as usize, ix as usize, c]);
        }
    }
    acc
}

/// Fill every learnable parameter with uniform values in `[-scale, scale]`.
pub fn randomize<F: lit_core::Real>(store: &mut lit_core::ParamStore<F>, scale: f64, seed: u64) {
    let mut rng = seeded(seed);
    for (_, t) in store.iter_mut().filter(|(_, t)| t.requires_grad) {
        let r: Tensor<F> = Tensor::uniform(t.shape(), -scale, scale, &mut rng);
        t.data_mut().copy_from_slice(r.data());
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Row-wise layer norm of `x[rows×c]` (biased variance).
pub fn layer_norm_rows(x: &[f64], c: usize, g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for (j, v) in row.iter().enumerate() {
            out.push((v - mean) / (var + eps).sqrt() * g[j] + b[j]);
        }
    }
    out
}

/// `y[r,o] = b[o] + Σ_i x[r,i]·w[i,o]` with `w[in×out]`.
pub fn linear_rows(x: &[f64], w: &[f64], b: &[f64], in_dim: usize, out_dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() / in_dim * out_dim);
    for row in x.chunks(in_dim) {
        for o in 0..out_dim {
            let mut acc = b[o];
            for i in 0..in_dim {
                acc += row[i] * w[i * out_dim + o];
            }
            out.push(acc);
        }
    }
    out
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Per-head attention over one sample `x[T×C]`, written without fused tensors. The qkv
/// projection's output column for (slot s, head h, dim j) is `s·H·D + h·D + j`.
/// `bias[h][i][j]` is added to the scaled logits; `probs` replaces softmax when given.
pub struct MsaOracle<'a> {
    pub c: usize,
    pub heads: usize,
    pub d: usize,
    pub out: usize,
    pub wqkv: &'a [f64],
    pub bqkv: &'a [f64],
    pub wproj: &'a [f64],
    pub bproj: &'a [f64],
}

impl MsaOracle<'_> {
    pub fn run(
        &self,
        x: &[f64],
        bias: Option<&dyn Fn(usize, usize, usize) -> f64>,
        probs: Option<&dyn Fn(usize, usize, usize) -> f64>,
    ) -> Vec<f64> {
        let t = x.len() / self.c;
        let hd = self.heads * self.d;
        let qkv = linear_rows(x, self.wqkv, self.bqkv, self.c, 3 * hd);
        let at = |tok: usize, s: usize, h: usize, j: usize| qkv[tok * 3 * hd + s * hd + h * self.d + j];
        let mut concat = vec![0.0; t * hd];
        for h in 0..self.heads {
            for i in 0..t {
                let p = match probs {
                    Some(f) => (0..t).map(|j| f(h, i, j)).collect::<Vec<_>>(),
                    None => {
                        let logits: Vec<f64> = (0..t)
                            .map(|j| {
                                let dot: f64 = (0..self.d).map(|e| at(i, 0, h, e) * at(j, 1, h, e)).sum();
                                dot / (self.d as f64).sqrt() + bias.map_or(0.0, |b| b(h, i, j))
                            })
                            .collect();
                        softmax_row(&logits)
                    }
                };
                for e in 0..self.d {
                    concat[i * hd + h * self.d + e] = (0..t).map(|j| p[j] * at(j, 2, h, e)).sum();
                }
            }
        }
        linear_rows(&concat, self.wproj, self.bproj, hd, self.out)
    }
}

pub type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

/// Gradient check of every differentiable tape op: `(op, max relative error)`.
pub fn op_gradient_sweep() -> Vec<(&'static str, f64)> {
    let cases: Vec<OpCase> = vec![
        (
            "add",
            vec![rand(&[2, 3], 1), rand(&[2, 3], 2)],
            Box::new(|tp, v| {
                let y = tp.add(v[0], v[1])?;
                contract(tp, y, 1)
            }),
        ),
        (
            "add_broadcast",
            vec![rand(&[2, 3, 4], 3), rand(&[3, 4], 4)],
            Box::new(|tp, v| {
                let y = tp.add_broadcast(v[0], v[1])?;
                contract(tp, y, 2)
            }),
        ),
        (
            "mul",
            vec![rand(&[5], 5), rand(&[5], 6)],
            Box::new(|tp, v| {
                let y = tp.mul(v[0], v[1])?;
                contract(tp, y, 3)
            }),
        ),
        (
            "scale",
            vec![rand(&[4], 7)],
            Box::new(|tp, v| {
                let y = tp.scale(v[0], -1.7)?;
                contract(tp, y, 4)
            }),
        ),
        (
            "mean_axis",
            vec![rand(&[2, 3, 4], 8)],
            Box::new(|tp, v| {
                let y = tp.mean_axis(v[0], 1)?;
                contract(tp, y, 5)
            }),
        ),
        (
            "matmul",
            vec![rand(&[3, 4], 9), rand(&[4, 2], 10)],
            Box::new(|tp, v| {
                let y = tp.matmul(v[0], v[1])?;
                contract(tp, y, 6)
            }),
        ),
        (
            "bmm",
            vec![rand(&[2, 3, 4], 11), rand(&[2, 4, 3], 12)],
            Box::new(|tp, v| {
                let y = tp.bmm(v[0], v[1])?;
                contract(tp, y, 7)
            }),
        ),
        (
            "linear",
            vec![rand(&[2, 3, 4], 13), rand(&[4, 5], 14), rand(&[5], 15)],
            Box::new(|tp, v| {
                let y = tp.linear(v[0], v[1], Some(v[2]))?;
                contract(tp, y, 8)
            }),
        ),
        (
            "reshape+permute",
            vec![rand(&[2, 3, 4], 16)],
            Box::new(|tp, v| {
                let y = tp.permute(v[0], &[2, 0, 1])?;
                let y = tp.reshape(y, &[8, 3])?;
                contract(tp, y, 9)
            }),
        ),
        (
            "select",
            vec![rand(&[3, 2, 4], 17)],
            Box::new(|tp, v| {
                let y = tp.select(v[0], 1, 1)?;
                contract(tp, y, 10)
            }),
        ),
        (
            "softmax",
            vec![rand(&[3, 5], 18)],
            Box::new(|tp, v| {
                let y = tp.softmax(v[0], 1)?;
                contract(tp, y, 11)
            }),
        ),
        (
            "gelu",
            vec![rand(&[10], 19)],
            Box::new(|tp, v| {
                let y = tp.gelu(v[0])?;
                contract(tp, y, 12)
            }),
        ),
        (
            "layer_norm",
            vec![rand(&[3, 6], 20), rand(&[6], 21), rand(&[6], 22)],
            Box::new(|tp, v| {
                let y = tp.layer_norm(v[0], v[1], v[2], 1e-5)?;
                contract(tp, y, 13)
            }),
        ),
        (
            "batch_norm_train",
            vec![rand(&[2, 2, 3, 4], 23), rand(&[4], 24), rand(&[4], 25)],
            Box::new(|tp, v| {
                let (y, _) = tp.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                contract(tp, y, 14)
            }),
        ),
        (
            "batch_norm_eval",
            vec![rand(&[2, 2, 2, 3], 26), rand(&[3], 27), rand(&[3], 28)],
            Box::new(|tp, v| {
                let y = tp.batch_norm_eval(v[0], v[1], v[2], &[0.3, -0.2, 0.1], &[0.5, 1.5, 2.0], 1e-5)?;
                contract(tp, y, 15)
            }),
        ),
        (
            "conv2d",
            vec![rand(&[2, 5, 4, 2], 29), rand(&[3, 3, 2, 3], 30), rand(&[3], 31)],
            Box::new(|tp, v| {
                let y = tp.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                contract(tp, y, 16)
            }),
        ),
        (
            "deform_im2col",
            vec![rand(&[1, 5, 5, 2], 32), Tensor::uniform(&[1, 2, 2, 8], -0.9, 0.9, &mut seeded(33))],
            Box::new(|tp, v| {
                let y = tp.deform_im2col(v[0], v[1], 2, 2, 0)?;
                contract(tp, y, 17)
            }),
        ),
        (
            "im2col",
            vec![rand(&[2, 4, 5, 2], 36)],
            Box::new(|tp, v| {
                let y = tp.im2col(v[0], 3, 2, 1)?;
                contract(tp, y, 19)
            }),
        ),
        (
            "bilinear_sample",
            vec![rand(&[4, 5, 2], 37), Tensor::from_f64(&[2], &[1.3, 2.6]).unwrap()],
            Box::new(|tp, v| {
                let y = tp.bilinear_sample(v[0], v[1])?;
                contract(tp, y, 20)
            }),
        ),
        (
            "deformable_conv",
            vec![
                rand(&[2, 4, 4, 3], 38),
                Tensor::uniform(&[2, 2, 2, 8], -0.9, 0.9, &mut seeded(39)),
                rand(&[2, 2, 3, 4], 40),
                rand(&[4], 41),
            ],
            Box::new(|tp, v| {
                let y = tp.deformable_conv(v[0], v[1], v[2], Some(v[3]), 2, 0)?;
                contract(tp, y, 21)
            }),
        ),
        (
            "gather",
            vec![rand(&[2, 5], 34)],
            Box::new(|tp, v| {
                let y = tp.gather(v[0], vec![0, 9, 3, 3, 7, 1], &[2, 3])?;
                contract(tp, y, 18)
            }),
        ),
        ("cross_entropy", vec![rand(&[4, 6], 35)], Box::new(|tp, v| tp.cross_entropy(v[0], &[0, 5, 2, 2]))),
    ];
    cases.into_iter().map(|(name, inputs, f)| (name, grad_check(&inputs, f.as_ref()))).collect()
}

pub fn deform(
    x: &Tensor<f64>,
    off: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (xv, ov, wv, bv) = (tape.leaf(x), tape.leaf(off), tape.leaf(w), tape.leaf(b));
    let y = tape.deformable_conv(xv, ov, wv, Some(bv), stride, pad).unwrap();
    tape.tensor(y)
}

pub fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
    let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
    tape.tensor(y)
}

pub fn out_side(h: usize, k: usize, s: usize, p: usize) -> usize {
    (h + 2 * p - k) / s + 1
}

/// out[n,p,o] = b[o] + Σ_{k,c} w[k,c,o] · x̃(n, p·s − pad + g(k) + Δ(n,p,k), c), x̃ bilinear with zero outside.
pub fn deform_oracle(
    x: &Tensor<f64>,
    off: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (n, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, cout) = (w.shape()[0], w.shape()[3]);
    let (ho, wo) = (out_side(h, k, stride, pad), out_side(wd, k, stride, pad));
    let mut out = Vec::with_capacity(n * ho * wo * cout);
    for bi in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for o in 0..cout {
                    let mut acc = b[o];
                    for ky in 0..k {
                        for kx in 0..k {
                            let tap = ky * k + kx;
                            let dy = off.get(&[bi, oy, ox, 2 * tap]);
                            let dx = off.get(&[bi, oy, ox, 2 * tap + 1]);
                            let sy = (oy * stride + ky) as f64 - pad as f64 + dy;
                            let sx = (ox * stride + kx) as f64 - pad as f64 + dx;
                            for c in 0..cin {
                                acc += w.get(&[ky, kx, c, o]) * bilinear_oracle(x, bi, sy, sx, c);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub const GEOMETRIES: [(usize, usize, usize, usize); 6] = [
    // (side, kernel, stride, pad)
    (5, 1, 1, 0),
    (6, 2, 2, 0),
    (7, 3, 1, 1),
    (8, 3, 2, 1),
    (6, 2, 1, 0),
    (4, 3, 1, 0),
];
