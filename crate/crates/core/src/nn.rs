//! MLP blocks, transformer blocks, patch embedding and positional encodings.
//!
//! Block structs are descriptors: they carry dimensions and a name prefix, while the
//! tensors live in a [`ParamStore`]. `init` registers a block's tensors, `forward` binds them
//! through a [`Forward`] context.

use rand::Rng;

use crate::error::{LitError, Result};
use crate::params::{BufferUpdate, Forward, Mode, ParamStore};
use crate::tensor::{Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Fully connected layer `x·W + b` with `W[in×out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear { prefix: prefix.into(), in_dim, out_dim }
    }

    pub fn weight(&self) -> String {
        join(&self.prefix, "weight")
    }

    pub fn bias(&self) -> String {
        join(&self.prefix, "bias")
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<F>, rng: &mut R) -> Result<()> {
        store.add_param(self.weight(), Tensor::trunc_normal(&[self.in_dim, self.out_dim], INIT_STD, rng))?;
        store.add_param(self.bias(), Tensor::zeros(&[self.out_dim]))
    }

    pub fn forward<F: Real>(&self, ctx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight())?;
        let b = ctx.param(&self.bias())?;
        ctx.tape.linear(x, w, Some(b))
    }
}

/// Layer norm over the channel axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub prefix: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        LayerNorm { prefix: prefix.into(), dim }
    }

    pub fn init<F: Real>(&self, store: &mut ParamStore<F>) -> Result<()> {
        store.add_param(join(&self.prefix, "weight"), Tensor::full(&[self.dim], F::ONE))?;
        store.add_param(join(&self.prefix, "bias"), Tensor::zeros(&[self.dim]))
    }

    pub fn forward<F: Real>(&self, ctx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let g = ctx.param(&join(&self.prefix, "weight"))?;
        let b = ctx.param(&join(&self.prefix, "bias"))?;
        ctx.tape.layer_norm(x, g, b, F::from_f64(LN_EPS))
    }
}

/// Batch norm over all axes but the channel axis, with running statistics.
///
/// `num_batches_tracked == 0` marks uninitialized running statistics; eval mode refuses them.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub prefix: String,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        BatchNorm { prefix: prefix.into(), dim }
    }

    pub fn running_mean(&self) -> String {
        join(&self.prefix, "running_mean")
    }

    pub fn running_var(&self) -> String {
        join(&self.prefix, "running_var")
    }

    pub fn tracked(&self) -> String {
        join(&self.prefix, "num_batches_tracked")
    }

    pub fn init<F: Real>(&self, store: &mut ParamStore<F>) -> Result<()> {
        store.add_param(join(&self.prefix, "weight"), Tensor::full(&[self.dim], F::ONE))?;
        store.add_param(join(&self.prefix, "bias"), Tensor::zeros(&[self.dim]))?;
        store.add_buffer(self.running_mean(), Tensor::zeros(&[self.dim]))?;
        store.add_buffer(self.running_var(), Tensor::full(&[self.dim], F::ONE))?;
        store.add_buffer(self.tracked(), Tensor::zeros(&[1]))
    }

    /// Install explicit running statistics so eval mode is usable without a training step.
    pub fn seed_stats<F: Real>(&self, store: &mut ParamStore<F>, mean: &[F], var: &[F]) -> Result<()> {
        store.get_mut(&self.running_mean())?.data_mut().copy_from_slice(mean);
        store.get_mut(&self.running_var())?.data_mut().copy_from_slice(var);
        store.get_mut(&self.tracked())?.data_mut()[0] = F::ONE;
        Ok(())
    }

    pub fn forward<F: Real>(&self, ctx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let g = ctx.param(&join(&self.prefix, "weight"))?;
        let b = ctx.param(&join(&self.prefix, "bias"))?;
        let eps = F::from_f64(BN_EPS);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, g, b, eps)?;
                let rm = ctx.buffer(&self.running_mean())?.data();
                let rv = ctx.buffer(&self.running_var())?.data();
                let tracked = ctx.buffer(&self.tracked())?.data()[0];
                let mom = F::from_f64(BN_MOMENTUM);
                let keep = F::ONE - mom;
                let unbias =
                    if stats.count > 1 { F::from_f64(stats.count as f64 / (stats.count - 1) as f64) } else { F::ONE };
                let new_mean = rm.iter().zip(&stats.mean).map(|(&r, &m)| keep * r + mom * m).collect();
                let new_var = rv.iter().zip(&stats.var).map(|(&r, &v)| keep * r + mom * v * unbias).collect();
                ctx.buffer_updates.push(BufferUpdate { name: self.running_mean(), value: new_mean });
                ctx.buffer_updates.push(BufferUpdate { name: self.running_var(), value: new_var });
                ctx.buffer_updates.push(BufferUpdate { name: self.tracked(), value: vec![tracked + F::ONE] });
                Ok(y)
            }
            Mode::Eval => {
                if ctx.buffer(&self.tracked())?.data()[0] == F::ZERO {
                    return Err(LitError::State(format!(
                        "{}: eval-mode batch norm before any training step (running statistics uninitialized)",
                        self.prefix
                    )));
                }
                let rm = ctx.buffer(&self.running_mean())?.data();
                let rv = ctx.buffer(&self.running_var())?.data();
                ctx.tape.batch_norm_eval(x, g, b, rm, rv, eps)
            }
        }
    }
}

/// Apply buffer updates collected during a training-mode forward.
pub fn apply_buffer_updates<F: Real>(store: &mut ParamStore<F>, updates: &[BufferUpdate<F>]) -> Result<()> {
    for u in updates {
        store.get_mut(&u.name)?.data_mut().copy_from_slice(&u.value);
    }
    Ok(())
}

/// Non-overlapping patch flattening plus a linear projection to the first stage width.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed {
    pub patch: usize,
    pub in_channels: usize,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new(prefix: &str, patch: usize, in_channels: usize, dim: usize) -> Self {
        PatchEmbed { patch, in_channels, proj: Linear::new(prefix, patch * patch * in_channels, dim) }
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<F>, rng: &mut R) -> Result<()> {
        self.proj.init(store, rng)
    }

    /// `[N×H×W×3] → ([N×T×C1], (H/P, W/P))`; each P×P×3 patch is flattened in (row, col, channel)
    /// order before projection.
    pub fn forward<F: Real>(&self, ctx: &mut Forward<'_, F>, images: Var) -> Result<(Var, (usize, usize))> {
        let s = ctx.tape.shape(images).to_vec();
        if s.len() != 4 || s[3] != self.in_channels {
            return Err(LitError::shape("patch_embed", format!("expected N×H×W×{}, got {s:?}", self.in_channels)));
        }
        if !s[1].is_multiple_of(self.patch) || !s[2].is_multiple_of(self.patch) {
            return Err(LitError::config(format!(
                "image extent {}×{} not divisible by patch size {}",
                s[1], s[2], self.patch
            )));
        }
        let (h, w) = (s[1] / self.patch, s[2] / self.patch);
        let cols = ctx.tape.im2col(images, self.patch, self.patch, 0)?;
        let tokens = self.proj.forward(ctx, cols)?;
        let t = ctx.tape.reshape(tokens, &[s[0], h * w, self.proj.out_dim])?;
        Ok((t, (h, w)))
    }
}

/// Token-wise residual MLP block: `x + fc2(gelu(fc1(LN(x))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpBlock {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpBlock {
    pub fn new(prefix: &str, dim: usize, expansion: usize) -> Self {
        MlpBlock {
            norm: LayerNorm::new(join(prefix, "norm"), dim),
            fc1: Linear::new(join(prefix, "mlp.fc1"), dim, dim * expansion),
            fc2: Linear::new(join(prefix, "mlp.fc2"), dim * expansion, dim),
        }
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<F>, rng: &mut R) -> Result<()> {
        self.norm.init(store)?;
        self.fc1.init(store, rng)?;
        self.fc2.init(store, rng)
    }

    pub fn forward<F: Real>(&self, ctx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let h = self.norm.forward(ctx, x)?;
        let h = self.fc1.forward(ctx, h)?;
        let h = ctx.tape.gelu(h)?;
        let h = self.fc2.forward(ctx, h)?;
        ctx.tape.add(x, h)
    }
}

/// Relative displacement index of every (query, key) pair on an `h×w` grid:
/// `(yi − yj + h − 1)·(2w − 1) + (xi − xj + w − 1)`.
pub fn relative_index(h: usize, w: usize) -> Vec<usize> {
    let t = h * w;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / w, i % w);
        for j in 0..t {
            let (yj, xj) = (j / w, j % w);
            idx.push((yi + h - 1 - yj) * (2 * w - 1) + (xi + w - 1 - xj));
        }
    }
    idx
}

/// Expand a `[heads × (2h−1)(2w−1)]` table into a `[heads × T × T]` bias.
pub fn relative_bias_lookup<F: Real>(
    tape: &mut crate::tensor::Tape<F>,
    table: Var,
    grid: (usize, usize),
) -> Result<Var> {
    let (h, w) = grid;
    let s = tape.shape(table).to_vec();
    let r = (2 * h - 1) * (2 * w - 1);
    if s.len() != 2 || s[1] != r {
        return Err(LitError::config(format!(
            "relative bias table {s:?} does not cover {r} displacements of a {h}×{w} grid"
        )));
    }
    let heads = s[0];
    let rel = relative_index(h, w);
    let t = h * w;
    let mut index = Vec::with_capacity(heads * t * t);
    for head in 0..heads {
        index.extend(rel.iter().map(|&k| head * r + k));
    }
    tape.gather(table, index, &[heads, t, t])
}

/// Multi-head self-attention with a fused qkv projection.
///
/// Standard transformer use has `head_dim = in_dim / heads` and `out_dim = in_dim`; the
/// attention-as-convolution construction uses other widths.
#[derive(Clone, Debug, PartialEq)]
pub struct Msa {
    pub prefix: String,
    pub in_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub out_dim: usize,
    /// Token grid of the relative-position bias table, when present.
    pub rel_grid: Option<(usize, usize)>,
    pub qkv: Linear,
    pub proj: Linear,
}

impl Msa {
    pub fn new(prefix: &str, dim: usize, heads: usize, rel_grid: Option<(usize, usize)>) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(LitError::config(format!("{prefix}: width {dim} not divisible by {heads} heads")));
        }
        Ok(Self::with_dims(prefix, dim, heads, dim / heads, dim, rel_grid))
    }

    pub fn with_dims(
        prefix: &str,
        in_dim: usize,
        heads: usize,
        head_dim: usize,
        out_dim: usize,
        rel_grid: Option<(usize, usize)>,
    ) -> Self {
        Msa {
            prefix: prefix.to_string(),
            in_dim,
            heads,
            head_dim,
            out_dim,
            rel_grid,
            qkv: Linear::new(join(prefix, "qkv"), in_dim, 3 * heads * head_dim),
            proj: Linear::new(join(prefix, "proj"), heads * head_dim, out_dim),
        }
    }

    pub fn rel_table(&self) -> String {
        join(&self.prefix, "rel_bias")
    }

    pub fn rel_table_len(&self) -> usize {
        self.rel_grid.map_or(0, |(h, w)| (2 * h - 1) * (2 * w - 1))
    }

    pub fn num_params(&self) -> usize {
        self.qkv.num_params() + self.proj.num_params() + self.heads * self.rel_table_len()
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<F>, rng: &mut R) -> Result<()> {
        self.qkv.init(store, rng)?;
        self.proj.init(store, rng)?;
        if self.rel_grid.is_some() {
            store.add_param(
                self.rel_table(),
                Tensor::trunc_normal(&[self.heads, self.rel_table_len()], INIT_STD, rng),
            )?;
        }
        Ok(())
    }

    /// Returns `(output [N×T×out], attention [N×heads×T×T])`. `attn_override`, when given,
    /// replaces the softmax probabilities; its rows must each sum to 1 within 1e-6.
    pub fn forward<F: Real>(
        &self,
        ctx: &mut Forward<'_, F>,
        x: Var,
        attn_override: Option<&Tensor<F>>,
    ) -> Result<(Var, Var)> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.in_dim {
            return Err(LitError::shape("msa", format!("expected N×T×{}, got {s:?}", self.in_dim)));
        }
        let (n, t) = (s[0], s[1]);
        let (h, d) = (self.heads, self.head_dim);
        if let Some((gh, gw)) = self.rel_grid {
            if gh * gw != t {
                return Err(LitError::config(format!(
                    "{}: {t} tokens but relative bias grid is {gh}×{gw}",
                    self.prefix
                )));
            }
        }
        let qkv = self.qkv.forward(ctx, x)?;
        let qkv = ctx.tape.reshape(qkv, &[n, t, 3, h, d])?;
        let qkv = ctx.tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let v = ctx.tape.select(qkv, 0, 2)?;

        let attn = match attn_override {
            Some(a) => {
                validate_attention(a, &[n, h, t, t])?;
                ctx.tape.constant(a)
            }
            None => {
                let q = ctx.tape.select(qkv, 0, 0)?;
                let k = ctx.tape.select(qkv, 0, 1)?;
                let q = ctx.tape.reshape(q, &[n * h, t, d])?;
                let kt = ctx.tape.permute(k, &[0, 1, 3, 2])?;
                let kt = ctx.tape.reshape(kt, &[n * h, d, t])?;
                let logits = ctx.tape.bmm(q, kt)?;
                let logits = ctx.tape.scale(logits, F::from_f64(1.0 / (d as f64).sqrt()))?;
                let mut logits = ctx.tape.reshape(logits, &[n, h, t, t])?;
                if let Some(grid) = self.rel_grid {
                    let table = ctx.param(&self.rel_table())?;
                    let bias = relative_bias_lookup(&mut ctx.tape, table, grid)?;
                    logits = ctx.tape.add_broadcast(logits, bias)?;
                }
                ctx.tape.softmax(logits, 3)?
            }
        };
        let a = ctx.tape.reshape(attn, &[n * h, t, t])?;
        let v = ctx.tape.reshape(v, &[n * h, t, d])?;
        let o = ctx.tape.bmm(a, v)?;
        let o = ctx.tape.reshape(o, &[n, h, t, d])?;
        let o = ctx.tape.permute(o, &[0, 2, 1, 3])?;
        let o = ctx.tape.reshape(o, &[n, t, h * d])?;
        let out = self.proj.forward(ctx, o)?;
        Ok((out, attn))
    }
}

fn validate_attention<F: Real>(a: &Tensor<F>, want: &[usize]) -> Result<()> {
    if a.shape() != want {
        return Err(LitError::Validation(format!("attention override shape {:?}, expected {want:?}", a.shape())));
    }
    let t = want[3];
    for (r, row) in a.data().chunks(t).enumerate() {
        let s: f64 = row.iter().map(|v| v.to_f64()).sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(LitError::Validation(format!("attention override row {r} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// `x' = x + MSA(LN(x))`, then the MLP block on `x'`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub attn_norm: LayerNorm,
    pub attn: Msa,
    pub mlp: MlpBlock,
}

impl TransformerBlock {
    pub fn new(
        prefix: &str,
        dim: usize,
        heads: usize,
        expansion: usize,
        rel_grid: Option<(usize, usize)>,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            attn_norm: LayerNorm::new(join(prefix, "attn_norm"), dim),
            attn: Msa::new(&join(prefix, "attn"), dim, heads, rel_grid)?,
            mlp: MlpBlock::new(prefix, dim, expansion),
        })
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<F>, rng: &mut R) -> Result<()> {
        self.attn_norm.init(store)?;
        self.attn.init(store, rng)?;
        self.mlp.init(store, rng)
    }

    /// Returns the block output and the attention probabilities.
    pub fn forward<F: Real>(&self, ctx: &mut Forward<'_, F>, x: Var) -> Result<(Var, Var)> {
        let h = self.attn_norm.forward(ctx, x)?;
        let (a, attn) = self.attn.forward(ctx, h, None)?;
        let x1 = ctx.tape.add(x, a)?;
        Ok((self.mlp.forward(ctx, x1)?, attn))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn relative_index_depends_only_on_displacement() {
        for (h, w) in [(1, 1), (2, 3), (4, 4)] {
            let idx = relative_index(h, w);
            let t = h * w;
            for i in 0..t {
                for j in 0..t {
                    for i2 in 0..t {
                        for j2 in 0..t {
                            let d1 = (i / w) as isize - (j / w) as isize;
                            let e1 = (i % w) as isize - (j % w) as isize;
                            let d2 = (i2 / w) as isize - (j2 / w) as isize;
                            let e2 = (i2 % w) as isize - (j2 % w) as isize;
                            let same = d1 == d2 && e1 == e2;
                            assert_eq!(same, idx[i * t + j] == idx[i2 * t + j2]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn msa_rejects_indivisible_width() {
        assert!(Msa::new("a", 10, 3, None).is_err());
    }

    #[test]
    fn eval_batch_norm_requires_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new("bn", 2);
        bn.init(&mut store).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        let mut ctx = Forward::new(&store, Mode::Eval, false);
        let xv = ctx.input(&x);
        assert!(matches!(bn.forward(&mut ctx, xv), Err(LitError::State(_))));
    }

    #[test]
    fn linear_param_count() {
        assert_eq!(Linear::new("fc", 64, 128).num_params(), 8320);
        let mut store = ParamStore::<f64>::new();
        Linear::new("fc", 64, 128).init(&mut store, &mut seeded(0)).unwrap();
        assert_eq!(store.num_params(), 8320);
    }
}
