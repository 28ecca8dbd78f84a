//! Numerical equivalences between fully connected layers, convolutions and multi-head
//! self-attention, plus gradient-based receptive-field probes.
//!
//! The attention-as-convolution construction gives head `h` an identity value projection
//! and the slice of the kernel at tap `f(h)` as its output projection; an explicit one-hot
//! attention override makes head `h` read pixel `p + f(h)`. Targets falling outside the grid
//! are clamped to the border, so only interior pixels (full kernel support in bounds) match
//! a zero-padded convolution.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LitError, Result};
use crate::export;
use crate::model::{Block, LitModel};
use crate::nn::{MlpBlock, Msa, TransformerBlock};
use crate::params::{Capture, Forward, Mode, ParamStore};
use crate::rng::derived;
use crate::tensor::{Real, Tensor, Var};

/// "Same" padding of a stride-1 K×K convolution; even kernels pad by `(K−1)/2` (i.e. 0 for K=2).
pub fn same_padding(kernel: usize) -> usize {
    (kernel - 1) / 2
}

/// Bijection from attention heads onto the pixel shifts `Δ_K` of a K×K kernel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadShiftMap {
    kernel: usize,
    shifts: Vec<(isize, isize)>,
}

impl HeadShiftMap {
    /// `Δ_K` in raster tap order: tap `(ky, kx)` shifts by `(ky − pad, kx − pad)`.
    pub fn alphabet(kernel: usize) -> Vec<(isize, isize)> {
        let pad = same_padding(kernel) as isize;
        let k = kernel as isize;
        (0..k).flat_map(|ky| (0..k).map(move |kx| (ky - pad, kx - pad))).collect()
    }

    pub fn new(kernel: usize, shifts: Vec<(isize, isize)>) -> Result<Self> {
        if kernel == 0 {
            return Err(LitError::Validation("kernel size must be positive".into()));
        }
        let alphabet = Self::alphabet(kernel);
        if shifts.len() != alphabet.len() {
            return Err(LitError::Validation(format!(
                "{} heads cannot map bijectively onto the {} shifts of a {kernel}×{kernel} kernel",
                shifts.len(),
                alphabet.len()
            )));
        }
        let mut seen = vec![false; alphabet.len()];
        for &s in &shifts {
            let tap = alphabet
                .iter()
                .position(|&a| a == s)
                .ok_or_else(|| LitError::Validation(format!("shift {s:?} outside the {kernel}×{kernel} kernel")))?;
            if std::mem::replace(&mut seen[tap], true) {
                return Err(LitError::Validation(format!("shift {s:?} assigned to two heads")));
            }
        }
        Ok(HeadShiftMap { kernel, shifts })
    }

    /// Head `h` ↦ tap `h` in raster order.
    pub fn canonical(kernel: usize) -> Result<Self> {
        Self::new(kernel, Self::alphabet(kernel))
    }

    /// Canonical map for `heads` heads on a K×K kernel; requires `heads == K²`.
    pub fn for_heads(heads: usize, kernel: usize) -> Result<Self> {
        if heads != kernel * kernel {
            return Err(LitError::Validation(format!(
                "{heads} heads cannot map bijectively onto the {} shifts of a {kernel}×{kernel} kernel",
                kernel * kernel
            )));
        }
        Self::canonical(kernel)
    }

    /// Relabel heads: new head `h` takes the shift of old head `perm[h]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.shifts.len() || perm.iter().any(|&p| p >= perm.len()) {
            return Err(LitError::Validation(format!("{perm:?} is not a permutation of the heads")));
        }
        Self::new(self.kernel, perm.iter().map(|&p| self.shifts[p]).collect())
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn heads(&self) -> usize {
        self.shifts.len()
    }

    pub fn shift(&self, head: usize) -> (isize, isize) {
        self.shifts[head]
    }

    /// Raster tap index of head `head`'s shift.
    pub fn tap(&self, head: usize) -> usize {
        let pad = same_padding(self.kernel) as isize;
        let (dy, dx) = self.shifts[head];
        ((dy + pad) * self.kernel as isize + dx + pad) as usize
    }
}

/// An MSA layer whose parameters and attention realize a given convolution.
#[derive(Clone, Debug)]
pub struct MsaAsConv {
    pub msa: Msa,
    pub map: HeadShiftMap,
}

/// Insert MSA parameters reproducing `conv_w[K×K×Cin×Cout]` (and optional bias) into `store`.
///
/// Query/key projections are zero (the override supplies attention); head `h` carries the
/// identity on values and `conv_w` at tap `f(h)` on its output-projection slice.
pub fn build_msa_as_conv<F: Real>(
    prefix: &str,
    conv_w: &Tensor<F>,
    conv_b: Option<&Tensor<F>>,
    map: &HeadShiftMap,
    store: &mut ParamStore<F>,
) -> Result<MsaAsConv> {
    let s = conv_w.shape();
    if s.len() != 4 || s[0] != s[1] {
        return Err(LitError::shape("build_msa_as_conv", format!("kernel {s:?} is not K×K×Cin×Cout")));
    }
    let (k, cin, cout) = (s[0], s[2], s[3]);
    if map.kernel() != k {
        return Err(LitError::Validation(format!(
            "head map is for a {0}×{0} kernel, weights are {k}×{k}",
            map.kernel()
        )));
    }
    let heads = map.heads();
    let msa = Msa::with_dims(prefix, cin, heads, cin, cout, None);

    let width = 3 * heads * cin;
    let mut qkv = vec![F::ZERO; cin * width];
    for h in 0..heads {
        for c in 0..cin {
            qkv[c * width + 2 * heads * cin + h * cin + c] = F::ONE;
        }
    }
    let w = conv_w.data();
    let mut proj = vec![F::ZERO; heads * cin * cout];
    for h in 0..heads {
        let tap = map.tap(h);
        for c in 0..cin {
            let src = (tap * cin + c) * cout;
            let dst = (h * cin + c) * cout;
            proj[dst..dst + cout].copy_from_slice(&w[src..src + cout]);
        }
    }
    let bias = match conv_b {
        Some(b) if b.shape() == [cout] => b.clone(),
        Some(b) => {
            return Err(LitError::shape("build_msa_as_conv", format!("bias {:?} for {cout} outputs", b.shape())));
        }
        None => Tensor::zeros(&[cout]),
    };
    store.add_param(msa.qkv.weight(), Tensor::new(&[cin, width], qkv)?)?;
    store.add_param(msa.qkv.bias(), Tensor::zeros(&[width]))?;
    store.add_param(msa.proj.weight(), Tensor::new(&[heads * cin, cout], proj)?)?;
    store.add_param(msa.proj.bias(), bias)?;
    Ok(MsaAsConv { msa, map: map.clone() })
}

impl MsaAsConv {
    /// One-hot attention `[N×heads×T×T]`: head `h` at pixel `p` attends to `p + f(h)`, clamped.
    pub fn attention_override<F: Real>(&self, batch: usize, height: usize, width: usize) -> Tensor<F> {
        let t = height * width;
        let heads = self.map.heads();
        let mut a = vec![F::ZERO; heads * t * t];
        for h in 0..heads {
            let (dy, dx) = self.map.shift(h);
            for y in 0..height {
                for x in 0..width {
                    let ty = (y as isize + dy).clamp(0, height as isize - 1) as usize;
                    let tx = (x as isize + dx).clamp(0, width as isize - 1) as usize;
                    a[(h * t + y * width + x) * t + ty * width + tx] = F::ONE;
                }
            }
        }
        let one = Tensor::new(&[1, heads, t, t], a).expect("finite one-hot attention");
        let mut data = Vec::with_capacity(batch * one.numel());
        for _ in 0..batch {
            data.extend_from_slice(one.data());
        }
        Tensor::new(&[batch, heads, t, t], data).expect("finite one-hot attention")
    }

    /// `x[N×H×W×Cin] → [N×H×W×Cout]`.
    pub fn forward<F: Real>(&self, ctx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 4 {
            return Err(LitError::shape("msa_as_conv", format!("expected N×H×W×C, got {s:?}")));
        }
        let (n, h, w) = (s[0], s[1], s[2]);
        let tokens = ctx.tape.reshape(x, &[n, h * w, s[3]])?;
        let attn = self.attention_override::<F>(n, h, w);
        let (out, _) = self.msa.forward(ctx, tokens, Some(&attn))?;
        ctx.tape.reshape(out, &[n, h, w, self.msa.out_dim])
    }
}

/// Max |a − b| over pixels whose full K×K support lies inside the grid. `msa_out` is
/// `[N×H×W×C]`; `conv_out` is the stride-1 conv output with [`same_padding`].
pub fn interior_max_deviation<F: Real>(
    msa_out: &Tensor<F>,
    conv_out: &Tensor<F>,
    kernel: usize,
) -> Result<(f64, usize)> {
    let (sm, sc) = (msa_out.shape(), conv_out.shape());
    let pad = same_padding(kernel);
    let (n, h, w, c) = (sm[0], sm[1], sm[2], sm[3]);
    if sc.len() != 4 || sc[0] != n || sc[3] != c || h < kernel || w < kernel {
        return Err(LitError::shape("interior_max_deviation", format!("{sm:?} vs {sc:?}")));
    }
    let (ho, wo) = (sc[1], sc[2]);
    let mut dev = 0.0f64;
    let mut count = 0;
    for b in 0..n {
        for y in pad..=h - kernel + pad {
            for x in pad..=w - kernel + pad {
                count += 1;
                for ch in 0..c {
                    let a = msa_out.data()[((b * h + y) * w + x) * c + ch].to_f64();
                    let r = conv_out.data()[((b * ho + y) * wo + x) * c + ch].to_f64();
                    dev = dev.max((a - r).abs());
                }
            }
        }
    }
    Ok((dev, count))
}

/// Outcome of one attention-versus-convolution comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvEquivalence {
    pub kernel: usize,
    pub grid: (usize, usize),
    pub seed: u64,
    pub max_deviation: f64,
    pub interior_pixels: usize,
}

/// Run the MSA construction and `conv2d` on the same random fp64 image and weights.
pub fn msa_conv_equivalence(
    map: &HeadShiftMap,
    grid: (usize, usize),
    channels: (usize, usize),
    seed: u64,
) -> Result<ConvEquivalence> {
    let k = map.kernel();
    let (cin, cout) = channels;
    let mut rng = derived(seed, 6);
    let x = Tensor::<f64>::uniform(&[2, grid.0, grid.1, cin], -2.0, 2.0, &mut rng);
    let w = Tensor::<f64>::uniform(&[k, k, cin, cout], -1.0, 1.0, &mut rng);
    let b = Tensor::<f64>::uniform(&[cout], -1.0, 1.0, &mut rng);

    let mut store = ParamStore::new();
    let layer = build_msa_as_conv("msa", &w, Some(&b), map, &mut store)?;
    let mut ctx = Forward::new(&store, Mode::Eval, false);
    let xv = ctx.input(&x);
    let out = layer.forward(&mut ctx, xv)?;
    let msa_out = ctx.tape.tensor(out);

    let mut tape = crate::tensor::Tape::new();
    let (xv, wv, bv) = (tape.constant(&x), tape.constant(&w), tape.constant(&b));
    let conv = tape.conv2d(xv, wv, Some(bv), 1, same_padding(k))?;
    let conv_out = tape.tensor(conv);

    let (max_deviation, interior_pixels) = interior_max_deviation(&msa_out, &conv_out, k)?;
    Ok(ConvEquivalence { kernel: k, grid, seed, max_deviation, interior_pixels })
}

/// Apply `w[Cin×Cout]` to `x[N×H×W×Cin]` as a per-pixel FC layer and as a 1×1 convolution;
/// returns the max absolute difference.
pub fn verify_fc_equals_1x1_conv<F: Real>(w: &Tensor<F>, x: &Tensor<F>) -> Result<f64> {
    let (ws, xs) = (w.shape(), x.shape());
    if ws.len() != 2 || xs.len() != 4 || xs[3] != ws[0] {
        return Err(LitError::shape("verify_fc_equals_1x1_conv", format!("w {ws:?}, x {xs:?}")));
    }
    let (cin, cout) = (ws[0], ws[1]);
    let pixels = xs[0] * xs[1] * xs[2];
    let mut tape = crate::tensor::Tape::new();
    let xv = tape.constant(x);
    let wv = tape.constant(w);
    let rows = tape.reshape(xv, &[pixels, cin])?;
    let fc = tape.matmul(rows, wv)?;
    let w4 = tape.reshape(wv, &[1, 1, cin, cout])?;
    let conv = tape.conv2d(xv, w4, None, 1, 0)?;
    let (a, b) = (tape.value(fc), tape.value(conv));
    Ok(a.iter().zip(b).map(|(p, q)| (p.to_f64() - q.to_f64()).abs()).fold(0.0, f64::max))
}

/// One layer of a receptive-field probe stack; all layers map `[1×H×W×C] → [1×H×W×C']`.
#[derive(Clone, Debug)]
pub enum ProbeLayer {
    Mlp(MlpBlock),
    Transformer(TransformerBlock),
    /// Stride-1 "same" convolution reading `weight[K×K×Cin×Cout]` from the store.
    Conv {
        weight: String,
        kernel: usize,
    },
    MsaConv(MsaAsConv),
}

impl ProbeLayer {
    fn forward<F: Real>(&self, ctx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        let tokens = |ctx: &mut Forward<'_, F>| ctx.tape.reshape(x, &[s[0], s[1] * s[2], s[3]]);
        let y = match self {
            ProbeLayer::Mlp(m) => {
                let t = tokens(ctx)?;
                m.forward(ctx, t)?
            }
            ProbeLayer::Transformer(b) => {
                let t = tokens(ctx)?;
                b.forward(ctx, t)?.0
            }
            ProbeLayer::Conv { weight, kernel } => {
                let w = ctx.param(weight)?;
                return ctx.tape.conv2d(x, w, None, 1, same_padding(*kernel));
            }
            ProbeLayer::MsaConv(m) => return m.forward(ctx, x),
        };
        let c = *ctx.tape.shape(y).last().unwrap();
        ctx.tape.reshape(y, &[s[0], s[1], s[2], c])
    }
}

/// Influence of every input pixel on one output pixel after a prefix of the stack.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfluence {
    /// Σ over input channels of |∂ Σ_c out[query, c] / ∂ x[pixel, ·]|, row-major `H×W`.
    pub magnitude: Vec<f64>,
    pub mask: Vec<bool>,
    pub k_eff: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReceptiveFieldReport {
    pub query: (usize, usize),
    pub grid: (usize, usize),
    pub layers: Vec<LayerInfluence>,
}

/// Mask threshold, relative to the largest influence.
pub const INFLUENCE_THRESHOLD: f64 = 1e-8;

impl ReceptiveFieldReport {
    /// Effective kernel size after the whole stack.
    pub fn k_eff(&self) -> usize {
        self.layers.last().map_or(0, |l| l.k_eff)
    }

    pub fn mask(&self) -> &[bool] {
        self.layers.last().map_or(&[], |l| &l.mask)
    }

    /// Pixels in the final mask, row-major.
    pub fn support(&self) -> Vec<(usize, usize)> {
        let w = self.grid.1;
        self.mask().iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| (i / w, i % w)).collect()
    }
}

/// Side of the smallest square covering the bounding box of `mask`.
pub fn effective_kernel(mask: &[bool], width: usize) -> usize {
    let pts: Vec<(usize, usize)> =
        mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| (i / width, i % width)).collect();
    if pts.is_empty() {
        return 0;
    }
    let span = |f: fn(&(usize, usize)) -> usize| {
        let lo = pts.iter().map(f).min().unwrap();
        let hi = pts.iter().map(f).max().unwrap();
        hi - lo + 1
    };
    span(|p| p.0).max(span(|p| p.1))
}

/// Backpropagate from `output[query]` through every prefix of `layers`.
pub fn receptive_field_probe<F: Real>(
    layers: &[ProbeLayer],
    store: &ParamStore<F>,
    input: &Tensor<F>,
    query: (usize, usize),
) -> Result<ReceptiveFieldReport> {
    let s = input.shape();
    if s.len() != 4 || s[0] != 1 || query.0 >= s[1] || query.1 >= s[2] {
        return Err(LitError::shape("receptive_field_probe", format!("input {s:?}, query {query:?}")));
    }
    let (h, w, c) = (s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(layers.len());
    for depth in 1..=layers.len() {
        let mut ctx = Forward::new(store, Mode::Eval, false);
        let xv = ctx.input(&input.clone().with_grad());
        let mut y = xv;
        for layer in &layers[..depth] {
            y = layer.forward(&mut ctx, y)?;
        }
        let cy = ctx.tape.shape(y)[3];
        let flat = ctx.tape.reshape(y, &[h * w, cy])?;
        let row = ctx.tape.select(flat, 0, query.0 * w + query.1)?;
        let loss = ctx.tape.sum(row)?;
        ctx.backward(loss)?;
        let g = ctx.tape.grad(xv).map(<[F]>::to_vec).unwrap_or_else(|| vec![F::ZERO; h * w * c]);
        let magnitude: Vec<f64> = g.chunks(c).map(|px| px.iter().map(|v| v.to_f64().abs()).sum()).collect();
        let peak = magnitude.iter().copied().fold(0.0, f64::max);
        let mask: Vec<bool> = magnitude.iter().map(|&m| peak > 0.0 && m > INFLUENCE_THRESHOLD * peak).collect();
        let k_eff = effective_kernel(&mask, w);
        out.push(LayerInfluence { magnitude, mask, k_eff });
    }
    Ok(ReceptiveFieldReport { query, grid: (h, w), layers: out })
}

/// Which single-layer stack to probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    Mlp,
    Conv { kernel: usize },
    MsaAsConv { heads: usize },
}

/// Probe one randomly initialized layer of the given kind at the grid center.
pub fn probe_single(kind: ProbeKind, grid: usize, channels: usize, seed: u64) -> Result<ReceptiveFieldReport> {
    let mut rng = derived(seed, 7);
    let mut store = ParamStore::<f64>::new();
    let layer = match kind {
        ProbeKind::Mlp => {
            let m = MlpBlock::new("mlp", channels, 4);
            m.init(&mut store, &mut rng)?;
            ProbeLayer::Mlp(m)
        }
        ProbeKind::Conv { kernel } => {
            store.add_param(
                "conv.weight",
                Tensor::uniform(&[kernel, kernel, channels, channels], -1.0, 1.0, &mut rng),
            )?;
            ProbeLayer::Conv { weight: "conv.weight".into(), kernel }
        }
        ProbeKind::MsaAsConv { heads } => {
            let k = (heads as f64).sqrt().round() as usize;
            let map = HeadShiftMap::for_heads(heads, k)?;
            let w = Tensor::uniform(&[k, k, channels, channels], -1.0, 1.0, &mut rng);
            ProbeLayer::MsaConv(build_msa_as_conv("msa", &w, None, &map, &mut store)?)
        }
    };
    let x = Tensor::uniform(&[1, grid, grid, channels], -2.0, 2.0, &mut rng);
    receptive_field_probe(&[layer], &store, &x, (grid / 2, grid / 2))
}

/// Per-head attention probabilities averaged over a batch of images.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub stage: usize,
    pub block: usize,
    pub heads: usize,
    /// Token grid side; `T = grid²`.
    pub grid: usize,
    pub images: usize,
    /// `[heads × T × T]`, row = query token.
    pub maps: Vec<f64>,
}

impl AttentionMaps {
    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let t = self.tokens();
        &self.maps[(head * t + query) * t..(head * t + query + 1) * t]
    }

    /// Largest |Σ row − 1| over all heads and queries.
    pub fn max_row_error(&self) -> f64 {
        self.maps.chunks(self.tokens()).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let t = self.tokens();
        let mut s = String::from("head,query,key,probability\n");
        for h in 0..self.heads {
            for q in 0..t {
                for (k, p) in self.row(h, q).iter().enumerate() {
                    let _ = writeln!(s, "{h},{q},{k},{p:.17e}");
                }
            }
        }
        s
    }

    pub fn pgm(&self, head: usize, query: usize) -> String {
        export::pgm_p2(self.grid, self.grid, self.row(head, query))
    }

    /// CSV of every probability plus one PGM per head per requested query token.
    pub fn write_dir(&self, dir: &Path, queries: &[usize]) -> Result<Vec<String>> {
        let stem = format!("stage{}_block{}", self.stage, self.block);
        let mut written = vec![format!("{stem}_attention.csv")];
        export::write(dir.join(&written[0]), &self.to_csv())?;
        for &q in queries {
            if q >= self.tokens() {
                return Err(LitError::config(format!("query token {q} outside the {0}×{0} grid", self.grid)));
            }
            for h in 0..self.heads {
                let name = format!("{stem}_head{h}_query{q}.pgm");
                export::write(dir.join(&name), &self.pgm(h, q))?;
                written.push(name);
            }
        }
        Ok(written)
    }
}

/// Average the attention of `stageS.blocks.B` over `images` (eval mode).
pub fn export_attention_maps<F: Real>(
    model: &LitModel<F>,
    images: &Tensor<F>,
    stage: usize,
    block: usize,
) -> Result<AttentionMaps> {
    let st = model
        .stages
        .get(stage.wrapping_sub(1))
        .ok_or_else(|| LitError::config(format!("stage {stage} does not exist (expected 1–4)")))?;
    match st.blocks.get(block) {
        Some(Block::Transformer(_)) => {}
        Some(Block::Mlp(_)) => {
            return Err(LitError::config(format!("stage {stage} has no self-attention layers (MLP blocks only)")));
        }
        None => {
            return Err(LitError::config(format!(
                "stage {stage} has {} blocks; block {block} does not exist",
                st.blocks.len()
            )));
        }
    }
    let out = model.forward(images, Mode::Eval, Capture { attention: true, offsets: false })?;
    let key = format!("stage{stage}.blocks.{block}");
    let attn = &out
        .inspection
        .attention
        .iter()
        .find(|(k, _)| *k == key)
        .ok_or_else(|| LitError::State(format!("no attention captured for {key}")))?
        .1;
    let s = attn.shape();
    let (n, heads, t) = (s[0], s[1], s[2]);
    let per = heads * t * t;
    let mut maps = vec![0.0; per];
    for img in attn.data().chunks(per) {
        for (m, v) in maps.iter_mut().zip(img) {
            *m += v;
        }
    }
    maps.iter_mut().for_each(|m| *m /= n as f64);
    Ok(AttentionMaps { stage, block, heads, grid: st.grid, images: n, maps })
}
