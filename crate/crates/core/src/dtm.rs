//! Deformable convolution and deformable token merging (DTM).
//!
//! A DTM module is `GELU(BN(DC(x)))`, where the deformable convolution samples tap `k` of
//! output position p at `p·stride + g(k) + Δg(k)`. The offsets Δg come from a plain
//! convolution over the same input (the offset predictor), zero-initialized so that a fresh
//! module merges tokens on the regular 2×2 grid.

use rand::Rng;

use crate::error::{LitError, Result};
use crate::nn::{join, BatchNorm, INIT_STD};
use crate::params::{Forward, ParamStore};
use crate::tensor::{Real, Tensor, Var};

/// Parameter names of offset predictors contain this segment (used for the optimizer group).
pub const OFFSET_SEGMENT: &str = ".offset.";

#[derive(Clone, Debug, PartialEq)]
pub struct DeformableConv {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl DeformableConv {
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        DeformableConv { prefix: prefix.to_string(), in_channels, out_channels, kernel, stride, padding: 0 }
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn weight(&self) -> String {
        join(&self.prefix, "conv.weight")
    }
    pub fn bias(&self) -> String {
        join(&self.prefix, "conv.bias")
    }
    pub fn offset_weight(&self) -> String {
        join(&self.prefix, "offset.weight")
    }
    pub fn offset_bias(&self) -> String {
        join(&self.prefix, "offset.bias")
    }

    pub fn main_params(&self) -> usize {
        self.taps() * self.in_channels * self.out_channels + self.out_channels
    }

    /// `2·K·K·(K·K·Cin + 1)`
    pub fn offset_params(&self) -> usize {
        2 * self.taps() * (self.taps() * self.in_channels + 1)
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<F>, rng: &mut R) -> Result<()> {
        let k = self.kernel;
        store.add_param(
            self.weight(),
            Tensor::trunc_normal(&[k, k, self.in_channels, self.out_channels], INIT_STD, rng),
        )?;
        store.add_param(self.bias(), Tensor::zeros(&[self.out_channels]))?;
        store.add_param(self.offset_weight(), Tensor::zeros(&[k, k, self.in_channels, 2 * self.taps()]))?;
        store.add_param(self.offset_bias(), Tensor::zeros(&[2 * self.taps()]))
    }

    /// Predicted offsets `[N×Ho×Wo×2KK]`, (Δy, Δx) per tap in row-major tap order.
    pub fn offsets<F: Real>(&self, ctx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.offset_weight())?;
        let b = ctx.param(&self.offset_bias())?;
        ctx.tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }

    /// Returns `(output, offsets)`.
    pub fn forward<F: Real>(&self, ctx: &mut Forward<'_, F>, x: Var) -> Result<(Var, Var)> {
        let offsets = self.offsets(ctx, x)?;
        let out = self.forward_with_offsets(ctx, x, offsets)?;
        Ok((out, offsets))
    }

    /// Deformable convolution with caller-supplied offsets (bypasses the predictor).
    pub fn forward_with_offsets<F: Real>(&self, ctx: &mut Forward<'_, F>, x: Var, offsets: Var) -> Result<Var> {
        let w = ctx.param(&self.weight())?;
        let b = ctx.param(&self.bias())?;
        ctx.tape.deformable_conv(x, offsets, w, Some(b), self.stride, self.padding)
    }

    /// The same main kernel applied as a regular strided convolution.
    pub fn forward_regular<F: Real>(&self, ctx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight())?;
        let b = ctx.param(&self.bias())?;
        ctx.tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Token merging between stages: 2×2 stride-2 convolution, batch norm, GELU.
/// `deformable == false` gives the uniform (regular-grid) merge used as a baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMerge {
    pub conv: DeformableConv,
    pub bn: BatchNorm,
    pub deformable: bool,
}

impl TokenMerge {
    pub const KERNEL: usize = 2;

    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, deformable: bool) -> Self {
        TokenMerge {
            conv: DeformableConv::new(prefix, in_channels, out_channels, Self::KERNEL, Self::KERNEL),
            bn: BatchNorm::new(join(prefix, "bn"), out_channels),
            deformable,
        }
    }

    pub fn num_params(&self) -> usize {
        let offsets = if self.deformable { self.conv.offset_params() } else { 0 };
        self.conv.main_params() + offsets + 2 * self.conv.out_channels
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<F>, rng: &mut R) -> Result<()> {
        if self.deformable {
            self.conv.init(store, rng)?;
        } else {
            let k = self.conv.kernel;
            store.add_param(
                self.conv.weight(),
                Tensor::trunc_normal(&[k, k, self.conv.in_channels, self.conv.out_channels], INIT_STD, rng),
            )?;
            store.add_param(self.conv.bias(), Tensor::zeros(&[self.conv.out_channels]))?;
        }
        self.bn.init(store)
    }

    /// `[N×H×W×Cin] → [N×H/2×W/2×Cout]`. Returns the merged map and, for DTM, the offsets.
    pub fn forward<F: Real>(&self, ctx: &mut Forward<'_, F>, x: Var) -> Result<(Var, Option<Var>)> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 4 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(LitError::config(format!(
                "{}: token merging needs an even N×H×W×C grid, got {s:?}",
                self.conv.prefix
            )));
        }
        let (y, offsets) = if self.deformable {
            let (y, o) = self.conv.forward(ctx, x)?;
            (y, Some(o))
        } else {
            (self.conv.forward_regular(ctx, x)?, None)
        };
        let y = self.bn.forward(ctx, y)?;
        Ok((ctx.tape.gelu(y)?, offsets))
    }
}

/// Learned displacements of one DTM for one image: `[Ho×Wo×K·K×2]`, (Δy, Δx) in input-grid
/// units.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub data: Vec<f64>,
}

impl OffsetField {
    /// Extract image `index` from a captured `[N×Ho×Wo×2KK]` offset tensor.
    pub fn from_batch<F: Real>(offsets: &Tensor<F>, index: usize, kernel: usize, stride: usize) -> Result<Self> {
        let s = offsets.shape();
        if s.len() != 4 || s[3] != 2 * kernel * kernel || index >= s[0] {
            return Err(LitError::shape("offset_field", format!("{s:?}, image {index}")));
        }
        let per = s[1] * s[2] * s[3];
        let data = offsets.data()[index * per..(index + 1) * per].iter().map(|v| v.to_f64()).collect();
        Ok(OffsetField { height: s[1], width: s[2], kernel, stride, data })
    }

    pub fn zeros(height: usize, width: usize, kernel: usize, stride: usize) -> Self {
        OffsetField { height, width, kernel, stride, data: vec![0.0; height * width * kernel * kernel * 2] }
    }

    pub fn get(&self, y: usize, x: usize, tap: usize) -> (f64, f64) {
        let o = ((y * self.width + x) * self.kernel * self.kernel + tap) * 2;
        (self.data[o], self.data[o + 1])
    }

    pub fn set(&mut self, y: usize, x: usize, tap: usize, dy: f64, dx: f64) {
        let o = ((y * self.width + x) * self.kernel * self.kernel + tap) * 2;
        self.data[o] = dy;
        self.data[o + 1] = dx;
    }

    /// Offsets at a fractional output location, bilinearly interpolated (zero outside).
    pub fn interpolate(&self, y: f64, x: f64, tap: usize) -> (f64, f64) {
        let (y0, x0) = (y.floor(), x.floor());
        let (ly, lx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let mut acc = (0.0, 0.0);
        for (cy, cx, wt) in [
            (y0, x0, (1.0 - ly) * (1.0 - lx)),
            (y0, x0 + 1, (1.0 - ly) * lx),
            (y0 + 1, x0, ly * (1.0 - lx)),
            (y0 + 1, x0 + 1, ly * lx),
        ] {
            if wt == 0.0 || cy < 0 || cx < 0 || cy >= self.height as isize || cx >= self.width as isize {
                continue;
            }
            let (dy, dx) = self.get(cy as usize, cx as usize, tap);
            acc.0 += wt * dy;
            acc.1 += wt * dx;
        }
        acc
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// One leaf of an offset trace, in original-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    pub leaf: usize,
    pub image_y: f64,
    pub image_x: f64,
}

/// Expand one final-stage token back through the DTM chain (`fields[0]` is the first merge,
/// i.e. stage 2). Each merge contributes K·K samples, so three 2×2 merges give 4³ = 64 leaves.
/// Leaf coordinates are first-stage grid positions scaled by `patch_size`.
///
/// Leaf index is `(k_last · K² + k_mid) · K² + k_first` in the three-merge case, i.e. the
/// tap of the last merge is most significant.
pub fn trace_points(fields: &[OffsetField], token: (usize, usize), patch_size: usize) -> Result<Vec<TracePoint>> {
    if fields.is_empty() {
        return Err(LitError::State("no offset fields recorded; run a forward pass first".into()));
    }
    let last = fields.last().unwrap();
    if token.0 >= last.height || token.1 >= last.width {
        return Err(LitError::config(format!("token {token:?} outside final grid {}×{}", last.height, last.width)));
    }
    let mut points = vec![(token.0 as f64, token.1 as f64)];
    for field in fields.iter().rev() {
        let k = field.kernel;
        let mut next = Vec::with_capacity(points.len() * k * k);
        for &(py, px) in &points {
            for ky in 0..k {
                for kx in 0..k {
                    let tap = ky * k + kx;
                    let (dy, dx) = field.interpolate(py, px, tap);
                    next.push((py * field.stride as f64 + ky as f64 + dy, px * field.stride as f64 + kx as f64 + dx));
                }
            }
        }
        points = next;
    }
    let scale = patch_size as f64;
    Ok(points
        .into_iter()
        .enumerate()
        .map(|(leaf, (y, x))| TracePoint { leaf, image_y: y * scale, image_x: x * scale })
        .collect())
}

/// Regular-grid positions of the leaves of `token` for zero offsets.
pub fn regular_points(fields: &[OffsetField], token: (usize, usize), patch_size: usize) -> Result<Vec<TracePoint>> {
    let zeroed: Vec<OffsetField> =
        fields.iter().map(|f| OffsetField::zeros(f.height, f.width, f.kernel, f.stride)).collect();
    trace_points(&zeroed, token, patch_size)
}

/// Largest displacement of any leaf, over every final-stage token, from its regular-grid
/// position, in input-image pixels (Chebyshev distance).
pub fn max_trace_deviation(fields: &[OffsetField], patch_size: usize) -> Result<f64> {
    let last =
        fields.last().ok_or_else(|| LitError::State("no offset fields recorded; run a forward pass first".into()))?;
    let mut dev = 0.0f64;
    for ty in 0..last.height {
        for tx in 0..last.width {
            let traced = trace_points(fields, (ty, tx), patch_size)?;
            let regular = regular_points(fields, (ty, tx), patch_size)?;
            for (a, b) in traced.iter().zip(&regular) {
                let d = (a.image_y - b.image_y).abs().max((a.image_x - b.image_x).abs());
                dev = dev.max(d);
            }
        }
    }
    Ok(dev)
}

/// CSV rows `token_y,token_x,leaf_index,image_y,image_x`.
pub fn trace_csv(token: (usize, usize), points: &[TracePoint]) -> String {
    let mut s = String::from("token_y,token_x,leaf_index,image_y,image_x\n");
    for p in points {
        s.push_str(&format!("{},{},{},{},{}\n", token.0, token.1, p.leaf, p.image_y, p.image_x));
    }
    s
}
