//! Stage specifications, the LIT presets, model assembly and forward passes.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dtm::{OffsetField, TokenMerge};
use crate::error::{LitError, Result};
use crate::nn::{apply_buffer_updates, join, LayerNorm, Linear, MlpBlock, PatchEmbed, TransformerBlock, INIT_STD};
use crate::params::{Capture, Forward, Mode, ParamStore};
use crate::rng::seeded;
use crate::tensor::{Real, Tensor, Var};

pub const NUM_STAGES: usize = 4;
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Mlp,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    LinearEmbed,
    Dtm,
    UniformConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    Absolute,
    Relative,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    /// Attention heads; 0 for MLP stages.
    pub heads: usize,
    pub expansion: usize,
    pub block_kind: BlockKind,
    pub merge_kind: MergeKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stages: Vec<StageSpec>,
    pub pos_encoding: PosEncoding,
    pub num_classes: usize,
    pub resolution: usize,
}

impl ModelConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(s).map_err(|e| LitError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every invariant violation, or `Ok(())`.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.stages.len() != NUM_STAGES {
            errs.push(format!("expected {NUM_STAGES} stages, got {}", self.stages.len()));
        }
        if self.num_classes == 0 {
            errs.push("num_classes must be positive".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            if s.channels == 0 {
                errs.push(format!("stage {n}: channels must be positive"));
            }
            if s.expansion == 0 {
                errs.push(format!("stage {n}: expansion must be positive"));
            }
            match s.block_kind {
                BlockKind::Mlp if s.heads != 0 => {
                    errs.push(format!("stage {n}: MLP stage must have 0 heads, got {}", s.heads))
                }
                BlockKind::Transformer if s.heads == 0 => {
                    errs.push(format!("stage {n}: transformer stage needs at least one head"))
                }
                BlockKind::Transformer if s.channels % s.heads != 0 => {
                    errs.push(format!("stage {n}: channels {} not divisible by {} heads", s.channels, s.heads))
                }
                _ => {}
            }
            if i == 0 {
                if s.merge_kind != MergeKind::LinearEmbed {
                    errs.push("stage 1: merge_kind must be linear_embed".into());
                }
                if s.patch_size != 4 {
                    errs.push(format!("stage 1: patch_size must be 4, got {}", s.patch_size));
                }
            } else {
                if s.merge_kind == MergeKind::LinearEmbed {
                    errs.push(format!("stage {n}: merge_kind must be dtm or uniform_conv"));
                }
                if s.patch_size != TokenMerge::KERNEL {
                    errs.push(format!("stage {n}: patch_size must be 2, got {}", s.patch_size));
                }
            }
        }
        let down: usize = self.stages.iter().map(|s| s.patch_size.max(1)).product();
        if self.resolution == 0 || down == 0 || !self.resolution.is_multiple_of(down) {
            errs.push(format!("resolution {} not divisible by total downsampling {down}", self.resolution));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LitError::Config(errs))
        }
    }

    /// Token grid side of every stage at `resolution`.
    pub fn grids(&self, resolution: usize) -> Vec<usize> {
        let mut side = resolution;
        self.stages
            .iter()
            .map(|s| {
                side /= s.patch_size;
                side
            })
            .collect()
    }

    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.resolution = resolution;
        self
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }
}

fn stage(patch: usize, channels: usize, depth: usize, heads: usize, expansion: usize, merge: MergeKind) -> StageSpec {
    StageSpec {
        patch_size: patch,
        channels,
        depth,
        heads,
        expansion,
        block_kind: if heads == 0 { BlockKind::Mlp } else { BlockKind::Transformer },
        merge_kind: merge,
    }
}

fn lit(
    channels: [usize; 4],
    depths: [usize; 4],
    heads: [usize; 2],
    expansion: [usize; 4],
    pe: PosEncoding,
) -> ModelConfig {
    let h = [0, 0, heads[0], heads[1]];
    let stages = (0..NUM_STAGES)
        .map(|i| {
            let (patch, merge) = if i == 0 { (4, MergeKind::LinearEmbed) } else { (2, MergeKind::Dtm) };
            stage(patch, channels[i], depths[i], h[i], expansion[i], merge)
        })
        .collect();
    ModelConfig { stages, pos_encoding: pe, num_classes: 1000, resolution: 224 }
}

pub const PRESET_NAMES: [&str; 4] = ["lit-ti", "lit-s", "lit-m", "lit-b"];

/// Stock LIT architectures at 224×224 with a 1000-way classifier.
pub fn preset(name: &str) -> Result<ModelConfig> {
    use PosEncoding::*;
    Ok(match name {
        "lit-ti" => lit([64, 128, 320, 512], [3, 4, 6, 3], [5, 8], [8, 8, 4, 4], Absolute),
        "lit-s" => lit([96, 192, 384, 768], [2, 2, 6, 2], [12, 24], [4; 4], Relative),
        "lit-m" => lit([96, 192, 384, 768], [2, 2, 18, 2], [12, 24], [4; 4], Relative),
        "lit-b" => lit([128, 256, 512, 1024], [2, 2, 18, 2], [16, 32], [4; 4], Relative),
        other => {
            return Err(LitError::config(format!("unknown preset {other:?} (known: {})", PRESET_NAMES.join(", "))))
        }
    })
}

/// Width-reduced LIT used for desk-scale training: C=[16,32,48,64], L=[1,1,2,1], 64×64 input.
pub fn toy_config(num_classes: usize) -> ModelConfig {
    let mut c = lit([16, 32, 48, 64], [1, 1, 2, 1], [3, 4], [4, 4, 4, 4], PosEncoding::Absolute);
    c.num_classes = num_classes;
    c.resolution = 64;
    c
}

/// Heads given to an MLP stage when attention is added back (head width 64, at least one).
pub fn default_heads(channels: usize) -> usize {
    (channels / 64).max(1)
}

/// Every stage switched to transformer blocks; the starting point of the MSA-removal ablation.
pub fn with_attention_everywhere(config: &ModelConfig) -> ModelConfig {
    let mut c = config.clone();
    for s in &mut c.stages {
        if s.block_kind == BlockKind::Mlp {
            s.block_kind = BlockKind::Transformer;
            s.heads = default_heads(s.channels);
        }
    }
    c
}

/// Remove self-attention from the listed stages (1-based): their blocks become MLP blocks with
/// the same depth and expansion.
pub fn ablate(config: &ModelConfig, remove_msa_stages: &BTreeSet<usize>) -> Result<ModelConfig> {
    if let Some(bad) = remove_msa_stages.iter().find(|&&s| s == 0 || s > config.stages.len()) {
        return Err(LitError::config(format!("stage {bad} out of range 1..={}", config.stages.len())));
    }
    let mut c = config.clone();
    for &s in remove_msa_stages {
        let st = &mut c.stages[s - 1];
        st.block_kind = BlockKind::Mlp;
        st.heads = 0;
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Mlp(MlpBlock),
    Transformer(TransformerBlock),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Merge {
    Embed(PatchEmbed),
    Token(TokenMerge),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub index: usize,
    pub merge: Merge,
    pub pos_embed: Option<String>,
    pub blocks: Vec<Block>,
    pub grid: usize,
    pub channels: usize,
}

/// Attention maps and offset fields retained by an inspecting forward pass.
#[derive(Clone, Debug, Default)]
pub struct Inspection {
    /// `(block name, [N×heads×T×T])`
    pub attention: Vec<(String, Tensor<f64>)>,
    /// Raw offsets per DTM, stage 2 first: `(module name, [N×Ho×Wo×2KK])`
    pub offsets: Vec<(String, Tensor<f64>)>,
}

impl Inspection {
    pub fn offset_fields(&self, image: usize) -> Result<Vec<OffsetField>> {
        self.offsets
            .iter()
            .map(|(_, t)| OffsetField::from_batch(t, image, TokenMerge::KERNEL, TokenMerge::KERNEL))
            .collect()
    }
}

/// `(height, width, channels)` of a stage's token grid.
pub type StageShape = (usize, usize, usize);

pub struct ForwardOutput<F> {
    pub logits: Tensor<F>,
    pub stage_shapes: Vec<StageShape>,
    pub inspection: Inspection,
}

/// An assembled LIT network: module descriptors plus the parameter store they index.
#[derive(Clone, Debug)]
pub struct LitModel<F> {
    pub config: ModelConfig,
    pub stages: Vec<Stage>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub params: ParamStore<F>,
    pub inspection: Option<Inspection>,
}

impl<F: Real> LitModel<F> {
    /// Deterministic construction: `(config, seed)` fixes every parameter bit.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::describe(config)?;
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        for st in &model.stages {
            match &st.merge {
                Merge::Embed(pe) => pe.init(&mut store, &mut rng)?,
                Merge::Token(tm) => tm.init(&mut store, &mut rng)?,
            }
            if let Some(name) = &st.pos_embed {
                store.add_param(
                    name.clone(),
                    Tensor::trunc_normal(&[st.grid * st.grid, st.channels], INIT_STD, &mut rng),
                )?;
            }
            for b in &st.blocks {
                match b {
                    Block::Mlp(m) => m.init(&mut store, &mut rng)?,
                    Block::Transformer(t) => t.init(&mut store, &mut rng)?,
                }
            }
        }
        model.norm.init(&mut store)?;
        model.head.init(&mut store, &mut rng)?;
        model.params = store;
        Ok(model)
    }

    /// Module layout for `config` without allocating parameters.
    pub fn describe(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let grids = config.grids(config.resolution);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for (i, spec) in config.stages.iter().enumerate() {
            let n = i + 1;
            let prefix = format!("stage{n}");
            let merge = match spec.merge_kind {
                MergeKind::LinearEmbed => Merge::Embed(PatchEmbed::new(
                    &join(&prefix, "patch_embed"),
                    spec.patch_size,
                    INPUT_CHANNELS,
                    spec.channels,
                )),
                kind => Merge::Token(TokenMerge::new(
                    &join(&prefix, "merge"),
                    config.stages[i - 1].channels,
                    spec.channels,
                    kind == MergeKind::Dtm,
                )),
            };
            let attention = spec.block_kind == BlockKind::Transformer;
            let pos_embed =
                (attention && config.pos_encoding == PosEncoding::Absolute).then(|| join(&prefix, "pos_embed"));
            let rel = (config.pos_encoding == PosEncoding::Relative).then_some((grids[i], grids[i]));
            let blocks = (0..spec.depth)
                .map(|l| {
                    let bp = format!("{prefix}.blocks.{l}");
                    Ok(match spec.block_kind {
                        BlockKind::Mlp => Block::Mlp(MlpBlock::new(&bp, spec.channels, spec.expansion)),
                        BlockKind::Transformer => Block::Transformer(TransformerBlock::new(
                            &bp,
                            spec.channels,
                            spec.heads,
                            spec.expansion,
                            rel,
                        )?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { index: n, merge, pos_embed, blocks, grid: grids[i], channels: spec.channels });
        }
        let last = config.stages[NUM_STAGES - 1].channels;
        Ok(LitModel {
            config: config.clone(),
            stages,
            norm: LayerNorm::new("norm", last),
            head: Linear::new("head", last, config.num_classes),
            params: ParamStore::new(),
            inspection: None,
        })
    }

    /// Record the full network on `ctx`. Returns logits `[N×classes]` and stage output shapes.
    pub fn forward_on(&self, ctx: &mut Forward<'_, F>, images: Var) -> Result<(Var, Vec<StageShape>)> {
        let s = ctx.tape.shape(images).to_vec();
        if s.len() != 4 || s[3] != INPUT_CHANNELS {
            return Err(LitError::shape("forward", format!("expected N×H×W×3 images, got {s:?}")));
        }
        if s[1] != self.config.resolution || s[2] != self.config.resolution {
            return Err(LitError::config(format!(
                "model built for {r}×{r} input, got {}×{}",
                s[1],
                s[2],
                r = self.config.resolution
            )));
        }
        let n = s[0];
        let mut x = images;
        let mut shapes = Vec::with_capacity(NUM_STAGES);
        for st in &self.stages {
            let (mut tokens, side) = match &st.merge {
                Merge::Embed(pe) => {
                    let (t, (h, _)) = pe.forward(ctx, x)?;
                    (t, h)
                }
                Merge::Token(tm) => {
                    let (m, offsets) = tm.forward(ctx, x)?;
                    if let (Some(o), true) = (offsets, ctx.capture.offsets) {
                        let t = ctx.tape.tensor(o);
                        ctx.offsets.push((tm.conv.prefix.clone(), t));
                    }
                    let ms = ctx.tape.shape(m).to_vec();
                    (ctx.tape.reshape(m, &[n, ms[1] * ms[2], ms[3]])?, ms[1])
                }
            };
            if let Some(pe) = &st.pos_embed {
                let table = ctx.param(pe)?;
                tokens = ctx.tape.add_broadcast(tokens, table)?;
            }
            for (l, b) in st.blocks.iter().enumerate() {
                tokens = match b {
                    Block::Mlp(m) => m.forward(ctx, tokens)?,
                    Block::Transformer(t) => {
                        let (y, attn) = t.forward(ctx, tokens)?;
                        if ctx.capture.attention {
                            let a = ctx.tape.tensor(attn);
                            ctx.attention.push((format!("stage{}.blocks.{l}", st.index), a));
                        }
                        y
                    }
                };
            }
            shapes.push((side, side, st.channels));
            x = ctx.tape.reshape(tokens, &[n, side, side, st.channels])?;
        }
        let last = self.stages.last().unwrap();
        let tokens = ctx.tape.reshape(x, &[n, last.grid * last.grid, last.channels])?;
        let tokens = self.norm.forward(ctx, tokens)?;
        let pooled = ctx.tape.mean_axis(tokens, 1)?;
        let logits = self.head.forward(ctx, pooled)?;
        Ok((logits, shapes))
    }

    /// Gradient-free forward. Training mode still produces running-statistic updates, which
    /// are applied to `self` only through [`LitModel::forward_mut`].
    pub fn forward(&self, images: &Tensor<F>, mode: Mode, capture: Capture) -> Result<ForwardOutput<F>> {
        self.run(images, mode, capture).map(|(out, _)| out)
    }

    fn run(
        &self,
        images: &Tensor<F>,
        mode: Mode,
        capture: Capture,
    ) -> Result<(ForwardOutput<F>, Vec<crate::params::BufferUpdate<F>>)> {
        let mut ctx = Forward::new(&self.params, mode, false).with_capture(capture);
        let x = ctx.input(images);
        let (logits, stage_shapes) = self.forward_on(&mut ctx, x)?;
        let inspection = Inspection {
            attention: ctx.attention.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            offsets: ctx.offsets.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        };
        Ok((ForwardOutput { logits: ctx.tape.tensor(logits), stage_shapes, inspection }, ctx.buffer_updates))
    }

    /// Forward that retains attention maps and offset fields on the model for inspection and,
    /// in training mode, updates batch-norm running statistics.
    pub fn forward_mut(&mut self, images: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        let capture = Capture { attention: true, offsets: true };
        let (out, updates) = self.run(images, mode, capture)?;
        if mode == Mode::Train {
            apply_buffer_updates(&mut self.params, &updates)?;
        }
        self.inspection = Some(out.inspection);
        Ok(out.logits)
    }

    pub fn predict(&self, images: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.forward(images, Mode::Eval, Capture::default())?.logits)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Names of the deformable-offset predictor parameters.
    pub fn offset_param_names(&self) -> Vec<String> {
        self.params.names().filter(|n| n.contains(crate::dtm::OFFSET_SEGMENT)).map(str::to_string).collect()
    }

    /// Set every batch-norm's running statistics to (0, 1) and mark them initialized.
    pub fn seed_identity_bn_stats(&mut self) -> Result<()> {
        for st in &self.stages {
            if let Merge::Token(tm) = &st.merge {
                let c = tm.bn.dim;
                tm.bn.seed_stats(&mut self.params, &vec![F::ZERO; c], &vec![F::ONE; c])?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_table() {
        let ti = preset("lit-ti").unwrap();
        assert_eq!(ti.stages[2].heads, 5);
        assert_eq!(ti.stages[3].heads, 8);
        assert_eq!(ti.stages.iter().map(|s| s.expansion).collect::<Vec<_>>(), [8, 8, 4, 4]);
        assert_eq!(preset("lit-b").unwrap().stages[3].channels, 1024);
        for name in PRESET_NAMES {
            let c = preset(name).unwrap();
            c.validate().unwrap();
            for s in &c.stages[..2] {
                assert_eq!(s.block_kind, BlockKind::Mlp);
                assert_eq!(s.heads, 0);
            }
        }
        assert!(preset("lit-xl").is_err());
    }

    #[test]
    fn validation_lists_every_violation() {
        let mut c = preset("lit-s").unwrap();
        c.resolution = 100;
        c.stages[2].heads = 7;
        c.stages[0].heads = 2;
        match c.validate() {
            Err(LitError::Config(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn json_rejects_unknown_keys() {
        let c = preset("lit-ti").unwrap();
        let j = c.to_json();
        assert_eq!(ModelConfig::from_json(&j).unwrap(), c);
        let bad = j.replacen("\"num_classes\"", "\"dropout\": 0.1, \"num_classes\"", 1);
        assert!(ModelConfig::from_json(&bad).is_err());
    }

    #[test]
    fn ablation_round_trip() {
        let ti = preset("lit-ti").unwrap();
        let full = with_attention_everywhere(&ti);
        assert_eq!(full.stages[0].heads, 1);
        assert_eq!(full.stages[1].heads, 2);
        assert_eq!(ablate(&full, &BTreeSet::from([1, 2])).unwrap(), ti);
        assert_eq!(ablate(&ti, &BTreeSet::new()).unwrap(), ti);
        assert!(ablate(&ti, &BTreeSet::from([5])).is_err());
    }

    #[test]
    fn grids_scale() {
        let c = preset("lit-ti").unwrap();
        assert_eq!(c.grids(224), [56, 28, 14, 7]);
        assert_eq!(c.grids(64), [16, 8, 4, 2]);
    }
}
