//! Static parameter and FLOP accounting.
//!
//! Convention: one multiply-accumulate is one FLOP. Linear/conv layers cost
//! `output elements × fan-in`; attention costs its projections plus `T²·d` per head for
//! `QKᵀ` and again for `attn·V`. Normalization, activations, softmax, pooling, bias-table
//! additions and bilinear interpolation are itemized in `aux_rows` but excluded from totals.
//!
//! Counting reads only the configuration, never tensor data.

use std::fmt::Write as _;

use crate::error::Result;
use crate::model::{BlockKind, MergeKind, ModelConfig, PosEncoding, INPUT_CHANNELS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub layer: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub resolution: usize,
    pub rows: Vec<CostRow>,
    /// Excluded from headline totals.
    pub aux_rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn aux_flops(&self) -> u64 {
        self.aux_rows.iter().map(|r| r.flops).sum()
    }

    /// `(params, flops)` of rows whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.rows.iter().filter(|r| r.layer.starts_with(prefix)).fold((0, 0), |(p, f), r| (p + r.params, f + r.flops))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,flops\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.layer, r.params, r.flops);
        }
        s
    }

    pub fn aux_csv(&self) -> String {
        let mut s = String::from("layer,params,flops\n");
        for r in &self.aux_rows {
            let _ = writeln!(s, "{},{},{}", r.layer, r.params, r.flops);
        }
        s
    }

    /// Aligned plain-text table with stage subtotals and model totals.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().chain(&self.aux_rows).map(|r| r.layer.len()).max().unwrap_or(5).max(12);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>14}  {:>16}", "layer", "params", "flops");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>14}  {:>16}", r.layer, r.params, r.flops);
        }
        let _ = writeln!(s);
        for st in 1..=4 {
            let (p, f) = self.subtotal(&format!("stage{st}."));
            let _ = writeln!(s, "{:<width$}  {:>14}  {:>16}", format!("stage{st} total"), p, f);
        }
        let (p, f) = self.subtotal("head");
        let (np, nf) = self.subtotal("norm");
        let _ = writeln!(s, "{:<width$}  {:>14}  {:>16}", "norm+head total", p + np, f + nf);
        let _ = writeln!(s, "{:<width$}  {:>14}  {:>16}", "model total", self.total_params(), self.total_flops());
        let _ = writeln!(
            s,
            "{:<width$}  {:>14.3}M {:>15.3}G  (at {r}x{r})",
            "",
            self.total_params() as f64 / 1e6,
            self.total_flops() as f64 / 1e9,
            r = self.resolution
        );
        let _ = writeln!(s, "\nexcluded (norms, activations, softmax, pooling, sampling): {} flops", self.aux_flops());
        s
    }
}

/// MACs of one standard MSA over `tokens` tokens of width `dim`:
/// `3·T·C² + T²·C + T²·C + T·C²`.
pub fn msa_flops(tokens: u64, dim: u64) -> u64 {
    3 * tokens * dim * dim + 2 * tokens * tokens * dim + tokens * dim * dim
}

struct Builder {
    rows: Vec<CostRow>,
    aux: Vec<CostRow>,
}

impl Builder {
    fn row(&mut self, layer: String, params: u64, flops: u64) {
        self.rows.push(CostRow { layer, params, flops });
    }
    fn aux(&mut self, layer: String, flops: u64) {
        self.aux.push(CostRow { layer, params: 0, flops });
    }
}

/// Itemized parameters (for the model as configured) and FLOPs at `resolution` for one image.
///
/// Parameter tables tied to the token grid (absolute positional encodings, relative-bias
/// tables) are sized from `config.resolution`, so parameter counts do not depend on the
/// evaluation `resolution`.
pub fn cost_report(config: &ModelConfig, resolution: usize) -> Result<CostReport> {
    config.validate()?;
    config.clone().with_resolution(resolution).validate()?;
    let param_grids = config.grids(config.resolution);
    let grids = config.grids(resolution);
    let mut b = Builder { rows: Vec::new(), aux: Vec::new() };
    let mut prev_c = INPUT_CHANNELS as u64;
    for (i, spec) in config.stages.iter().enumerate() {
        let st = format!("stage{}", i + 1);
        let side = grids[i] as u64;
        let t = side * side;
        let c = spec.channels as u64;
        match spec.merge_kind {
            MergeKind::LinearEmbed => {
                let fan_in = (spec.patch_size * spec.patch_size) as u64 * prev_c;
                b.row(format!("{st}.patch_embed"), fan_in * c + c, t * fan_in * c);
            }
            kind => {
                let taps = (spec.patch_size * spec.patch_size) as u64;
                let fan_in = taps * prev_c;
                b.row(format!("{st}.merge.conv"), fan_in * c + c, t * fan_in * c);
                if kind == MergeKind::Dtm {
                    let off = 2 * taps;
                    b.row(format!("{st}.merge.offset"), fan_in * off + off, t * fan_in * off);
                    b.aux(format!("{st}.merge.bilinear"), t * taps * prev_c * 4);
                }
                b.row(format!("{st}.merge.bn"), 2 * c, 0);
                b.aux(format!("{st}.merge.bn"), t * c);
                b.aux(format!("{st}.merge.gelu"), t * c);
            }
        }
        let attention = spec.block_kind == BlockKind::Transformer;
        if attention && config.pos_encoding == PosEncoding::Absolute {
            let pt = (param_grids[i] * param_grids[i]) as u64;
            b.row(format!("{st}.pos_embed"), pt * c, 0);
            b.aux(format!("{st}.pos_embed.add"), t * c);
        }
        let hidden = spec.expansion as u64 * c;
        for l in 0..spec.depth {
            let bp = format!("{st}.blocks.{l}");
            if attention {
                let h = spec.heads as u64;
                b.row(format!("{bp}.attn_norm"), 2 * c, 0);
                b.aux(format!("{bp}.attn_norm"), t * c);
                b.row(format!("{bp}.attn.qkv"), 3 * c * c + 3 * c, 3 * t * c * c);
                b.row(format!("{bp}.attn.qk"), 0, t * t * c);
                b.row(format!("{bp}.attn.av"), 0, t * t * c);
                b.row(format!("{bp}.attn.proj"), c * c + c, t * c * c);
                b.aux(format!("{bp}.attn.softmax"), h * t * t);
                if config.pos_encoding == PosEncoding::Relative {
                    let ps = param_grids[i] as u64;
                    b.row(format!("{bp}.attn.rel_bias"), h * (2 * ps - 1) * (2 * ps - 1), 0);
                    b.aux(format!("{bp}.attn.rel_bias.add"), h * t * t);
                }
            }
            b.row(format!("{bp}.norm"), 2 * c, 0);
            b.aux(format!("{bp}.norm"), t * c);
            b.row(format!("{bp}.mlp.fc1"), c * hidden + hidden, t * c * hidden);
            b.aux(format!("{bp}.mlp.gelu"), t * hidden);
            b.row(format!("{bp}.mlp.fc2"), hidden * c + c, t * hidden * c);
        }
        prev_c = c;
    }
    let last = *grids.last().unwrap() as u64;
    let classes = config.num_classes as u64;
    b.row("norm".into(), 2 * prev_c, 0);
    b.aux("norm".into(), last * last * prev_c);
    b.aux("pool".into(), last * last * prev_c);
    b.row("head".into(), prev_c * classes + classes, prev_c * classes);
    Ok(CostReport { resolution, rows: b.rows, aux_rows: b.aux })
}

/// Parameter report at the configured resolution.
pub fn count_params(config: &ModelConfig) -> Result<CostReport> {
    cost_report(config, config.resolution)
}

pub fn count_flops(config: &ModelConfig, resolution: usize) -> Result<CostReport> {
    cost_report(config, resolution)
}

/// Published cost figures: `(preset, params in millions, GFLOPs)`.
pub const PUBLISHED: [(&str, f64, f64); 4] =
    [("lit-ti", 19.0, 3.6), ("lit-s", 27.0, 4.1), ("lit-m", 48.0, 8.6), ("lit-b", 86.0, 15.0)];

pub const PARAM_TOLERANCE: f64 = 0.03;
pub const FLOP_TOLERANCE: f64 = 0.05;

/// The single-MSA figure: one attention layer over 56×56 tokens of width 96 costs ≈2.0 GFLOPs.
pub const MSA_CLAIM: (u64, u64, f64) = (56 * 56, 96, 2.0);

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub name: String,
    pub params_m: f64,
    pub flops_g: f64,
    pub target_params_m: f64,
    pub target_flops_g: f64,
    pub param_dev: f64,
    pub flop_dev: f64,
    /// FLOPs added by deformable offsets relative to uniform merging, as a fraction of total.
    pub dtm_flop_share: f64,
}

impl AuditRow {
    pub fn params_ok(&self) -> bool {
        self.param_dev.abs() <= PARAM_TOLERANCE
    }
    pub fn flops_ok(&self) -> bool {
        self.flop_dev.abs() <= FLOP_TOLERANCE
    }
    pub fn dtm_ok(&self) -> bool {
        self.dtm_flop_share < 0.01
    }
    pub fn pass(&self) -> bool {
        self.params_ok() && self.flops_ok() && self.dtm_ok()
    }
}

/// Same model with uniform regular-grid merging in place of DTM.
pub fn with_uniform_merge(config: &ModelConfig) -> ModelConfig {
    let mut c = config.clone();
    for s in &mut c.stages {
        if s.merge_kind == MergeKind::Dtm {
            s.merge_kind = MergeKind::UniformConv;
        }
    }
    c
}

pub fn audit_one(name: &str, config: &ModelConfig, target: (f64, f64)) -> Result<AuditRow> {
    let report = cost_report(config, 224)?;
    let uniform = cost_report(&with_uniform_merge(config), 224)?;
    let params_m = report.total_params() as f64 / 1e6;
    let flops_g = report.total_flops() as f64 / 1e9;
    let delta = report.total_flops().saturating_sub(uniform.total_flops()) as f64;
    Ok(AuditRow {
        name: name.to_string(),
        params_m,
        flops_g,
        target_params_m: target.0,
        target_flops_g: target.1,
        param_dev: params_m / target.0 - 1.0,
        flop_dev: flops_g / target.1 - 1.0,
        dtm_flop_share: delta / report.total_flops() as f64,
    })
}

/// Compare the four presets at 224×224 against the published figures.
pub fn audit() -> Result<Vec<AuditRow>> {
    PUBLISHED.iter().map(|&(name, p, f)| audit_one(name, &crate::model::preset(name)?, (p, f))).collect()
}

pub fn audit_table(rows: &[AuditRow]) -> String {
    let mut s = format!(
        "{:<8} {:>9} {:>7} {:>8} {:>9} {:>7} {:>8} {:>9}  {}\n",
        "model", "params(M)", "target", "dev", "flops(G)", "target", "dev", "dtm-share", "result"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<8} {:>9.3} {:>7.1} {:>+7.2}% {:>9.3} {:>7.1} {:>+7.2}% {:>8.3}%  {}",
            r.name,
            r.params_m,
            r.target_params_m,
            100.0 * r.param_dev,
            r.flops_g,
            r.target_flops_g,
            100.0 * r.flop_dev,
            100.0 * r.dtm_flop_share,
            match (r.params_ok(), r.flops_ok(), r.dtm_ok()) {
                (true, true, true) => "PASS".to_string(),
                (p, f, d) => format!(
                    "FAIL{}{}{}",
                    if p { "" } else { " params" },
                    if f { "" } else { " flops" },
                    if d { "" } else { " dtm" }
                ),
            }
        );
    }
    s
}

/// Each configuration must cost strictly fewer FLOPs than the one before it.
pub fn strictly_decreasing_flops(configs: &[ModelConfig], resolution: usize) -> Result<(bool, Vec<u64>)> {
    let flops =
        configs.iter().map(|c| cost_report(c, resolution).map(|r| r.total_flops())).collect::<Result<Vec<_>>>()?;
    Ok((flops.windows(2).all(|w| w[1] < w[0]), flops))
}
