mod common;

use std::collections::BTreeSet;

use common::*;
use lit_core::analyzer::{
    audit_one, cost_report, count_flops, count_params, msa_flops, strictly_decreasing_flops, with_uniform_merge,
    MSA_CLAIM, PUBLISHED,
};
use lit_core::model::{toy_config, with_attention_everywhere};
use lit_core::nn::{Linear, Msa};
use lit_core::rng::seeded;
use lit_core::{ablate, preset, Forward, LitModel, MergeKind, Mode, ModelConfig, ParamStore, PosEncoding};

fn small(pe: PosEncoding, res: usize) -> ModelConfig {
    let mut c = toy_config(7);
    c.pos_encoding = pe;
    c.resolution = res;
    c
}

/// MACs recorded by the tape for one image.
fn instrumented_macs(cfg: &ModelConfig) -> u64 {
    let mut model = LitModel::<f64>::build(cfg, 0).unwrap();
    model.seed_identity_bn_stats().unwrap();
    let x = rand(&[1, cfg.resolution, cfg.resolution, 3], 1);
    let mut ctx = Forward::new(&model.params, Mode::Eval, false);
    let xv = ctx.input(&x);
    model.forward_on(&mut ctx, xv).unwrap();
    ctx.tape.macs()
}

#[test]
fn single_fc_parameter_count() {
    let fc = Linear::new("fc", 64, 128);
    assert_eq!(fc.num_params(), 8320);
    let mut store = ParamStore::<f32>::new();
    fc.init(&mut store, &mut seeded(0)).unwrap();
    assert_eq!(store.num_params(), 64 * 128 + 128);
}

#[test]
fn msa_formula_matches_instrumented_forward() {
    for side in 1..=8usize {
        for (c, heads) in [(8, 1), (12, 3), (16, 4)] {
            let t = side * side;
            let msa = Msa::new("a", c, heads, None).unwrap();
            let mut store = ParamStore::<f64>::new();
            msa.init(&mut store, &mut seeded(0)).unwrap();
            let mut ctx = Forward::new(&store, Mode::Eval, false);
            let x = ctx.input(&rand(&[1, t, c], 1));
            msa.forward(&mut ctx, x, None).unwrap();
            assert_eq!(ctx.tape.macs(), msa_flops(t as u64, c as u64), "T={t} C={c}");
        }
    }
}

#[test]
fn msa_cost_claim() {
    let (t, c, target) = MSA_CLAIM;
    assert_eq!((t, c), (3136, 96));
    let flops = msa_flops(t, c);
    // 3·T·C² + 2·T²·C + T·C², by hand.
    assert_eq!(flops, 3 * 3136 * 96 * 96 + 2 * 3136 * 3136 * 96 + 3136 * 96 * 96);
    assert!((flops as f64 / 1e9 - target).abs() / target < 0.05);
}

#[test]
fn model_flops_match_instrumented_forward() {
    let mut cfgs = vec![
        small(PosEncoding::Absolute, 64),
        small(PosEncoding::Relative, 32),
        small(PosEncoding::None, 32),
        with_attention_everywhere(&small(PosEncoding::Absolute, 32)),
        with_uniform_merge(&small(PosEncoding::Absolute, 32)),
    ];
    cfgs.push(ablate(&cfgs[3], &BTreeSet::from([1, 2, 3, 4])).unwrap());
    for cfg in cfgs {
        let report = count_flops(&cfg, cfg.resolution).unwrap();
        assert_eq!(report.total_flops(), instrumented_macs(&cfg), "{cfg:?}");
    }
}

#[test]
fn static_parameter_counts_match_built_models() {
    let mut cfgs = vec![
        small(PosEncoding::Absolute, 64),
        small(PosEncoding::Relative, 64),
        with_attention_everywhere(&small(PosEncoding::Relative, 32)),
        with_uniform_merge(&small(PosEncoding::Absolute, 64)),
    ];
    for name in ["lit-ti", "lit-s"] {
        cfgs.push(preset(name).unwrap());
    }
    for cfg in cfgs {
        let report = count_params(&cfg).unwrap();
        let model = LitModel::<f32>::build(&cfg, 0).unwrap();
        assert_eq!(report.total_params(), model.num_params() as u64, "{cfg:?}");
    }
}

#[test]
fn dtm_minus_uniform_is_offset_predictor() {
    let cfg = preset("lit-ti").unwrap();
    let dtm = count_params(&cfg).unwrap();
    let uni = count_params(&with_uniform_merge(&cfg)).unwrap();
    let (d2, _) = dtm.subtotal("stage2.merge");
    let (u2, _) = uni.subtotal("stage2.merge");
    assert_eq!(d2 - u2, 2 * 2 * 2 * (2 * 2 * 64 + 1));
    assert_eq!(d2 - u2, 2056);
    let closed: u64 = [64u64, 128, 320].iter().map(|&cin| 8 * (4 * cin + 1)).sum();
    assert_eq!(dtm.total_params() - uni.total_params(), closed);
}

#[test]
fn totals_are_row_sums_and_reports_are_static() {
    let cfg = preset("lit-m").unwrap();
    let a = cost_report(&cfg, 224).unwrap();
    let b = cost_report(&cfg, 224).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.total_params(), a.rows.iter().map(|r| r.params).sum::<u64>());
    assert_eq!(a.total_flops(), a.rows.iter().map(|r| r.flops).sum::<u64>());
    let stages: u64 = (1..=4).map(|s| a.subtotal(&format!("stage{s}.")).1).sum();
    let rest = a.rows.iter().filter(|r| !r.layer.starts_with("stage")).map(|r| r.flops).sum::<u64>();
    assert_eq!(stages + rest, a.total_flops());
    assert!(a.aux_flops() > 0);
    assert!(a.to_csv().lines().count() == a.rows.len() + 1);
    assert!(a.to_table().contains("stage3.blocks.0.attn.qkv"));
}

#[test]
fn resolution_scaling_laws() {
    let cfg = preset("lit-s").unwrap();
    let r1 = count_flops(&cfg, 224).unwrap();
    let r2 = count_flops(&cfg, 448).unwrap();
    let get = |r: &lit_core::analyzer::CostReport, name: &str| r.rows.iter().find(|x| x.layer == name).unwrap().flops;
    for layer in ["stage2.merge.conv", "stage1.blocks.0.mlp.fc1", "stage3.blocks.0.attn.qkv"] {
        assert_eq!(get(&r2, layer), 4 * get(&r1, layer), "{layer}");
    }
    assert_eq!(get(&r2, "stage3.blocks.0.attn.qk"), 16 * get(&r1, "stage3.blocks.0.attn.qk"));
    assert_eq!(get(&r2, "head"), get(&r1, "head"));
    assert_eq!(r1.total_params(), r2.total_params());
    assert!(count_flops(&cfg, 100).is_err());
}

#[test]
fn published_targets_are_the_table_figures() {
    assert_eq!(PUBLISHED, [("lit-ti", 19.0, 3.6), ("lit-s", 27.0, 4.1), ("lit-m", 48.0, 8.6), ("lit-b", 86.0, 15.0)]);
}

#[test]
fn preset_flops_within_five_percent() {
    for (name, _, g) in PUBLISHED {
        let row = audit_one(name, &preset(name).unwrap(), (0.0, g)).unwrap();
        assert!(row.flops_ok(), "{name}: {} vs {g}", row.flops_g);
        assert!(row.dtm_ok(), "{name}: DTM share {}", row.dtm_flop_share);
    }
}

#[test]
fn ablation_flops_strictly_decrease() {
    let all = with_attention_everywhere(&preset("lit-ti").unwrap());
    let steps: [&[usize]; 5] = [&[], &[1], &[1, 2], &[1, 2, 3], &[1, 2, 3, 4]];
    let cfgs: Vec<ModelConfig> = steps.iter().map(|r| ablate(&all, &r.iter().copied().collect()).unwrap()).collect();
    let (ok, flops) = strictly_decreasing_flops(&cfgs, 224).unwrap();
    assert!(ok, "{flops:?}");
    let (ok, _) = strictly_decreasing_flops(&[cfgs[1].clone(), cfgs[0].clone()], 224).unwrap();
    assert!(!ok);
}

#[test]
fn uniform_merge_replaces_every_dtm() {
    let u = with_uniform_merge(&preset("lit-b").unwrap());
    assert_eq!(u.stages[0].merge_kind, MergeKind::LinearEmbed);
    assert!(u.stages[1..].iter().all(|s| s.merge_kind == MergeKind::UniformConv));
}
