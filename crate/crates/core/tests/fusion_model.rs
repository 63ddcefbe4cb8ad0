mod common;

use std::collections::BTreeSet;

use common::{random_tensor, rng};
use proptest::prelude::*;
use rand::Rng;
use stfusion_core::fusion::{
    build_template, materialize_strategy, recover_strategy, FusionStrategy, FusionUnitKind, GateLayout, GateSample,
    LayerTriplet, Mode, TemplateConfig, TemplateNetwork,
};
use stfusion_core::tensor::{BnMode, Tape, Tensor, Var};
use stfusion_core::Error;

fn small(num_blocks: usize, layers_per_block: usize) -> TemplateConfig {
    TemplateConfig {
        num_blocks,
        layers_per_block,
        growth_channels: 3,
        stem_channels: 4,
        clip_shape: [1, 4, 4, 4],
        num_classes: 3,
        kernel_sizes: [3, 3, 3],
    }
}

fn batch(cfg: &TemplateConfig, n: usize, seed: u64) -> Tensor {
    let [c, t, h, w] = cfg.clip_shape;
    random_tensor(&mut rng(seed), &[n, c, t, h, w])
}

fn logits(net: &TemplateNetwork, gates: &GateSample, x: &Tensor) -> Vec<f64> {
    net.predict(gates, x, Mode::Train).unwrap().into_data()
}

/// Plain dense network written directly against the parameter names, with a
/// multiplier per gate site. Multiplying by 0 keeps the path in the graph,
/// unlike the template, which skips it.
fn reference_logits(net: &TemplateNetwork, gates: &GateSample, x: &Tensor) -> Vec<f64> {
    let cfg = net.config();
    let tape = Tape::new();
    let p = |id: &str| param(&tape, net, id);
    let bn_relu = |x, prefix: &str| bn_relu(x, p(&format!("{prefix}/bn/gamma")), p(&format!("{prefix}/bn/beta")));
    let conv = |x, id: &str| conv2d(x, p(id));

    let mut input = conv(tape.constant(x.clone()), "stem/kernel");
    let mut l = 0;
    for blk in 0..cfg.num_blocks {
        let mut feats = vec![input];
        for _ in 0..cfg.layers_per_block {
            let g = &gates.layers[l];
            let hidden: Vec<Var> = feats
                .iter()
                .enumerate()
                .map(|(i, f)| bn_relu(*f, &format!("layer_{}/edge_{i}", l + 1)).scale(g.edges[i]))
                .collect();
            let s = total(
                hidden
                    .iter()
                    .enumerate()
                    .map(|(i, h)| conv(*h, &format!("layer_{}/edge_{i}/unit_S/kernel", l + 1)))
                    .collect(),
            );
            let st2 = total(
                hidden
                    .iter()
                    .enumerate()
                    .map(|(i, h)| conv(*h, &format!("layer_{}/edge_{i}/unit_ST/kernel", l + 1)))
                    .collect(),
            );
            let st =
                st2.conv1d_temporal(&p(&format!("layer_{}/unit_ST/temporal", l + 1)), cfg.kernel_sizes[0] / 2).unwrap();
            feats.push(s.scale(g.s).add(&st.scale(g.st)).unwrap());
            l += 1;
        }
        if blk + 1 < cfg.num_blocks {
            let parts = feats
                .iter()
                .enumerate()
                .map(|(j, f)| {
                    let prefix = format!("transition_{}/slice_{j}", blk + 1);
                    conv(bn_relu(*f, &prefix), &format!("{prefix}/kernel"))
                })
                .collect();
            input = total(parts).avg_pool2().unwrap();
        } else {
            let parts = feats
                .iter()
                .enumerate()
                .map(|(j, f)| {
                    let prefix = format!("head/slice_{j}");
                    bn_relu(*f, &prefix).pool_and_classify(&p(&format!("{prefix}/weights"))).unwrap()
                })
                .collect();
            return total(parts).value().data().to_vec();
        }
    }
    unreachable!()
}

fn param<'t>(tape: &'t Tape, net: &TemplateNetwork, id: &str) -> Var<'t> {
    tape.param(net.params().get(id).unwrap_or_else(|| panic!("missing {id}")))
}

fn bn_relu<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Var<'t> {
    x.batch_norm(&gamma, &beta, BnMode::Train).unwrap().0.relu()
}

fn conv2d<'t>(x: Var<'t>, k: Var<'t>) -> Var<'t> {
    let s = k.shape();
    x.conv2d_spatial(&k, [s[2] / 2, s[3] / 2]).unwrap()
}

fn total<'t>(v: Vec<Var<'t>>) -> Var<'t> {
    v.iter().skip(1).fold(v[0], |a, b| a.add(b).unwrap())
}

fn diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Closed-form parameter count of the dense template.
fn closed_form_params(c: &TemplateConfig) -> usize {
    let [cin, _, _, _] = c.clip_shape;
    let [kt, kh, kw] = c.kernel_sizes;
    let (g, lpb) = (c.growth_channels, c.layers_per_block);
    let mut total = c.stem_channels * cin * kh * kw;
    let mut c0 = c.stem_channels;
    for b in 0..c.num_blocks {
        // layer p sees c0 + p*g channels: BN, two 2D kernels, one temporal kernel
        let widths: usize = (0..lpb).map(|p| c0 + p * g).sum();
        total += 2 * widths + 2 * g * kh * kw * widths + lpb * g * g * kt;
        let out = c0 + lpb * g;
        if b + 1 < c.num_blocks {
            let next = std::cmp::max(1, out / 2);
            total += 2 * out + out * next;
            c0 = next;
        } else {
            total += 2 * out + c.num_classes * out;
        }
    }
    total
}

fn ids_with(net: &TemplateNetwork, suffix: &str) -> usize {
    net.parameter_ids().iter().filter(|id| id.ends_with(suffix)).count()
}

#[test]
fn construction_counts() {
    let net = build_template(&small(1, 1), 0).unwrap();
    assert_eq!(net.num_layers(), 1);
    assert_eq!(net.gate_site_count(), 3);
    assert_eq!(ids_with(&net, "unit_S/kernel") + ids_with(&net, "unit_ST/kernel"), 2);
    assert_eq!(ids_with(&net, "unit_ST/temporal"), 1);

    let net = build_template(&small(2, 2), 0).unwrap();
    assert_eq!(net.gate_site_count(), 12);
}

#[test]
fn every_branch_kernel_exists_once() {
    let cfg = small(2, 3);
    let net = build_template(&cfg, 1).unwrap();
    let layout = net.layout();
    let mut expected = BTreeSet::new();
    for l in 0..layout.num_layers() {
        for i in 0..layout.edges(l) {
            for u in ["S", "ST"] {
                expected.insert(format!("layer_{}/edge_{i}/unit_{u}/kernel", l + 1));
            }
        }
    }
    let got: BTreeSet<String> =
        net.parameter_ids().into_iter().filter(|id| id.starts_with("layer_") && id.ends_with("/kernel")).collect();
    assert_eq!(got, expected);
}

#[test]
fn parameter_count_matches_closed_form() {
    for (nb, lpb, g, stem, classes, k) in
        [(1, 1, 2, 3, 2, [1, 1, 1]), (2, 2, 3, 4, 3, [3, 3, 3]), (2, 4, 8, 8, 4, [3, 3, 3]), (3, 2, 2, 5, 6, [5, 3, 1])]
    {
        let cfg = TemplateConfig {
            num_blocks: nb,
            layers_per_block: lpb,
            growth_channels: g,
            stem_channels: stem,
            clip_shape: [2, 4, 8, 8],
            num_classes: classes,
            kernel_sizes: k,
        };
        let net = build_template(&cfg, 0).unwrap();
        assert_eq!(net.params().total_elements(), closed_form_params(&cfg), "{cfg:?}");
    }
}

#[test]
fn default_config_is_valid() {
    let cfg = TemplateConfig::default();
    assert_eq!((cfg.num_blocks, cfg.layers_per_block), (2, 4));
    let net = build_template(&cfg, 0).unwrap();
    assert_eq!(net.num_layers(), 8);
}

#[test]
fn pooling_pyramid_guard() {
    let mut cfg = small(3, 1);
    cfg.clip_shape = [1, 4, 6, 6];
    match build_template(&cfg, 0) {
        Err(Error::Config(msg)) => assert!(msg.contains("minimum H = 4"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let mut even = small(1, 1);
    even.kernel_sizes = [3, 2, 3];
    assert!(matches!(build_template(&even, 0), Err(Error::Config(_))));
}

#[test]
fn all_ones_matches_reference_and_full_strategy() {
    let cfg = small(2, 2);
    let net = build_template(&cfg, 3).unwrap();
    let x = batch(&cfg, 3, 4);
    let ones = GateSample::ones(&net.layout());
    let gated = logits(&net, &ones, &x);
    assert_eq!(gated.len(), 3 * cfg.num_classes);
    assert_eq!(gated, reference_logits(&net, &ones, &x));
    let tape = Tape::new();
    let ungated = net.forward_ungated(&tape, &x, Mode::Train).unwrap().logits.value().data().to_vec();
    assert_eq!(gated, ungated);
    let full = FusionStrategy::uniform(&net.layout(), FusionUnitKind::SPlusST);
    assert_eq!(materialize_strategy(&net, &full).unwrap().predict(&x, Mode::Train).unwrap().into_data(), gated);
}

#[test]
fn fractional_gate_matches_spliced_reference() {
    let cfg = small(1, 3);
    let net = build_template(&cfg, 5).unwrap();
    let x = batch(&cfg, 2, 6);
    let mut gates = GateSample::ones(&net.layout());
    gates.layers[1].s = 0.5;
    let got = logits(&net, &gates, &x);
    let want = reference_logits(&net, &gates, &x);
    assert!(diff(&got, &want) < 1e-12);
    assert!(diff(&got, &logits(&net, &GateSample::ones(&net.layout()), &x)) > 1e-6);

    // halving the S activation is the same as halving every S kernel of that layer
    let mut halved = net.clone();
    for i in 0..2 {
        let p = halved.params_mut().get_mut(&format!("layer_2/edge_{i}/unit_S/kernel")).unwrap();
        *p.value_mut() = p.value().map(|v| 0.5 * v);
    }
    let spliced = logits(&halved, &GateSample::ones(&net.layout()), &x);
    assert!(diff(&got, &spliced) < 1e-12);
}

#[test]
fn dropped_s_branch_ignores_s_kernels() {
    let cfg = small(2, 2);
    let net = build_template(&cfg, 7).unwrap();
    let x = batch(&cfg, 2, 8);
    let mut gates = GateSample::ones(&net.layout());
    for l in &mut gates.layers {
        l.s = 0.0;
    }
    let before = logits(&net, &gates, &x);
    let mut perturbed = net.clone();
    let mut r = rng(9);
    for p in perturbed.params_mut().iter_mut().filter(|p| p.id().ends_with("unit_S/kernel")) {
        let shape = p.value().shape().to_vec();
        *p.value_mut() = random_tensor(&mut r, &shape);
    }
    assert_eq!(before, logits(&perturbed, &gates, &x));
}

#[test]
fn gate_count_mismatch_is_rejected() {
    let net = build_template(&small(1, 2), 0).unwrap();
    let x = batch(net.config(), 2, 0);
    let wrong = GateSample::ones(&GateLayout::single_block(3));
    assert!(matches!(net.predict(&wrong, &x, Mode::Train), Err(Error::Contract(_))));
    let out_of_range = GateSample::filled(&net.layout(), 1.5);
    assert!(matches!(net.predict(&out_of_range, &x, Mode::Train), Err(Error::Contract(_))));
    let s = FusionStrategy::uniform(&GateLayout::single_block(3), FusionUnitKind::S);
    assert!(matches!(materialize_strategy(&net, &s), Err(Error::Contract(_))));
    let bad_batch = Tensor::zeros(&[2, 1, 4, 4, 2]);
    assert!(matches!(net.predict(&GateSample::ones(&net.layout()), &bad_batch, Mode::Train), Err(Error::Shape(_))));
}

#[test]
fn eval_mode_needs_statistics() {
    let net = build_template(&small(1, 1), 0).unwrap();
    let x = batch(net.config(), 2, 0);
    assert!(matches!(net.predict(&GateSample::ones(&net.layout()), &x, Mode::Eval), Err(Error::Uninitialized(_))));
}

#[test]
fn all_nine_two_layer_strategies() {
    let cfg = small(1, 2);
    let net = build_template(&cfg, 11).unwrap();
    let x = batch(&cfg, 3, 12);
    let units = [None, Some(FusionUnitKind::S), Some(FusionUnitKind::ST), Some(FusionUnitKind::SPlusST)];
    let mut seen = 0;
    for u1 in &units[1..] {
        for u2 in &units[1..] {
            let s = FusionStrategy::with_units(&net.layout(), &[*u1, *u2]).unwrap();
            let sub = materialize_strategy(&net, &s).unwrap();
            let got = sub.predict(&x, Mode::Train).unwrap().into_data();
            assert_eq!(got, logits(&net, &s.gates(), &x), "{}", s.unit_string());
            assert!(diff(&got, &reference_logits(&net, &s.gates(), &x)) < 1e-12);
            seen += 1;
        }
    }
    assert_eq!(seen, 9);
}

#[test]
fn all_skipped_depends_only_on_stem_and_head() {
    let cfg = small(1, 2);
    let net = build_template(&cfg, 13).unwrap();
    let x = batch(&cfg, 3, 14);
    let skip = FusionStrategy::with_units(&net.layout(), &[None, None]).unwrap();
    let base = materialize_strategy(&net, &skip).unwrap().predict(&x, Mode::Train).unwrap().into_data();
    let mut other = net.clone();
    let mut r = rng(15);
    for p in other.params_mut().iter_mut().filter(|p| p.id().starts_with("layer_")) {
        let shape = p.value().shape().to_vec();
        *p.value_mut() = random_tensor(&mut r, &shape);
    }
    assert_eq!(base, materialize_strategy(&other, &skip).unwrap().predict(&x, Mode::Train).unwrap().into_data());
    assert!(diff(&base, &reference_logits(&net, &skip.gates(), &x)) < 1e-12);
    let mut head_changed = net.clone();
    let h = head_changed.params_mut().get_mut("head/slice_0/weights").unwrap();
    *h.value_mut() = h.value().map(|v| v + 0.1);
    assert_ne!(base, materialize_strategy(&head_changed, &skip).unwrap().predict(&x, Mode::Train).unwrap().into_data());
}

#[test]
fn recover_round_trip_over_random_binary_gates() {
    let cfg = small(2, 2);
    let net = build_template(&cfg, 17).unwrap();
    let x = batch(&cfg, 2, 18);
    let mut r = rng(19);
    for _ in 0..100 {
        let mut g = GateSample::ones(&net.layout());
        for layer in &mut g.layers {
            for e in &mut layer.edges {
                *e = if r.random_bool(0.7) { 1.0 } else { 0.0 };
            }
            layer.s = if r.random_bool(0.6) { 1.0 } else { 0.0 };
            layer.st = if r.random_bool(0.6) { 1.0 } else { 0.0 };
        }
        let s = recover_strategy(&g);
        let sub = materialize_strategy(&net, &s).unwrap();
        assert_eq!(sub.predict(&x, Mode::Train).unwrap().into_data(), logits(&net, &g, &x));
        // non-skipped strategies survive gates -> strategy -> gates exactly
        if s.units().iter().all(Option::is_some) {
            assert_eq!(recover_strategy(&s.gates()), s);
        }
    }
}

#[test]
fn capacity_is_monotone() {
    let net = build_template(&small(2, 2), 0).unwrap();
    let layout = net.layout();
    let ids = |u| net.active_parameter_ids(&FusionStrategy::uniform(&layout, u)).unwrap();
    let (s, st, both) = (ids(FusionUnitKind::S), ids(FusionUnitKind::ST), ids(FusionUnitKind::SPlusST));
    let all = net.parameter_ids();
    assert!(s.is_subset(&both) && st.is_subset(&both) && both.is_subset(&all));
    assert!(s.len() < both.len());
    assert_eq!(both, all);
    let count = |u| net.active_param_count(&FusionStrategy::uniform(&layout, u)).unwrap();
    assert!(count(FusionUnitKind::S) < count(FusionUnitKind::SPlusST));
    assert_eq!(count(FusionUnitKind::SPlusST), net.params().total_elements());
    let mult = |u| net.mult_add_proxy(&FusionStrategy::uniform(&layout, u)).unwrap();
    assert!(mult(FusionUnitKind::S) < mult(FusionUnitKind::ST));
    assert!(mult(FusionUnitKind::ST) < mult(FusionUnitKind::SPlusST));
}

#[test]
fn edge_bits_reduce_capacity() {
    let net = build_template(&small(1, 2), 0).unwrap();
    let full = FusionStrategy::uniform(&net.layout(), FusionUnitKind::S);
    let partial = FusionStrategy::new(vec![
        LayerTriplet { l: 1, v: vec![true], u: Some(FusionUnitKind::S) },
        LayerTriplet { l: 2, v: vec![false, true], u: Some(FusionUnitKind::S) },
    ])
    .unwrap();
    let a = net.active_parameter_ids(&full).unwrap();
    let b = net.active_parameter_ids(&partial).unwrap();
    assert!(b.is_subset(&a));
    assert!(!b.contains("layer_2/edge_0/unit_S/kernel"));
}

#[test]
fn checkpoint_round_trip() {
    let net = build_template(&small(2, 1), 21).unwrap();
    let json = serde_json::to_string(&net.to_checkpoint()).unwrap();
    let back = TemplateNetwork::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
    assert_eq!(back.params().checksum(), net.params().checksum());
    let x = batch(net.config(), 2, 22);
    let g = GateSample::ones(&net.layout());
    assert_eq!(logits(&back, &g, &x), logits(&net, &g, &x));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dense_input_widths(nb in 1usize..4, lpb in 1usize..5, g in 1usize..6, stem in 1usize..9) {
        let cfg = TemplateConfig {
            num_blocks: nb,
            layers_per_block: lpb,
            growth_channels: g,
            stem_channels: stem,
            clip_shape: [1, 2, 8, 8],
            num_classes: 2,
            kernel_sizes: [1, 1, 1],
        };
        let net = build_template(&cfg, 0).unwrap();
        let mut block_in = stem;
        for b in 0..nb {
            for p in 0..lpb {
                prop_assert_eq!(net.layer_input_channels(b * lpb + p), block_in + p * g);
            }
            block_in = std::cmp::max(1, (block_in + lpb * g) / 2);
        }
        prop_assert_eq!(net.params().total_elements(), closed_form_params(&cfg));
    }
}
