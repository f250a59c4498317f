mod common;

use proptest::prelude::*;
use rfopt_core::cost::{layer_cost, CostOptions};
use rfopt_core::decomposer::rpw_geometry;
use rfopt_core::format::{parse_network, serialize_network};
use rfopt_core::oracle::{self, center, channel_sources, trace_neuron};
use rfopt_core::rf::{self, stage_gains, stage_profile, IMAGE_DIMS};
use rfopt_core::{KernelKind, KernelSpec, Overlap, TensorShape};

const OPTS: CostOptions = CostOptions { include_bias: false };

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn format_round_trip(net in common::network(8)) {
        prop_assert!(net.validate().is_empty(), "{:?}", net.validate());
        let text = serialize_network(&net);
        let back = parse_network(&text).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert_eq!(serialize_network(&back), text);
    }

    #[test]
    fn shape_propagation_is_compositional(net in common::network(8)) {
        let shapes = net.stage_input_shapes();
        for k in 0..shapes.len() - 1 {
            prop_assert_eq!(shapes[k + 1].width, shapes[k].width / net.stages[k].transition.factor());
        }
    }

    #[test]
    fn volumes_monotone_and_gains_nonnegative((layers, input) in common::stage(8, 12, 16, 6)) {
        let states = stage_profile(&layers, input, IMAGE_DIMS).unwrap();
        let v0 = rf::stage_volume(input, IMAGE_DIMS);
        for pair in states.windows(2) {
            prop_assert!(pair[1].volume >= pair[0].volume);
        }
        prop_assert!(states.iter().all(|s| s.volume <= v0));
        for g in stage_gains(&layers, input, 3.0, IMAGE_DIMS).unwrap() {
            prop_assert!(g >= 0.0);
        }
    }

    #[test]
    fn saturated_layers_gain_nothing((layers, input) in common::stage(3, 8, 16, 6)) {
        let states = stage_profile(&layers, input, IMAGE_DIMS).unwrap();
        let gains = stage_gains(&layers, input, 3.0, IMAGE_DIMS).unwrap();
        if let Some(first) = states.iter().position(|s| s.width == input.width && s.channel_scalar == input.channels) {
            for g in &gains[first + 1..] {
                prop_assert_eq!(*g, 0.0);
            }
        }
    }

    #[test]
    fn second_appended_conv_gains_less((layers, input) in common::stage(3, 16, 16, 4), k in prop::sample::select(vec![3usize, 5])) {
        let c = layers.last().unwrap().out_channels;
        let mut grown = layers.clone();
        grown.push(KernelSpec::standard(k, c));
        grown.push(KernelSpec::standard(k, c));
        let g = stage_gains(&grown, input, 3.0, IMAGE_DIMS).unwrap();
        let (a, b) = (g[g.len() - 2], g[g.len() - 1]);
        if a > 0.0 {
            prop_assert!(b < a, "{a} then {b}");
        }
    }

    #[test]
    fn oracle_matches_recurrence_on_plain_stages((layers, input) in common::stage(3, 8, 16, 4)) {
        let scalar = stage_profile(&layers, input, IMAGE_DIMS).unwrap();
        let exact = oracle::trace_stage(&layers, input).unwrap();
        for (s, e) in scalar.iter().zip(&exact) {
            prop_assert_eq!(s.volume, e.volume);
            prop_assert_eq!(s.width, e.spatial_extent);
            prop_assert_eq!(s.channel_scalar, e.channel_count);
        }
    }

    #[test]
    fn oracle_matches_profile_on_every_kind((layers, input) in common::stage(7, 8, 16, 5)) {
        let scalar = stage_profile(&layers, input, IMAGE_DIMS).unwrap();
        let exact = oracle::trace_stage(&layers, input).unwrap();
        for (s, e) in scalar.iter().zip(&exact) {
            prop_assert_eq!(s.volume, e.volume);
            prop_assert_eq!(s.channel_scalar, e.channel_count);
        }
    }

    #[test]
    fn interior_neurons_agree((layers, input) in common::stage(3, 12, 8, 3)) {
        let reach: usize = layers.iter().map(|l| l.kernel_width / 2).sum();
        let w = input.width;
        prop_assume!(w > 2 * reach + 1);
        let last = layers.len() - 1;
        let base = trace_neuron(&layers, input, last, 0, center(w)).unwrap().volume();
        for p in reach..w - reach {
            prop_assert_eq!(trace_neuron(&layers, input, last, 0, (p, reach)).unwrap().volume(), base);
        }
    }

    #[test]
    fn coverage_grows_along_stage((layers, input) in common::stage(7, 8, 8, 4)) {
        let pos = center(input.width);
        for k in 1..layers.len() {
            let prev_out = layers[k - 1].out_channels;
            let here = &layers[k];
            if here.kind == KernelKind::Residual {
                continue;
            }
            for j in 0..here.out_channels {
                let cover = trace_neuron(&layers, input, k, j, pos).unwrap();
                for i in channel_sources(here, prev_out, j).unwrap() {
                    let before = trace_neuron(&layers, input, k - 1, i, pos).unwrap();
                    for (a, b) in before.masks.iter().zip(&cover.masks) {
                        prop_assert!(a.is_subset(b));
                    }
                }
            }
        }
    }

    #[test]
    fn rpw_cost_ignores_overlap(c in 1usize..=8, g in 1usize..=4, out in 1usize..64, w in 1usize..16, n in 0u32..4) {
        let cin = c * g;
        let a = layer_cost(&KernelSpec::rpw(out, g, Overlap::ZERO), cin, w, OPTS);
        let b = layer_cost(&KernelSpec::rpw(out, g, Overlap::new(n, 4).unwrap()), cin, w, OPTS);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn factorized_blocks_are_cheaper(cin in 2usize..=128, cout in 2usize..=128, w in 1usize..=32, g in 2usize..=8) {
        let std = layer_cost(&KernelSpec::standard(3, cout), cin, w, OPTS);
        let b = layer_cost(&KernelSpec::dw(3, cin), cin, w, OPTS) + layer_cost(&KernelSpec::pw(cout), cin, w, OPTS);
        prop_assert!(b.macs < std.macs && b.params < std.params);
        let cin = cin * g;
        let b = layer_cost(&KernelSpec::dw(3, cin), cin, w, OPTS) + layer_cost(&KernelSpec::pw(cout), cin, w, OPTS);
        let f = layer_cost(&KernelSpec::dw(3, cin), cin, w, OPTS)
            + layer_cost(&KernelSpec::rpw(cout, g, Overlap::new(1, 2).unwrap()), cin, w, OPTS);
        prop_assert!(f.macs < b.macs && f.params < b.params);
    }

    #[test]
    fn degenerate_group_costs(c in 1usize..=64, w in 1usize..=32, k in prop::sample::select(vec![1usize, 3, 5])) {
        prop_assert_eq!(
            layer_cost(&KernelSpec::gpw(c, 1), c, w, OPTS),
            layer_cost(&KernelSpec::pw(c), c, w, OPTS)
        );
        prop_assert_eq!(
            layer_cost(&KernelSpec::gc(k, c, c), c, w, OPTS),
            layer_cost(&KernelSpec::dw(k, c), c, w, OPTS)
        );
    }
}

fn rpw_union(out: usize, g: usize, o: Overlap, cin: usize) -> Vec<bool> {
    let layer = KernelSpec::rpw(out, g, o);
    let mut seen = vec![false; cin];
    for f in 0..out {
        for i in channel_sources(&layer, cin, f).unwrap() {
            seen[i] = true;
        }
    }
    seen
}

#[test]
fn rpw_union_covers_exactly_when_the_last_window_reaches_the_end() {
    let overlaps = [(0, 1), (1, 4), (1, 3), (1, 2), (2, 3), (3, 4)];
    for cin in 1..=64usize {
        for g in (1..=cin).filter(|g| cin % g == 0) {
            for &(n, d) in &overlaps {
                let o = Overlap::new(n, d).unwrap();
                let (w, s) = rpw_geometry(g, o, cin).unwrap();
                for out in 1..=cin + 1 {
                    let covered = rpw_union(out, g, o, cin).iter().all(|&b| b);
                    let expected = (out - 1) * s + w >= cin;
                    assert_eq!(covered, expected, "cin={cin} g={g} o={o} out={out} W={w} s={s}");
                }
            }
        }
    }
}

#[test]
fn zero_overlap_windows_partition_channels() {
    for cin in 1..=64usize {
        for g in (1..=cin).filter(|g| cin % g == 0) {
            let layer = KernelSpec::rpw(g, g, Overlap::ZERO);
            let mut count = vec![0; cin];
            for f in 0..g {
                for i in channel_sources(&layer, cin, f).unwrap() {
                    count[i] += 1;
                }
            }
            assert!(count.iter().all(|&c| c == 1), "cin={cin} g={g}");
            let gpw = KernelSpec::gpw(g, g);
            for f in 0..g {
                assert_eq!(channel_sources(&layer, cin, f).unwrap(), channel_sources(&gpw, cin, f).unwrap());
            }
        }
    }
}

#[test]
fn even_kernels_are_rejected() {
    let layers = vec![KernelSpec::standard(2, 4)];
    assert!(!rfopt_core::ir::validate_layers(&layers, 4).is_empty());
    assert!(oracle::trace_stage(&layers, TensorShape::new(4, 4)).is_err());
}

#[test]
fn one_dimensional_volume_uses_width_once() {
    let layers = vec![KernelSpec::standard(3, 4), KernelSpec::standard(3, 4)];
    let s = stage_profile(&layers, TensorShape::new(8, 4), 1).unwrap();
    assert_eq!(s.iter().map(|x| x.volume).collect::<Vec<_>>(), vec![12, 20]);
}
