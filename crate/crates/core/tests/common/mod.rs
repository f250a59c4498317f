//! Random valid architectures for property tests.
#![allow(dead_code)]

use proptest::prelude::*;
use rfopt_core::{Head, KernelSpec, NetworkSpec, Overlap, StageSpec, TensorShape, Transition};

/// Raw draw for one layer; interpreted against the running channel count.
pub type LayerDraw = (u8, u8, u8, u8);

const WIDTHS: [usize; 3] = [1, 3, 5];
const CHANNELS: [usize; 4] = [2, 4, 8, 16];
const OVERLAPS: [(u32, u32); 4] = [(0, 1), (1, 2), (1, 3), (3, 4)];

fn divisor(ch: usize, pick: u8) -> usize {
    let ds: Vec<usize> = (1..=ch).filter(|g| ch % g == 0 && *g <= 8).collect();
    ds[pick as usize % ds.len()]
}

/// Builds one valid layer from `draw`, given `ch` input channels.
/// `kinds` limits the menu: 3 gives {Standard, PW, DW}; 8 adds GC, GPW,
/// RPW, Shuffle and identity residual blocks.
pub fn build_layer(draw: LayerDraw, ch: usize, kinds: u8) -> KernelSpec {
    let (kind, a, b, c) = draw;
    let k = WIDTHS[a as usize % WIDTHS.len()];
    let out = CHANNELS[b as usize % CHANNELS.len()];
    match kind % kinds {
        0 => KernelSpec::standard(k, out),
        1 => KernelSpec::pw(out),
        2 => KernelSpec::dw(k, ch),
        3 => {
            let g = divisor(ch, c);
            KernelSpec::gc(k, g * (out / g).max(1), g)
        }
        4 => {
            let g = divisor(ch, c);
            KernelSpec::gpw(g * (out / g).max(1), g)
        }
        5 => {
            let g = divisor(ch, c);
            let (n, d) = OVERLAPS[a as usize % OVERLAPS.len()];
            KernelSpec::rpw(out, g, Overlap::new(n, d).unwrap())
        }
        6 => KernelSpec::shuffle(ch, divisor(ch, c)),
        _ => KernelSpec::residual(vec![KernelSpec::pw(out), KernelSpec::dw(k, out), KernelSpec::pw(ch)]),
    }
}

pub fn build_layers(draws: &[LayerDraw], c0: usize, kinds: u8) -> Vec<KernelSpec> {
    let mut ch = c0;
    draws
        .iter()
        .map(|&d| {
            let l = build_layer(d, ch, kinds);
            ch = l.out_channels;
            l
        })
        .collect()
}

pub fn draws(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<LayerDraw>> {
    prop::collection::vec(any::<LayerDraw>(), len)
}

/// A single stage: `(layers, input shape)`.
pub fn stage(kinds: u8, max_width: usize, max_channels: usize, len: usize) -> impl Strategy<Value = (Vec<KernelSpec>, TensorShape)> {
    (1..=max_width, 1..=max_channels, draws(1..=len))
        .prop_map(move |(w, c, d)| (build_layers(&d, c, kinds), TensorShape::new(w, c)))
}

/// Whole networks with pooling transitions between stages.
pub fn network(kinds: u8) -> impl Strategy<Value = NetworkSpec> {
    (
        prop::sample::select(vec![8usize, 16, 32]),
        prop::sample::select(vec![1usize, 3, 4]),
        prop::collection::vec(draws(1..=4), 1..=3),
        prop::collection::vec(1usize..64, 0..=2),
        1usize..20,
        any::<bool>(),
    )
        .prop_map(move |(width, channels, stage_draws, hidden, classes, strided)| {
            let last = stage_draws.len() - 1;
            let mut ch = channels;
            let stages = stage_draws
                .iter()
                .enumerate()
                .map(|(s, d)| {
                    let layers = build_layers(d, ch, kinds);
                    ch = layers.last().unwrap().out_channels;
                    let transition = match (s == last, strided) {
                        (true, _) => Transition::None,
                        (false, true) => Transition::Strided(2),
                        (false, false) => Transition::MaxPool(2),
                    };
                    StageSpec::new(layers, transition)
                })
                .collect();
            NetworkSpec {
                name: format!("random-{width}-{channels}"),
                input: TensorShape::new(width, channels),
                stem: Transition::None,
                stages,
                head: Head { hidden, classes },
            }
        })
}
