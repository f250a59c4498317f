//! Three-dimensional receptive field and its gain.
//!
//! Within a stage of input `w0 x w0 x c0`, layer `k` sees a window of width
//! `w_k = min(w_{k-1} + K - 1, w0)` and a channel coverage `c_k` given by a
//! per-kind property function. The volume is `w_k^d * c_k`. The gain of a
//! layer is its relative volume increase damped by how much of the stage
//! volume `V0 = w0^d * c0` was already covered.

use std::ops::Range;

use fixedbitset::FixedBitSet;

use crate::error::{Error, Result};
use crate::ir::{units, KernelKind, KernelSpec, NetworkSpec, TensorShape};
use crate::oracle;
use crate::par::{self, Execution};

pub const DEFAULT_ALPHA: f64 = 3.0;
/// Images: the width term is squared.
pub const IMAGE_DIMS: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfState {
    pub width: usize,
    pub channel_scalar: usize,
    /// Per output channel, the covered stage-input channels. Only filled in
    /// for stages evaluated exactly.
    pub channel_sets: Option<Vec<FixedBitSet>>,
    pub volume: u64,
}

impl RfState {
    pub fn new(width: usize, channel_scalar: usize, d: u32) -> Self {
        Self {
            width,
            channel_scalar,
            channel_sets: None,
            volume: (width as u64).pow(d) * channel_scalar as u64,
        }
    }

    /// State before a stage's first layer.
    pub fn base() -> Self {
        Self::new(1, 1, 1)
    }
}

pub fn rf_width_step(prev_width: usize, kernel_width: usize, w0: usize) -> usize {
    (prev_width + kernel_width.saturating_sub(1)).min(w0)
}

fn width_through(kernel: &KernelSpec, prev_width: usize, w0: usize) -> usize {
    if kernel.kind == KernelKind::Residual {
        kernel
            .inner
            .iter()
            .fold(prev_width, |w, l| rf_width_step(w, l.kernel_width, w0))
    } else {
        rf_width_step(prev_width, kernel.kernel_width, w0)
    }
}

/// Scalar channel coverage after `kernel`, which reads `in_channels`.
pub fn rf_channel_step(prev: usize, kernel: &KernelSpec, in_channels: usize, c0: usize) -> Result<usize> {
    let g = match kernel.kind {
        KernelKind::Standard | KernelKind::Pw => c0,
        KernelKind::Dw | KernelKind::Shuffle => prev,
        KernelKind::Gc | KernelKind::Gpw => {
            if kernel.groups == 0 {
                return Err(Error::UnsupportedKind(kernel.kind));
            }
            prev.saturating_mul(in_channels / kernel.groups)
        }
        KernelKind::Rpw => {
            if kernel.groups == 0 {
                return Err(Error::UnsupportedKind(kernel.kind));
            }
            let w = in_channels / kernel.groups;
            let s = w - kernel.overlap.shared_channels(w);
            prev + w.saturating_sub(1) * s
        }
        KernelKind::Residual => {
            let mut c = prev;
            let mut ch = in_channels;
            for l in &kernel.inner {
                c = rf_channel_step(c, l, ch, c0)?;
                ch = l.out_channels;
            }
            c
        }
    };
    Ok(g.min(c0))
}

/// Stages whose channel coverage the scalar recurrence cannot express: any
/// shuffle or rolling pointwise layer, or more than one grouped layer.
pub fn needs_exact(layers: &[KernelSpec]) -> bool {
    let mut grouped = 0;
    let mut visit = |l: &KernelSpec| match l.kind {
        KernelKind::Shuffle | KernelKind::Rpw => true,
        KernelKind::Gc | KernelKind::Gpw => {
            grouped += 1;
            grouped > 1
        }
        _ => false,
    };
    layers.iter().any(|l| {
        if l.kind == KernelKind::Residual {
            l.inner.iter().any(&mut visit)
        } else {
            visit(l)
        }
    })
}

/// Per-layer states of one stage.
pub fn stage_profile(layers: &[KernelSpec], input: TensorShape, d: u32) -> Result<Vec<RfState>> {
    let (w0, c0) = (input.width, input.channels);
    let exact = if needs_exact(layers) {
        Some(oracle::channel_sets(layers, c0)?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(layers.len());
    let mut width = 1;
    let mut channels = 1;
    let mut in_ch = c0;
    for (k, layer) in layers.iter().enumerate() {
        width = width_through(layer, width, w0);
        let state = match &exact {
            Some(sets) => {
                let per_channel = &sets[k];
                channels = per_channel.iter().map(|s| s.count_ones(..)).min().unwrap_or(0);
                RfState {
                    channel_sets: Some(per_channel.clone()),
                    ..RfState::new(width, channels, d)
                }
            }
            None => {
                channels = rf_channel_step(channels, layer, in_ch, c0)?;
                RfState::new(width, channels, d)
            }
        };
        in_ch = layer.out_channels;
        out.push(state);
    }
    Ok(out)
}

pub fn gain(prev: &RfState, cur: &RfState, v0: u64, alpha: f64) -> f64 {
    gain_from_volumes(prev.volume, cur.volume, v0, alpha)
}

pub fn gain_from_volumes(prev: u64, cur: u64, v0: u64, alpha: f64) -> f64 {
    let p = prev as f64;
    (cur as f64 - p) / p * (-alpha * p / v0 as f64).exp()
}

pub fn stage_volume(input: TensorShape, d: u32) -> u64 {
    input.volume(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainRecord {
    pub stage: usize,
    pub layer: usize,
    pub gain: f64,
    pub rf_before: RfState,
    pub rf_after: RfState,
    pub v0: u64,
    pub alpha: f64,
}

/// Gains of every layer of one stage, each relative to the state before it.
pub fn stage_gains(layers: &[KernelSpec], input: TensorShape, alpha: f64, d: u32) -> Result<Vec<f64>> {
    let v0 = stage_volume(input, d);
    let states = stage_profile(layers, input, d)?;
    let mut prev = 1;
    Ok(states
        .iter()
        .map(|s| {
            let g = gain_from_volumes(prev, s.volume, v0, alpha);
            prev = s.volume;
            g
        })
        .collect())
}

/// Gain of each movable unit, from the state before the unit to the state
/// after its last layer.
pub fn unit_gains(layers: &[KernelSpec], input: TensorShape, alpha: f64, d: u32) -> Result<Vec<(Range<usize>, f64)>> {
    let v0 = stage_volume(input, d);
    let states = stage_profile(layers, input, d)?;
    Ok(units(layers)
        .into_iter()
        .map(|r| {
            let before = if r.start == 0 { 1 } else { states[r.start - 1].volume };
            let after = states[r.end - 1].volume;
            (r, gain_from_volumes(before, after, v0, alpha))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub kind: KernelKind,
    pub label: String,
    pub state: RfState,
    pub record: GainRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkProfile {
    pub alpha: f64,
    pub d: u32,
    pub rows: Vec<ProfileRow>,
}

impl NetworkProfile {
    pub fn total_gain(&self) -> f64 {
        self.rows.iter().map(|r| r.record.gain).sum()
    }

    pub fn stage_rows(&self, stage: usize) -> impl Iterator<Item = &ProfileRow> {
        self.rows.iter().filter(move |r| r.record.stage == stage)
    }
}

pub fn network_profile(net: &NetworkSpec, alpha: f64, d: u32) -> Result<NetworkProfile> {
    network_profile_with(net, alpha, d, Execution::default())
}

pub fn network_profile_with(net: &NetworkSpec, alpha: f64, d: u32, exec: Execution) -> Result<NetworkProfile> {
    net.ensure_valid()?;
    let shapes = net.stage_input_shapes();
    let idx: Vec<usize> = (0..net.stages.len()).collect();
    let per_stage = par::try_map_collect(exec, &idx, |&s| {
        let stage = &net.stages[s];
        let input = shapes[s];
        let v0 = stage_volume(input, d);
        let states = stage_profile(&stage.layers, input, d)?;
        let mut prev = RfState::base();
        let mut rows = Vec::with_capacity(states.len());
        for (l, (layer, state)) in stage.layers.iter().zip(states).enumerate() {
            let record = GainRecord {
                stage: s,
                layer: l,
                gain: gain(&prev, &state, v0, alpha),
                rf_before: prev,
                rf_after: state.clone(),
                v0,
                alpha,
            };
            prev = state.clone();
            rows.push(ProfileRow {
                kind: layer.kind,
                label: layer.label(),
                state,
                record,
            });
        }
        Ok::<_, Error>(rows)
    })?;
    Ok(NetworkProfile {
        alpha,
        d,
        rows: per_stage.into_iter().flatten().collect(),
    })
}

pub fn total_gain(net: &NetworkSpec, alpha: f64) -> Result<f64> {
    Ok(network_profile(net, alpha, IMAGE_DIMS)?.total_gain())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_steps() {
        assert_eq!(rf_width_step(3, 3, 8), 5);
        assert_eq!(rf_width_step(1, 1, 8), 1);
        assert_eq!(rf_width_step(3, 3, 4), 4);
    }

    #[test]
    fn channel_steps() {
        assert_eq!(rf_channel_step(128, &KernelSpec::standard(3, 256), 128, 128).unwrap(), 128);
        assert_eq!(rf_channel_step(5, &KernelSpec::dw(3, 64), 64, 64).unwrap(), 5);
        assert_eq!(rf_channel_step(1, &KernelSpec::gpw(8, 2), 8, 8).unwrap(), 4);
    }

    #[test]
    fn three_convs_on_eight_by_eight() {
        let layers = vec![KernelSpec::standard(3, 256); 3];
        let p = stage_profile(&layers, TensorShape::new(8, 128), 2).unwrap();
        let v: Vec<u64> = p.iter().map(|s| s.volume).collect();
        assert_eq!(v, vec![1152, 3200, 6272]);
    }

    #[test]
    fn pw_alone_and_dw_pw() {
        let p = stage_profile(&[KernelSpec::pw(16)], TensorShape::new(4, 16), 2).unwrap();
        assert_eq!(p[0].volume, 16);
        let p = stage_profile(&[KernelSpec::dw(3, 8), KernelSpec::pw(8)], TensorShape::new(6, 8), 2).unwrap();
        assert_eq!(p.iter().map(|s| s.volume).collect::<Vec<_>>(), vec![9, 72]);
    }

    #[test]
    fn gain_zero_on_no_growth() {
        let s = RfState::new(3, 4, 2);
        assert_eq!(gain(&s, &s, 100, 3.0), 0.0);
    }

    #[test]
    fn exact_mode_for_shuffle_stages() {
        let layers = [KernelSpec::gc(3, 8, 2), KernelSpec::shuffle(8, 2), KernelSpec::gpw(8, 2)];
        assert!(needs_exact(&layers));
        assert!(!needs_exact(&[KernelSpec::dw(3, 8), KernelSpec::pw(8)]));
        let p = stage_profile(&layers, TensorShape::new(8, 8), 2).unwrap();
        assert_eq!(p[0].channel_scalar, 4);
        assert_eq!(p[2].channel_scalar, 8);
        assert!(p[2].channel_sets.is_some());
    }

    #[test]
    fn one_dimensional_volume() {
        let p = stage_profile(&vec![KernelSpec::standard(3, 4); 2], TensorShape::new(8, 4), 1).unwrap();
        assert_eq!(p[1].volume, 5 * 4);
    }
}
