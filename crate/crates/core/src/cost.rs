//! Static MAC and parameter counts.
//!
//! MACs are counted once each. Inside a stage every convolution runs at the
//! stage width with stride 1; a strided transition is charged to the first
//! layer of the next stage, which therefore produces the reduced width. For a
//! residual block entered through a strided transition, inner layers ahead of
//! the first spatial kernel still run at the unreduced width (the stride sits
//! on the spatial kernel), and the skip projection runs at the reduced width.

use crate::error::Result;
use crate::ir::{KernelKind, KernelSpec, NetworkSpec};
use crate::par::{self, Execution};

pub const UNIT_NAME: &str = "MFLOPs (MAC=1)";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostOptions {
    pub include_bias: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerCost {
    pub macs: u64,
    pub params: u64,
}

impl std::ops::Add for LayerCost {
    type Output = LayerCost;

    fn add(self, o: LayerCost) -> LayerCost {
        LayerCost {
            macs: self.macs + o.macs,
            params: self.params + o.params,
        }
    }
}

impl std::iter::Sum for LayerCost {
    fn sum<I: Iterator<Item = LayerCost>>(iter: I) -> Self {
        iter.fold(LayerCost::default(), |a, b| a + b)
    }
}

fn weights(layer: &KernelSpec, in_channels: usize) -> u64 {
    let k2 = (layer.kernel_width * layer.kernel_width) as u64;
    let (cin, cout) = (in_channels as u64, layer.out_channels as u64);
    let g = layer.groups.max(1) as u64;
    match layer.kind {
        KernelKind::Standard | KernelKind::Pw => k2 * cin * cout,
        KernelKind::Dw => k2 * cin,
        KernelKind::Gc | KernelKind::Gpw => k2 * (cin / g) * cout,
        KernelKind::Rpw => (cin / g) * cout,
        KernelKind::Shuffle | KernelKind::Residual => 0,
    }
}

fn bias(layer: &KernelSpec, opts: CostOptions) -> u64 {
    if opts.include_bias && layer.kind != KernelKind::Shuffle {
        layer.out_channels as u64
    } else {
        0
    }
}

/// Cost of one layer reading `in_channels` at output width `width`.
pub fn layer_cost(layer: &KernelSpec, in_channels: usize, width: usize, opts: CostOptions) -> LayerCost {
    layer_cost_entry(layer, in_channels, width, 1, opts)
}

/// Like [`layer_cost`], with `entry_factor > 1` when the layer opens a stage
/// through a strided reduction of that factor.
pub fn layer_cost_entry(
    layer: &KernelSpec,
    in_channels: usize,
    width: usize,
    entry_factor: usize,
    opts: CostOptions,
) -> LayerCost {
    let plane = (width * width) as u64;
    if layer.kind != KernelKind::Residual {
        let params = weights(layer, in_channels);
        return LayerCost {
            macs: params * plane,
            params: params + bias(layer, opts),
        };
    }
    let mut total = LayerCost::default();
    let mut ch = in_channels;
    let mut reduced = entry_factor <= 1;
    for l in &layer.inner {
        if l.kind.has_spatial_kernel() && l.kernel_width > 1 {
            reduced = true;
        }
        let w = if reduced { width } else { width * entry_factor };
        total = total + layer_cost(l, ch, w, opts);
        ch = l.out_channels;
    }
    if in_channels != layer.out_channels {
        let p = (in_channels * layer.out_channels) as u64;
        total = total
            + LayerCost {
                macs: p * plane,
                params: p + if opts.include_bias { layer.out_channels as u64 } else { 0 },
            };
    }
    total
}

pub fn fc_cost(inputs: usize, outputs: usize, opts: CostOptions) -> LayerCost {
    let p = (inputs * outputs) as u64;
    LayerCost {
        macs: p,
        params: p + if opts.include_bias { outputs as u64 } else { 0 },
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    /// `None` for classifier layers.
    pub stage: Option<usize>,
    pub layer: usize,
    pub label: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostSummary {
    pub macs: u64,
    pub params: u64,
    pub breakdown: Vec<CostRow>,
}

impl CostSummary {
    pub fn mflops(&self) -> f64 {
        self.macs as f64 / 1e6
    }

    /// MFLOPs rounded to the nearest ten, the granularity of the published tables.
    pub fn mflops_rounded(&self) -> u64 {
        mflops_rounded(self.macs)
    }

    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn stage_totals(&self, stage: usize) -> LayerCost {
        self.breakdown
            .iter()
            .filter(|r| r.stage == Some(stage))
            .map(|r| LayerCost {
                macs: r.macs,
                params: r.params,
            })
            .sum()
    }
}

pub fn mflops_rounded(macs: u64) -> u64 {
    ((macs as f64 / 1e7).round() as u64) * 10
}

pub fn network_cost(net: &NetworkSpec, opts: CostOptions) -> Result<CostSummary> {
    network_cost_with(net, opts, Execution::default())
}

pub fn network_cost_with(net: &NetworkSpec, opts: CostOptions, exec: Execution) -> Result<CostSummary> {
    net.ensure_valid()?;
    let shapes = net.stage_input_shapes();
    let idx: Vec<usize> = (0..net.stages.len()).collect();
    let per_stage = par::map_collect(exec, &idx, |&s| {
        let stage = &net.stages[s];
        let entry = match net.entry_transition(s) {
            t if t.is_strided() => t.factor(),
            _ => 1,
        };
        let width = shapes[s].width;
        let mut ch = shapes[s].channels;
        let mut rows = Vec::with_capacity(stage.layers.len());
        for (l, layer) in stage.layers.iter().enumerate() {
            let factor = if l == 0 { entry } else { 1 };
            let c = layer_cost_entry(layer, ch, width, factor, opts);
            rows.push(CostRow {
                stage: Some(s),
                layer: l,
                label: layer.label(),
                macs: c.macs,
                params: c.params,
            });
            ch = layer.out_channels;
        }
        rows
    });
    let mut breakdown: Vec<CostRow> = per_stage.into_iter().flatten().collect();
    let mut inputs = net.flatten_dim();
    let widths = net.head.hidden.iter().copied().chain(std::iter::once(net.head.classes));
    for (i, out) in widths.enumerate() {
        let c = fc_cost(inputs, out, opts);
        breakdown.push(CostRow {
            stage: None,
            layer: i,
            label: format!("fc-{inputs}-{out}"),
            macs: c.macs,
            params: c.params,
        });
        inputs = out;
    }
    Ok(CostSummary {
        macs: breakdown.iter().map(|r| r.macs).sum(),
        params: breakdown.iter().map(|r| r.params).sum(),
        breakdown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::Overlap;

    const NO_BIAS: CostOptions = CostOptions { include_bias: false };

    #[test]
    fn first_vgg_conv() {
        let c = layer_cost(&KernelSpec::standard(3, 64), 3, 32, NO_BIAS);
        assert_eq!(c.params, 1728);
        assert_eq!(c.macs, 1_769_472);
    }

    #[test]
    fn shuffle_is_free() {
        assert_eq!(layer_cost(&KernelSpec::shuffle(64, 4), 64, 16, NO_BIAS), LayerCost::default());
    }

    #[test]
    fn rpw_window_params() {
        let c = layer_cost(&KernelSpec::rpw(16, 2, Overlap::new(1, 2).unwrap()), 8, 4, NO_BIAS);
        assert_eq!(c.params, 64);
    }

    #[test]
    fn degenerate_groupings() {
        let pw = layer_cost(&KernelSpec::pw(32), 16, 8, NO_BIAS);
        assert_eq!(layer_cost(&KernelSpec::gpw(32, 1), 16, 8, NO_BIAS), pw);
        let dw = layer_cost(&KernelSpec::dw(3, 16), 16, 8, NO_BIAS);
        assert_eq!(layer_cost(&KernelSpec::gc(3, 16, 16), 16, 8, NO_BIAS), dw);
    }

    #[test]
    fn bias_flag_adds_out_channels() {
        let opts = CostOptions { include_bias: true };
        assert_eq!(layer_cost(&KernelSpec::standard(3, 64), 3, 32, opts).params, 1728 + 64);
        assert_eq!(fc_cost(512, 10, opts).params, 5130);
    }

    #[test]
    fn strided_bottleneck_entry() {
        let r = KernelSpec::residual(vec![KernelSpec::pw(128), KernelSpec::standard(3, 128), KernelSpec::pw(512)]);
        let plain = layer_cost(&r, 256, 16, NO_BIAS);
        let entry = layer_cost_entry(&r, 256, 16, 2, NO_BIAS);
        assert_eq!(entry.params, plain.params);
        assert_eq!(entry.macs - plain.macs, 256 * 128 * (32 * 32 - 16 * 16));
    }

    #[test]
    fn rounding() {
        assert_eq!(mflops_rounded(46_350_000), 50);
        assert_eq!(mflops_rounded(313_200_000), 310);
    }
}
