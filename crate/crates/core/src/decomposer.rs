//! Kernel-level rewriting: block templates, rolling pointwise windows, and
//! the replacement-rule check that guards substituting standard convolutions.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Location, Result};
use crate::ir::{validate_layers, KernelKind, KernelSpec, NetworkSpec, Overlap, TensorShape, Violation};
use crate::oracle::{self, CompactReport, QualityReport, MAX_CHANNELS, MAX_WIDTH};
use crate::par::{self, Execution};

/// Channel interval read by one rolling pointwise filter. When `wraps` is set
/// the interval continues from channel 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RpwWindow {
    pub start: usize,
    pub length: usize,
    pub wraps: bool,
}

impl RpwWindow {
    pub fn channels(&self, in_channels: usize) -> impl Iterator<Item = usize> {
        let start = self.start;
        (0..self.length).map(move |i| (start + i) % in_channels)
    }
}

fn invalid(message: String) -> Error {
    Error::Validation(vec![Violation {
        location: Location::root(),
        inner: None,
        message,
    }])
}

/// Window width `W = in_channels / groups` and stride `W - floor(overlap * W)`.
pub fn rpw_geometry(groups: usize, overlap: Overlap, in_channels: usize) -> Result<(usize, usize)> {
    if groups == 0 || in_channels % groups != 0 {
        return Err(invalid(format!("groups {groups} must divide in-channels {in_channels}")));
    }
    if !overlap.is_proper() {
        return Err(invalid(format!("overlap must be < 1, got {overlap}")));
    }
    let w = in_channels / groups;
    Ok((w, w - overlap.shared_channels(w)))
}

pub fn rpw_window(filter: usize, groups: usize, overlap: Overlap, in_channels: usize) -> Result<RpwWindow> {
    let (w, s) = rpw_geometry(groups, overlap, in_channels)?;
    let start = (filter * s) % in_channels;
    Ok(RpwWindow {
        start,
        length: w,
        wraps: start + w > in_channels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockTemplate {
    /// A single standard convolution.
    S,
    /// Depthwise then pointwise (Xception-style separable convolution).
    A,
    /// Depthwise then pointwise (MobileNet-style).
    B,
    /// Group convolution, shuffle, group pointwise; twice.
    C,
    /// ShuffleNet-style unit without the residual add: group pointwise,
    /// shuffle, depthwise, group pointwise; twice.
    D,
    /// Depthwise then rolling pointwise.
    F,
}

impl BlockTemplate {
    pub const ALL: [BlockTemplate; 6] = [
        BlockTemplate::S,
        BlockTemplate::A,
        BlockTemplate::B,
        BlockTemplate::C,
        BlockTemplate::D,
        BlockTemplate::F,
    ];

    pub fn replaces_standard(&self) -> usize {
        match self {
            BlockTemplate::C | BlockTemplate::D => 2,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BlockTemplate::S => "standard",
            BlockTemplate::A => "dw_pw_xception",
            BlockTemplate::B => "dw_pw",
            BlockTemplate::C => "gc_shuffle_gpw",
            BlockTemplate::D => "shufflenet",
            BlockTemplate::F => "dw_rpw",
        }
    }

    pub fn uses_groups(&self) -> bool {
        matches!(self, BlockTemplate::C | BlockTemplate::D | BlockTemplate::F)
    }
}

impl fmt::Display for BlockTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "s" | "standard" => BlockTemplate::S,
            "a" | "dw_pw_xception" | "xception" => BlockTemplate::A,
            "b" | "dw_pw" | "mobilenet" => BlockTemplate::B,
            "c" | "gc_shuffle_gpw" | "gc_shuffle" => BlockTemplate::C,
            "d" | "shufflenet" => BlockTemplate::D,
            "f" | "dw_rpw" | "rpw" => BlockTemplate::F,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown block `{s}` (expected one of standard, dw_pw_xception, dw_pw, gc_shuffle_gpw, shufflenet, dw_rpw)"
                )))
            }
        })
    }
}

/// A template with its group and overlap parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub template: BlockTemplate,
    pub groups: usize,
    pub overlap: Overlap,
}

impl Block {
    pub fn new(template: BlockTemplate) -> Self {
        Self {
            template,
            groups: 1,
            overlap: Overlap::ZERO,
        }
    }

    pub fn with_groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }

    pub fn with_overlap(self, overlap: Overlap) -> Self {
        Self { overlap, ..self }
    }

    pub fn label(&self) -> String {
        match self.template {
            BlockTemplate::F => format!("{}-g{}-o{}", self.template, self.groups, self.overlap),
            t if t.uses_groups() => format!("{}-g{}", t, self.groups),
            t => t.to_string(),
        }
    }

    /// Layers replacing `replaces_standard` convolutions of width `kernel`.
    pub fn instantiate(&self, in_channels: usize, out_channels: usize, kernel: usize) -> Result<Vec<KernelSpec>> {
        let g = self.groups;
        let o = out_channels;
        let layers = match self.template {
            BlockTemplate::S => vec![KernelSpec::standard(kernel, o)],
            BlockTemplate::A | BlockTemplate::B => vec![KernelSpec::dw(kernel, in_channels), KernelSpec::pw(o)],
            BlockTemplate::C => {
                let unit = [KernelSpec::gc(kernel, o, g), KernelSpec::shuffle(o, g), KernelSpec::gpw(o, g)];
                unit.iter().chain(unit.iter()).cloned().collect()
            }
            BlockTemplate::D => {
                let unit = [
                    KernelSpec::gpw(o, g),
                    KernelSpec::shuffle(o, g),
                    KernelSpec::dw(kernel, o),
                    KernelSpec::gpw(o, g),
                ];
                unit.iter().chain(unit.iter()).cloned().collect()
            }
            BlockTemplate::F => vec![KernelSpec::dw(kernel, in_channels), KernelSpec::rpw(o, g, self.overlap)],
        };
        let v = validate_layers(&layers, in_channels);
        if v.is_empty() {
            Ok(layers)
        } else {
            Err(Error::Validation(v))
        }
    }
}

pub fn instantiate_block(block: &Block, in_channels: usize, out_channels: usize) -> Result<Vec<KernelSpec>> {
    block.instantiate(in_channels, out_channels, oracle::REFERENCE_KERNEL)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleReport {
    pub block: String,
    pub stack_depth: usize,
    pub quality: bool,
    pub compact: bool,
    pub quality_report: QualityReport,
    pub compact_report: CompactReport,
    /// Shape the oracle actually ran on.
    pub shape: TensorShape,
    /// Set when the requested shape was reduced to fit the oracle bounds.
    pub scaling: Option<String>,
}

impl RuleReport {
    pub fn passes(&self) -> bool {
        self.quality && self.compact
    }

    pub fn summary(&self) -> String {
        format!(
            "{} x{} on {}: quality={} compact={}{}",
            self.block,
            self.stack_depth,
            self.shape,
            self.quality,
            self.compact,
            self.scaling.as_ref().map(|s| format!(" ({s})")).unwrap_or_default()
        )
    }
}

/// Reduces `shape` into oracle bounds, halving channels while the group
/// count still divides them, so group ratios survive.
pub fn scale_to_bounds(shape: TensorShape, groups: usize) -> (TensorShape, Option<String>) {
    let g = groups.max(1);
    let width = shape.width.min(MAX_WIDTH);
    let mut channels = shape.channels;
    while channels > MAX_CHANNELS && channels % 2 == 0 && (channels / 2) % g == 0 {
        channels /= 2;
    }
    let scaled = TensorShape::new(width, channels);
    if scaled == shape {
        (shape, None)
    } else {
        (scaled, Some(format!("evaluated at {scaled} instead of {shape}")))
    }
}

pub fn verify_replacement(block: &Block, shape: TensorShape, stack_depth: usize) -> Result<RuleReport> {
    verify_replacement_with(block, shape, stack_depth, Execution::default())
}

pub fn verify_replacement_with(
    block: &Block,
    shape: TensorShape,
    stack_depth: usize,
    exec: Execution,
) -> Result<RuleReport> {
    if stack_depth == 0 {
        return Err(Error::InvalidArgument("stack depth must be >= 1".into()));
    }
    let (eval, scaling) = scale_to_bounds(shape, block.groups);
    let c = eval.channels;
    let unit = instantiate_block(block, c, c)?;
    let stacked: Vec<KernelSpec> = unit.iter().cycle().take(unit.len() * stack_depth).cloned().collect();
    let refs = block.template.replaces_standard();
    let quality_report = oracle::check_quality_with(&stacked, refs * stack_depth, eval, exec)?;
    let compact_report = oracle::check_compact_with(&unit, refs, eval, exec)?;
    Ok(RuleReport {
        block: block.label(),
        stack_depth,
        quality: quality_report.holds,
        compact: compact_report.holds,
        quality_report,
        compact_report,
        shape: eval,
        scaling,
    })
}

/// Smallest stack depth in `1..=max_depth` at which the stacked block
/// satisfies quality, if any.
pub fn minimal_quality_depth(block: &Block, shape: TensorShape, max_depth: usize) -> Result<Option<usize>> {
    for d in 1..=max_depth {
        if verify_replacement(block, shape, d)?.quality {
            return Ok(Some(d));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DecomposeOptions {
    pub verify: bool,
    /// Also rewrite the network's first convolution.
    pub include_first: bool,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub net: NetworkSpec,
    pub replaced: usize,
    pub reports: Vec<(usize, RuleReport)>,
}

fn is_candidate(layer: &KernelSpec) -> bool {
    layer.kind == KernelKind::Standard && layer.kernel_width > 1
}

/// Rewrites a layer list. `skip_first` leaves the first top-level layer alone.
fn rewrite_layers(
    layers: &[KernelSpec],
    in_channels: usize,
    block: &Block,
    skip_first: bool,
    stage: usize,
) -> Result<(Vec<KernelSpec>, usize, usize)> {
    let n = block.template.replaces_standard();
    let mut out = Vec::with_capacity(layers.len() * 2);
    let mut replaced = 0;
    let mut blocks = 0;
    let mut ch = in_channels;
    let mut i = 0;
    while i < layers.len() {
        let layer = &layers[i];
        if layer.kind == KernelKind::Residual {
            let (inner, r, b) = rewrite_layers(&layer.inner, ch, block, false, stage)?;
            replaced += r;
            blocks += b;
            out.push(KernelSpec::residual(inner));
        } else if is_candidate(layer) && !(skip_first && i == 0) {
            let run = layers[i..].iter().take_while(|l| is_candidate(l)).count();
            if run % n != 0 {
                return Err(Error::OddRunLength { stage, run });
            }
            for pair in layers[i..i + run].chunks(n) {
                let last = pair.last().expect("chunk is non-empty");
                out.extend(block.instantiate(ch, last.out_channels, last.kernel_width)?);
                ch = last.out_channels;
                replaced += n;
                blocks += 1;
            }
            i += run;
            continue;
        } else {
            out.push(layer.clone());
        }
        ch = layer.out_channels;
        i += 1;
    }
    Ok((out, replaced, blocks))
}

pub fn decompose(net: &NetworkSpec, block: &Block, opts: DecomposeOptions) -> Result<Decomposition> {
    decompose_with(net, block, opts, Execution::default())
}

pub fn decompose_with(net: &NetworkSpec, block: &Block, opts: DecomposeOptions, exec: Execution) -> Result<Decomposition> {
    if block.template == BlockTemplate::S {
        return Err(Error::InvalidArgument("decomposing into standard convolutions is a no-op".into()));
    }
    net.ensure_valid()?;
    let shapes = net.stage_input_shapes();
    let idx: Vec<usize> = (0..net.stages.len()).collect();
    let rewritten = par::try_map_collect(exec, &idx, |&s| {
        let skip_first = s == 0 && !opts.include_first;
        let (layers, replaced, blocks) = rewrite_layers(&net.stages[s].layers, shapes[s].channels, block, skip_first, s)?;
        let report = if opts.verify && blocks > 0 {
            let shape = TensorShape::new(shapes[s].width, net.stages[s].out_channels(shapes[s].channels));
            let report = verify_replacement_with(block, shape, blocks, Execution::Sequential)?;
            if !report.passes() {
                return Err(Error::VerificationFailed {
                    stage: s,
                    summary: report.summary(),
                });
            }
            Some(report)
        } else {
            None
        };
        Ok((layers, replaced, report))
    })?;
    let mut out = net.clone();
    let mut replaced = 0;
    let mut reports = Vec::new();
    for (s, (layers, r, report)) in rewritten.into_iter().enumerate() {
        out.stages[s].layers = layers;
        replaced += r;
        if let Some(rep) = report {
            reports.push((s, rep));
        }
    }
    out.ensure_valid()?;
    Ok(Decomposition {
        net: out,
        replaced,
        reports,
    })
}
