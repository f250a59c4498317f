//! Architecture intermediate representation.
//!
//! A network is an ordered list of stages. Every layer of a stage runs at the
//! stage's spatial width with stride 1 and same padding; spatial reduction
//! happens only at stage transitions. A `Strided` transition means the first
//! layer of the following stage performs the reduction, which matters only
//! for cost accounting.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::ops::Range;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Location, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub width: usize,
    pub channels: usize,
}

impl TensorShape {
    pub fn new(width: usize, channels: usize) -> Self {
        Self { width, channels }
    }

    pub fn volume(&self, d: u32) -> u64 {
        (self.width as u64).pow(d) * self.channels as u64
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.width, self.channels)
    }
}

/// Channel overlap ratio of a rolling pointwise convolution, kept as an exact
/// rational so that `floor(overlap * window)` is never subject to rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Overlap(Ratio<u32>);

impl Overlap {
    pub const ZERO: Overlap = Overlap(Ratio::new_raw(0, 1));

    pub fn new(numer: u32, denom: u32) -> Result<Self> {
        if denom == 0 {
            return Err(Error::InvalidArgument("overlap denominator is zero".into()));
        }
        Ok(Self(Ratio::new(numer, denom)))
    }

    pub fn numer(&self) -> u32 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u32 {
        *self.0.denom()
    }

    pub fn is_zero(&self) -> bool {
        self.numer() == 0
    }

    /// Valid overlaps lie in `[0, 1)`.
    pub fn is_proper(&self) -> bool {
        self.numer() < self.denom()
    }

    /// `floor(self * window)`, the number of channels shared by adjacent filters.
    pub fn shared_channels(&self, window: usize) -> usize {
        (self.numer() as u64 * window as u64 / self.denom() as u64) as usize
    }

    pub fn as_f64(&self) -> f64 {
        self.numer() as f64 / self.denom() as f64
    }
}

impl Default for Overlap {
    fn default() -> Self {
        Self::ZERO
    }
}

impl fmt::Display for Overlap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            write!(f, "0")
        } else if self.denom() == 1 {
            write!(f, "{}", self.numer())
        } else {
            write!(f, "{}/{}", self.numer(), self.denom())
        }
    }
}

impl std::str::FromStr for Overlap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("overlap `{s}` is not a rational like 1/3"));
        let s = s.trim();
        match s.split_once('/') {
            Some((n, d)) => {
                let n = n.trim().parse().map_err(|_| bad())?;
                let d = d.trim().parse().map_err(|_| bad())?;
                Overlap::new(n, d)
            }
            None => Overlap::new(s.parse().map_err(|_| bad())?, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Standard,
    Pw,
    Dw,
    Gc,
    Gpw,
    Rpw,
    Shuffle,
    Residual,
}

impl KernelKind {
    pub const ALL: [KernelKind; 8] = [
        KernelKind::Standard,
        KernelKind::Pw,
        KernelKind::Dw,
        KernelKind::Gc,
        KernelKind::Gpw,
        KernelKind::Rpw,
        KernelKind::Shuffle,
        KernelKind::Residual,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::Standard => "standard",
            KernelKind::Pw => "pw",
            KernelKind::Dw => "dw",
            KernelKind::Gc => "gc",
            KernelKind::Gpw => "gpw",
            KernelKind::Rpw => "rpw",
            KernelKind::Shuffle => "shuffle",
            KernelKind::Residual => "residual",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Kinds whose spatial extent is a free parameter.
    pub fn has_spatial_kernel(&self) -> bool {
        matches!(self, KernelKind::Standard | KernelKind::Dw | KernelKind::Gc)
    }

    pub fn uses_groups(&self) -> bool {
        matches!(
            self,
            KernelKind::Gc | KernelKind::Gpw | KernelKind::Rpw | KernelKind::Shuffle
        )
    }

    /// Output channel count is forced to equal the input channel count.
    pub fn preserves_channels(&self) -> bool {
        matches!(self, KernelKind::Dw | KernelKind::Shuffle)
    }

    /// Kinds that mix information across channels at a single position.
    pub fn is_pointwise_family(&self) -> bool {
        matches!(self, KernelKind::Pw | KernelKind::Gpw | KernelKind::Rpw)
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One layer. For `Residual`, `inner` holds the convolutional path and
/// `out_channels` equals the path's final out-channels; the skip branch is an
/// identity, or a 1x1 projection when the channel count changes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub kernel_width: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub overlap: Overlap,
    pub inner: Vec<KernelSpec>,
}

impl KernelSpec {
    fn base(kind: KernelKind, kernel_width: usize, out_channels: usize) -> Self {
        Self {
            kind,
            kernel_width,
            out_channels,
            groups: 1,
            overlap: Overlap::ZERO,
            inner: Vec::new(),
        }
    }

    pub fn standard(kernel_width: usize, out_channels: usize) -> Self {
        Self::base(KernelKind::Standard, kernel_width, out_channels)
    }

    pub fn pw(out_channels: usize) -> Self {
        Self::base(KernelKind::Pw, 1, out_channels)
    }

    pub fn dw(kernel_width: usize, channels: usize) -> Self {
        Self::base(KernelKind::Dw, kernel_width, channels)
    }

    pub fn gc(kernel_width: usize, out_channels: usize, groups: usize) -> Self {
        Self {
            groups,
            ..Self::base(KernelKind::Gc, kernel_width, out_channels)
        }
    }

    pub fn gpw(out_channels: usize, groups: usize) -> Self {
        Self {
            groups,
            ..Self::base(KernelKind::Gpw, 1, out_channels)
        }
    }

    pub fn rpw(out_channels: usize, groups: usize, overlap: Overlap) -> Self {
        Self {
            groups,
            overlap,
            ..Self::base(KernelKind::Rpw, 1, out_channels)
        }
    }

    pub fn shuffle(channels: usize, groups: usize) -> Self {
        Self {
            groups,
            ..Self::base(KernelKind::Shuffle, 1, channels)
        }
    }

    pub fn residual(inner: Vec<KernelSpec>) -> Self {
        let out = inner.last().map(|l| l.out_channels).unwrap_or(0);
        Self {
            inner,
            ..Self::base(KernelKind::Residual, 1, out)
        }
    }

    /// Short human-readable label, e.g. `conv3-64`, `dw3-64`, `rpw-g2-o1/2-64`.
    pub fn label(&self) -> String {
        match self.kind {
            KernelKind::Standard => format!("conv{}-{}", self.kernel_width, self.out_channels),
            KernelKind::Pw => format!("pw-{}", self.out_channels),
            KernelKind::Dw => format!("dw{}-{}", self.kernel_width, self.out_channels),
            KernelKind::Gc => format!("gc{}-g{}-{}", self.kernel_width, self.groups, self.out_channels),
            KernelKind::Gpw => format!("gpw-g{}-{}", self.groups, self.out_channels),
            KernelKind::Rpw => format!("rpw-g{}-o{}-{}", self.groups, self.overlap, self.out_channels),
            KernelKind::Shuffle => format!("shuffle-g{}", self.groups),
            KernelKind::Residual => format!("residual[{}]-{}", self.inner.len(), self.out_channels),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transition {
    MaxPool(usize),
    Strided(usize),
    None,
}

impl Transition {
    pub fn factor(&self) -> usize {
        match *self {
            Transition::MaxPool(f) | Transition::Strided(f) => f,
            Transition::None => 1,
        }
    }

    pub fn is_strided(&self) -> bool {
        matches!(self, Transition::Strided(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StageSpec {
    pub layers: Vec<KernelSpec>,
    pub transition: Transition,
}

impl StageSpec {
    pub fn new(layers: Vec<KernelSpec>, transition: Transition) -> Self {
        Self { layers, transition }
    }

    /// Out-channels of the stage given the channels entering it.
    pub fn out_channels(&self, in_channels: usize) -> usize {
        self.layers.last().map_or(in_channels, |l| l.out_channels)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Head {
    pub hidden: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    pub name: String,
    pub input: TensorShape,
    /// Reduction applied to the raw input before stage 0 (a strided stem).
    pub stem: Transition,
    pub stages: Vec<StageSpec>,
    pub head: Head,
}

impl NetworkSpec {
    /// Shape entering `stage_index`.
    pub fn stage_input_shape(&self, stage_index: usize) -> Result<TensorShape> {
        if stage_index >= self.stages.len() {
            return Err(Error::Index {
                index: stage_index,
                len: self.stages.len(),
            });
        }
        Ok(self.stage_input_shapes()[stage_index])
    }

    /// Shapes entering every stage, in order.
    pub fn stage_input_shapes(&self) -> Vec<TensorShape> {
        let mut shape = TensorShape::new(self.input.width / self.stem.factor().max(1), self.input.channels);
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            out.push(shape);
            shape = TensorShape::new(
                shape.width / stage.transition.factor().max(1),
                stage.out_channels(shape.channels),
            );
        }
        out
    }

    /// Shape leaving the final stage (after its transition).
    pub fn output_shape(&self) -> TensorShape {
        match (self.stages.last(), self.stage_input_shapes().last()) {
            (Some(stage), Some(shape)) => TensorShape::new(
                shape.width / stage.transition.factor().max(1),
                stage.out_channels(shape.channels),
            ),
            _ => self.input,
        }
    }

    /// Transition that leads into `stage_index` (the stem for stage 0).
    pub fn entry_transition(&self, stage_index: usize) -> Transition {
        if stage_index == 0 {
            self.stem
        } else {
            self.stages[stage_index - 1].transition
        }
    }

    pub fn layer_count(&self) -> usize {
        self.stages.iter().map(|s| s.layers.len()).sum()
    }

    pub fn flatten_dim(&self) -> usize {
        let out = self.output_shape();
        out.width * out.width * out.channels
    }

    /// Structural hash, used to detect revisited architectures.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.input.hash(&mut h);
        self.stem.hash(&mut h);
        self.stages.hash(&mut h);
        self.head.hash(&mut h);
        h.finish()
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }

    /// Returns `Err(Error::Validation)` when any invariant is violated.
    pub fn ensure_valid(&self) -> Result<()> {
        let v = validate(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}

/// A single invariant violation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub location: Location,
    /// Index inside a residual block's inner path, when relevant.
    pub inner: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.inner {
            Some(i) => write!(f, "{} (inner {}): {}", self.location, i, self.message),
            None => write!(f, "{}: {}", self.location, self.message),
        }
    }
}

struct Checker {
    out: Vec<Violation>,
}

impl Checker {
    fn push(&mut self, location: Location, inner: Option<usize>, message: impl Into<String>) {
        self.out.push(Violation {
            location,
            inner,
            message: message.into(),
        });
    }

    /// Checks one layer reading `in_ch` channels.
    fn layer(&mut self, layer: &KernelSpec, in_ch: usize, loc: Location, inner: Option<usize>) {
        let kind = layer.kind;
        if layer.out_channels == 0 {
            self.push(loc, inner, "out channels must be >= 1");
            return;
        }
        if layer.kernel_width == 0 {
            self.push(loc, inner, "kernel width must be >= 1");
        }
        if kind.has_spatial_kernel() {
            if layer.kernel_width % 2 == 0 {
                self.push(loc, inner, format!("{kind} kernel width {} must be odd for same padding", layer.kernel_width));
            }
        } else if layer.kernel_width != 1 {
            self.push(loc, inner, format!("{kind} requires kernel width 1, got {}", layer.kernel_width));
        }
        if !kind.uses_groups() && layer.groups != 1 {
            self.push(loc, inner, format!("groups is only meaningful for gc/gpw/rpw/shuffle, got {}", layer.groups));
        }
        if kind != KernelKind::Rpw && !layer.overlap.is_zero() {
            self.push(loc, inner, "overlap is only meaningful for rpw");
        }
        if kind != KernelKind::Residual && !layer.inner.is_empty() {
            self.push(loc, inner, "only residual layers carry an inner path");
        }
        if kind.preserves_channels() && layer.out_channels != in_ch {
            self.push(loc, inner, format!("{kind} must keep channels: in {in_ch}, out {}", layer.out_channels));
        }
        if kind.uses_groups() {
            let g = layer.groups;
            if g == 0 {
                self.push(loc, inner, "groups must be >= 1");
                return;
            }
            if in_ch % g != 0 {
                self.push(loc, inner, format!("groups must divide channels: {g} does not divide in-channels {in_ch}"));
            }
            if matches!(kind, KernelKind::Gc | KernelKind::Gpw) && layer.out_channels % g != 0 {
                self.push(loc, inner, format!("groups must divide channels: {g} does not divide out-channels {}", layer.out_channels));
            }
        }
        if kind == KernelKind::Rpw && !layer.overlap.is_proper() {
            self.push(loc, inner, format!("overlap must be < 1, got {}", layer.overlap));
        }
        if kind == KernelKind::Residual {
            if inner.is_some() {
                self.push(loc, inner, "residual blocks cannot be nested");
                return;
            }
            if layer.inner.is_empty() {
                self.push(loc, None, "residual block needs a non-empty inner path");
                return;
            }
            let mut ch = in_ch;
            for (i, l) in layer.inner.iter().enumerate() {
                self.layer(l, ch, loc, Some(i));
                ch = l.out_channels;
            }
            if ch != layer.out_channels {
                self.push(loc, None, format!("residual out channels {} differ from inner path output {ch}", layer.out_channels));
            }
        }
    }
}

/// Checks a bare layer sequence reading `in_channels`, reporting violations
/// against stage 0.
pub fn validate_layers(layers: &[KernelSpec], in_channels: usize) -> Vec<Violation> {
    let mut c = Checker { out: Vec::new() };
    let mut ch = in_channels;
    for (l, layer) in layers.iter().enumerate() {
        c.layer(layer, ch, Location::layer(0, l), None);
        ch = layer.out_channels;
    }
    c.out
}

pub fn validate(net: &NetworkSpec) -> Vec<Violation> {
    let mut c = Checker { out: Vec::new() };
    let root = Location::root();
    if net.input.width == 0 || net.input.channels == 0 {
        c.push(root, None, "input width and channels must be >= 1");
        return c.out;
    }
    if net.stages.is_empty() {
        c.push(root, None, "network needs at least one stage");
    }
    let stem = net.stem.factor();
    if stem == 0 || net.input.width % stem != 0 {
        c.push(root, None, format!("stem factor {stem} must divide input width {}", net.input.width));
        return c.out;
    }
    let mut width = net.input.width / stem;
    let mut ch = net.input.channels;
    let last = net.stages.len().saturating_sub(1);
    for (s, stage) in net.stages.iter().enumerate() {
        let loc = Location::stage(s);
        if stage.layers.is_empty() {
            c.push(loc, None, "stage has no layers");
        }
        for (l, layer) in stage.layers.iter().enumerate() {
            c.layer(layer, ch, Location::layer(s, l), None);
            ch = layer.out_channels;
        }
        match stage.transition {
            Transition::None if s != last => c.push(loc, None, "only the final stage may have no transition"),
            Transition::MaxPool(f) | Transition::Strided(f) => {
                if f < 2 {
                    c.push(loc, None, format!("transition factor must be >= 2, got {f}"));
                } else if width % f != 0 {
                    c.push(loc, None, format!("transition factor {f} does not divide width {width}"));
                } else {
                    width /= f;
                }
            }
            Transition::None => {}
        }
        if width == 0 {
            c.push(loc, None, "spatial width reduced to zero");
            return c.out;
        }
    }
    if net.head.classes == 0 || net.head.hidden.contains(&0) {
        c.push(root, None, "head widths must be >= 1");
    }
    c.out
}

/// Groups a stage's layers into movable units: a depthwise or group
/// convolution absorbs following shuffles and the next pointwise-family layer
/// (a factorized block counts as one kernel); shuffles attach to the unit
/// before them; every other layer is a unit on its own.
pub fn units(layers: &[KernelSpec]) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = Vec::new();
    let mut open = false;
    for (i, layer) in layers.iter().enumerate() {
        let extend = match layer.kind {
            KernelKind::Shuffle => !out.is_empty(),
            k if k.is_pointwise_family() => open,
            _ => false,
        };
        if extend {
            out.last_mut().expect("unit exists").end = i + 1;
            if layer.kind != KernelKind::Shuffle {
                open = false;
            }
        } else {
            out.push(i..i + 1);
            open = matches!(layer.kind, KernelKind::Dw | KernelKind::Gc);
        }
    }
    out
}
