//! Exact receptive coverage by backward reachability.
//!
//! A coverage is held as one spatial bitmask per stage-input channel: bit
//! `r * w0 + c` of mask `i` is set when input neuron `(r, c, i)` can influence
//! the traced output neuron. Every layer runs at stride 1 with same padding,
//! so stepping back through a layer dilates each mask by the layer's window
//! (clipped at the border) and unions it into the input channels the layer
//! reads.

use fixedbitset::FixedBitSet;

use crate::decomposer::rpw_window;
use crate::error::{Error, Result};
use crate::ir::{validate_layers, KernelKind, KernelSpec, TensorShape};
use crate::par::{self, Execution};

pub const MAX_WIDTH: usize = 16;
pub const MAX_CHANNELS: usize = 64;

/// Reference kernel width for replacement checks.
pub const REFERENCE_KERNEL: usize = 3;

/// Input channels read by output channel `out` of a non-residual layer.
pub fn channel_sources(layer: &KernelSpec, in_channels: usize, out: usize) -> Result<Vec<usize>> {
    let c = in_channels;
    Ok(match layer.kind {
        KernelKind::Standard | KernelKind::Pw => (0..c).collect(),
        KernelKind::Dw => vec![out],
        KernelKind::Gc | KernelKind::Gpw => {
            let per_out = layer.out_channels / layer.groups;
            let per_in = c / layer.groups;
            let g = out / per_out;
            (g * per_in..(g + 1) * per_in).collect()
        }
        KernelKind::Rpw => rpw_window(out, layer.groups, layer.overlap, c)?.channels(c).collect(),
        KernelKind::Shuffle => {
            let g = layer.groups;
            vec![(out % g) * (c / g) + out / g]
        }
        KernelKind::Residual => return Err(Error::UnsupportedKind(KernelKind::Residual)),
    })
}

/// Channel-only coverage, propagated forward: for every layer, one set of
/// stage-input channels per output channel. Exact for all supported kinds
/// because each kernel's spatial window and channel relation are independent.
pub fn channel_sets(layers: &[KernelSpec], c0: usize) -> Result<Vec<Vec<FixedBitSet>>> {
    let mut current: Vec<FixedBitSet> = (0..c0).map(|i| singleton(c0, i)).collect();
    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        current = forward_sets(layer, &current, c0)?;
        out.push(current.clone());
    }
    Ok(out)
}

fn singleton(len: usize, i: usize) -> FixedBitSet {
    let mut s = FixedBitSet::with_capacity(len);
    s.insert(i);
    s
}

fn forward_sets(layer: &KernelSpec, input: &[FixedBitSet], c0: usize) -> Result<Vec<FixedBitSet>> {
    let in_ch = input.len();
    if layer.kind == KernelKind::Residual {
        let mut path = input.to_vec();
        for l in &layer.inner {
            path = forward_sets(l, &path, c0)?;
        }
        if in_ch == layer.out_channels {
            for (p, skip) in path.iter_mut().zip(input) {
                p.union_with(skip);
            }
        } else {
            let all = union_all(input, c0);
            for p in &mut path {
                p.union_with(&all);
            }
        }
        return Ok(path);
    }
    if matches!(layer.kind, KernelKind::Standard | KernelKind::Pw) {
        return Ok(vec![union_all(input, c0); layer.out_channels]);
    }
    (0..layer.out_channels)
        .map(|o| {
            let mut s = FixedBitSet::with_capacity(c0);
            for i in channel_sources(layer, in_ch, o)? {
                s.union_with(&input[i]);
            }
            Ok(s)
        })
        .collect()
}

fn union_all(sets: &[FixedBitSet], len: usize) -> FixedBitSet {
    let mut u = FixedBitSet::with_capacity(len);
    for s in sets {
        u.union_with(s);
    }
    u
}

/// Exact set of stage-input neurons feeding one output neuron.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeuronCoverage {
    pub width: usize,
    /// One spatial mask per stage-input channel.
    pub masks: Vec<FixedBitSet>,
}

impl NeuronCoverage {
    /// Number of reachable input neurons.
    pub fn volume(&self) -> u64 {
        self.masks.iter().map(|m| m.count_ones(..) as u64).sum()
    }

    pub fn spatial(&self) -> FixedBitSet {
        union_all(&self.masks, self.width * self.width)
    }

    pub fn spatial_count(&self) -> usize {
        self.spatial().count_ones(..)
    }

    pub fn channels(&self) -> Vec<usize> {
        (0..self.masks.len()).filter(|&i| !self.masks[i].is_clear()).collect()
    }

    /// Side of the bounding box of the spatial set.
    pub fn spatial_extent(&self) -> usize {
        let s = self.spatial();
        let rows: Vec<usize> = s.ones().map(|b| b / self.width).collect();
        let cols: Vec<usize> = s.ones().map(|b| b % self.width).collect();
        match (rows.iter().min(), rows.iter().max(), cols.iter().min(), cols.iter().max()) {
            (Some(r0), Some(r1), Some(c0), Some(c1)) => (r1 - r0 + 1).max(c1 - c0 + 1),
            _ => 0,
        }
    }

    /// Whether the coverage is `spatial x channels`, i.e. every covered
    /// channel reaches the same positions.
    pub fn is_product(&self) -> bool {
        let mut nonempty = self.masks.iter().filter(|m| !m.is_clear());
        match nonempty.next() {
            Some(first) => nonempty.all(|m| m == first),
            None => true,
        }
    }
}

fn check_bounds(shape: TensorShape) -> Result<()> {
    if shape.width > MAX_WIDTH || shape.channels > MAX_CHANNELS {
        return Err(Error::TooLarge {
            width: shape.width,
            channels: shape.channels,
            max_width: MAX_WIDTH,
            max_channels: MAX_CHANNELS,
        });
    }
    Ok(())
}

fn check_layers(layers: &[KernelSpec], shape: TensorShape) -> Result<()> {
    check_bounds(shape)?;
    let v = validate_layers(layers, shape.channels);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(v))
    }
}

fn dilate(mask: &FixedBitSet, width: usize, kernel: usize) -> FixedBitSet {
    if kernel <= 1 {
        return mask.clone();
    }
    let r = (kernel / 2) as isize;
    let w = width as isize;
    let mut out = FixedBitSet::with_capacity(width * width);
    for bit in mask.ones() {
        let (y, x) = ((bit / width) as isize, (bit % width) as isize);
        for yy in (y - r).max(0)..=(y + r).min(w - 1) {
            for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                out.insert((yy * w + xx) as usize);
            }
        }
    }
    out
}

/// One step backward through `layer`, from masks over its output channels to
/// masks over its `in_channels` input channels.
fn back_layer(layer: &KernelSpec, in_channels: usize, width: usize, front: &[FixedBitSet]) -> Result<Vec<FixedBitSet>> {
    let plane = width * width;
    if layer.kind == KernelKind::Residual {
        let mut ins = Vec::with_capacity(layer.inner.len());
        let mut ch = in_channels;
        for l in &layer.inner {
            ins.push(ch);
            ch = l.out_channels;
        }
        let mut path = front.to_vec();
        for (l, &c) in layer.inner.iter().zip(&ins).rev() {
            path = back_layer(l, c, width, &path)?;
        }
        if in_channels == layer.out_channels {
            for (p, f) in path.iter_mut().zip(front) {
                p.union_with(f);
            }
        } else {
            let all = union_all(front, plane);
            for p in &mut path {
                p.union_with(&all);
            }
        }
        return Ok(path);
    }
    let mut out = vec![FixedBitSet::with_capacity(plane); in_channels];
    let dense = matches!(layer.kind, KernelKind::Standard | KernelKind::Pw);
    if dense {
        let all = dilate(&union_all(front, plane), width, layer.kernel_width);
        out.iter_mut().for_each(|m| m.union_with(&all));
        return Ok(out);
    }
    for (o, mask) in front.iter().enumerate() {
        if mask.is_clear() {
            continue;
        }
        let d = dilate(mask, width, layer.kernel_width);
        for i in channel_sources(layer, in_channels, o)? {
            out[i].union_with(&d);
        }
    }
    Ok(out)
}

fn in_channel_list(layers: &[KernelSpec], c0: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(layers.len());
    let mut ch = c0;
    for l in layers {
        out.push(ch);
        ch = l.out_channels;
    }
    out
}

/// Traces output neuron `(row, col, channel)` of `layers[layer]` back to the
/// stage input.
pub fn trace_neuron(
    layers: &[KernelSpec],
    input: TensorShape,
    layer: usize,
    channel: usize,
    pos: (usize, usize),
) -> Result<NeuronCoverage> {
    check_layers(layers, input)?;
    if layer >= layers.len() {
        return Err(Error::Index {
            index: layer,
            len: layers.len(),
        });
    }
    trace_unchecked(layers, input, layer, channel, pos)
}

fn trace_unchecked(
    layers: &[KernelSpec],
    input: TensorShape,
    layer: usize,
    channel: usize,
    pos: (usize, usize),
) -> Result<NeuronCoverage> {
    let w = input.width;
    let ins = in_channel_list(layers, input.channels);
    let mut front = vec![FixedBitSet::with_capacity(w * w); layers[layer].out_channels];
    front[channel].insert(pos.0 * w + pos.1);
    for k in (0..=layer).rev() {
        front = back_layer(&layers[k], ins[k], w, &front)?;
    }
    Ok(NeuronCoverage { width: w, masks: front })
}

fn halve(layer: &KernelSpec) -> Option<KernelSpec> {
    if layer.out_channels % 2 != 0 {
        return None;
    }
    let mut l = layer.clone();
    l.out_channels /= 2;
    if l.kind.uses_groups() && l.out_channels % l.groups != 0 {
        return None;
    }
    l.inner = layer.inner.iter().map(halve).collect::<Option<Vec<_>>>()?;
    Some(l)
}

/// Shrinks a stage into oracle bounds: width is clipped to [`MAX_WIDTH`] and
/// every channel count is halved until the largest fits [`MAX_CHANNELS`],
/// as long as halving keeps every group count dividing its channels.
/// Returns `None` when no such reduction exists, and a note describing the
/// reduction otherwise.
pub fn scale_stage(layers: &[KernelSpec], input: TensorShape) -> Option<(Vec<KernelSpec>, TensorShape, Option<String>)> {
    let mut cur = layers.to_vec();
    let mut shape = TensorShape::new(input.width.min(MAX_WIDTH), input.channels);
    let widest = |ls: &[KernelSpec], c: usize| {
        ls.iter()
            .flat_map(|l| std::iter::once(l.out_channels).chain(l.inner.iter().map(|i| i.out_channels)))
            .fold(c, usize::max)
    };
    while widest(&cur, shape.channels) > MAX_CHANNELS {
        if shape.channels % 2 != 0 {
            return None;
        }
        cur = cur.iter().map(halve).collect::<Option<Vec<_>>>()?;
        shape.channels /= 2;
        if !validate_layers(&cur, shape.channels).is_empty() {
            return None;
        }
    }
    let note = (shape != input || cur != layers).then(|| {
        format!(
            "traced at {shape} instead of {input}, channel counts divided by {}",
            input.channels / shape.channels
        )
    });
    Some((cur, shape, note))
}

/// Center position used for representative neurons.
pub fn center(width: usize) -> (usize, usize) {
    (width / 2, width / 2)
}

/// Exact coverage of one layer at the spatial center, summarized over its
/// output channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerTrace {
    pub layer: usize,
    /// Output channel with the smallest volume (lowest index on ties).
    pub channel: usize,
    pub volume: u64,
    pub max_volume: u64,
    pub spatial_extent: usize,
    pub spatial_count: usize,
    pub channel_count: usize,
    pub product: bool,
}

pub fn trace_stage(layers: &[KernelSpec], input: TensorShape) -> Result<Vec<LayerTrace>> {
    trace_stage_with(layers, input, Execution::default())
}

pub fn trace_stage_with(layers: &[KernelSpec], input: TensorShape, exec: Execution) -> Result<Vec<LayerTrace>> {
    check_layers(layers, input)?;
    let pos = center(input.width);
    let mut out = Vec::with_capacity(layers.len());
    for (k, layer) in layers.iter().enumerate() {
        let covs = par::map_range(exec, 0..layer.out_channels, |ch| trace_unchecked(layers, input, k, ch, pos))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let vols: Vec<u64> = covs.iter().map(NeuronCoverage::volume).collect();
        let (channel, &volume) = vols
            .iter()
            .enumerate()
            .min_by_key(|&(i, v)| (*v, i))
            .expect("layer has output channels");
        let rep = &covs[channel];
        out.push(LayerTrace {
            layer: k,
            channel,
            volume,
            max_volume: *vols.iter().max().expect("non-empty"),
            spatial_extent: rep.spatial_extent(),
            spatial_count: rep.spatial_count(),
            channel_count: rep.channels().len(),
            product: rep.is_product(),
        });
    }
    Ok(out)
}

fn volumes_at(layers: &[KernelSpec], input: TensorShape, pos: (usize, usize), exec: Execution) -> Result<Vec<u64>> {
    let last = layers.len() - 1;
    par::map_range(exec, 0..layers[last].out_channels, |ch| {
        trace_unchecked(layers, input, last, ch, pos).map(|c| c.volume())
    })
    .into_iter()
    .collect()
}

/// `count` standard convolutions producing `out` channels.
pub fn reference_sequence(count: usize, out: usize) -> Vec<KernelSpec> {
    vec![KernelSpec::standard(REFERENCE_KERNEL, out); count]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QualityReport {
    pub holds: bool,
    pub shape: TensorShape,
    pub reference_volume: u64,
    /// Block volume at the center, per output channel.
    pub center_volumes: Vec<u64>,
    pub failing_channels: Vec<usize>,
    /// Same comparison at the top-left corner; informational only.
    pub corner_holds: bool,
}

pub fn check_quality(block: &[KernelSpec], standard_count: usize, shape: TensorShape) -> Result<QualityReport> {
    check_quality_with(block, standard_count, shape, Execution::default())
}

pub fn check_quality_with(
    block: &[KernelSpec],
    standard_count: usize,
    shape: TensorShape,
    exec: Execution,
) -> Result<QualityReport> {
    if block.is_empty() || standard_count == 0 {
        return Err(Error::InvalidArgument("quality check needs a non-empty block and reference".into()));
    }
    check_layers(block, shape)?;
    let out = block.last().expect("non-empty").out_channels;
    let reference = reference_sequence(standard_count, out);
    check_layers(&reference, shape)?;
    let center = center(shape.width);
    let ref_center = trace_unchecked(&reference, shape, standard_count - 1, 0, center)?.volume();
    let ref_corner = trace_unchecked(&reference, shape, standard_count - 1, 0, (0, 0))?.volume();
    let center_volumes = volumes_at(block, shape, center, exec)?;
    let corner_volumes = volumes_at(block, shape, (0, 0), exec)?;
    let failing_channels: Vec<usize> = (0..out).filter(|&j| center_volumes[j] != ref_center).collect();
    Ok(QualityReport {
        holds: failing_channels.is_empty(),
        shape,
        reference_volume: ref_center,
        center_volumes,
        failing_channels,
        corner_holds: corner_volumes.iter().all(|&v| v == ref_corner),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Deletion {
    pub index: usize,
    pub label: String,
    /// Whether the block without this member still satisfies quality.
    pub quality: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompactReport {
    pub holds: bool,
    pub deletions: Vec<Deletion>,
}

pub fn check_compact(block: &[KernelSpec], standard_count: usize, shape: TensorShape) -> Result<CompactReport> {
    check_compact_with(block, standard_count, shape, Execution::default())
}

pub fn check_compact_with(
    block: &[KernelSpec],
    standard_count: usize,
    shape: TensorShape,
    exec: Execution,
) -> Result<CompactReport> {
    check_layers(block, shape)?;
    let mut deletions = Vec::with_capacity(block.len());
    for (i, removed) in block.iter().enumerate() {
        let mut rest = block.to_vec();
        rest.remove(i);
        let (quality, note) = if rest.is_empty() {
            (false, Some("block becomes empty".to_string()))
        } else if !validate_layers(&rest, shape.channels).is_empty() {
            (false, Some("remaining layers are not channel-compatible".to_string()))
        } else {
            (check_quality_with(&rest, standard_count, shape, exec)?.holds, None)
        };
        deletions.push(Deletion {
            index: i,
            label: removed.label(),
            quality,
            note,
        });
    }
    Ok(CompactReport {
        holds: deletions.iter().all(|d| !d.quality),
        deletions,
    })
}
