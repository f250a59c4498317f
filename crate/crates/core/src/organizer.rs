//! Stage-level reorganization.
//!
//! Each iteration looks at the last movable unit of every stage and picks the
//! one with the smallest gain as the source. A channel-adjusted copy of that
//! unit is tentatively appended to every stage; the best append is the
//! target. The unit then moves, is removed, or the pass stops, depending on
//! how both gains compare with each other and with the threshold `theta`.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::ir::{units, KernelKind, KernelSpec, NetworkSpec};
use crate::par::{self, Execution};
use crate::rf::{self, DEFAULT_ALPHA, IMAGE_DIMS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrganizerConfig {
    pub theta: f64,
    pub alpha: f64,
    /// Defaults to twice the network's layer count.
    pub max_iters: Option<usize>,
    pub tie_epsilon: f64,
    pub exec: Execution,
}

impl Default for OrganizerConfig {
    fn default() -> Self {
        Self {
            theta: 0.0,
            alpha: DEFAULT_ALPHA,
            max_iters: None,
            tie_epsilon: 1e-9,
            exec: Execution::default(),
        }
    }
}

impl OrganizerConfig {
    pub fn max_iters_for(&self, net: &NetworkSpec) -> usize {
        self.max_iters.unwrap_or(2 * net.layer_count()).max(1)
    }

    fn check(&self) -> Result<()> {
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::InvalidArgument(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.max_iters == Some(0) {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminateReason {
    /// The source gain is at least the best append gain, or above theta.
    NoImprovement,
    /// Every stage holds a single unit.
    AllSingletons,
    /// The best place for the unit is the stage it came from.
    SameStage,
    /// Channel repair could not produce a valid network.
    InvalidRepair,
    /// The next network was already visited.
    Cycle,
    IterationLimit,
}

impl TerminateReason {
    pub fn name(&self) -> &'static str {
        match self {
            TerminateReason::NoImprovement => "no-improvement",
            TerminateReason::AllSingletons => "all-singletons",
            TerminateReason::SameStage => "same-stage",
            TerminateReason::InvalidRepair => "invalid-repair",
            TerminateReason::Cycle => "cycle",
            TerminateReason::IterationLimit => "iteration-limit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionKind {
    Move {
        source: usize,
        target: usize,
        moved: Vec<KernelSpec>,
    },
    Remove {
        source: usize,
        removed: Vec<KernelSpec>,
    },
    Terminate(TerminateReason),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub kind: ActionKind,
    pub delta_min: f64,
    pub delta_prime_max: f64,
}

impl Action {
    pub fn is_terminate(&self) -> bool {
        matches!(self.kind, ActionKind::Terminate(_))
    }

    fn terminate(reason: TerminateReason, delta_min: f64, delta_prime_max: f64) -> Self {
        Self {
            kind: ActionKind::Terminate(reason),
            delta_min,
            delta_prime_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub action: Action,
    pub total_gain_before: f64,
    pub total_gain_after: f64,
    pub fingerprint: u64,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iter={} ", self.iteration)?;
        match &self.action.kind {
            ActionKind::Move { source, target, .. } => write!(f, "action=move src={source} dst={target}")?,
            ActionKind::Remove { source, .. } => write!(f, "action=remove src={source}")?,
            ActionKind::Terminate(r) => write!(f, "action=terminate reason={}", r.name())?,
        }
        write!(
            f,
            " dmin={:.4} dmax={:.4} total_before={:.4} total_after={:.4}",
            self.action.delta_min, self.action.delta_prime_max, self.total_gain_before, self.total_gain_after
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MoveLog {
    pub entries: Vec<LogEntry>,
}

impl MoveLog {
    pub fn lines(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.to_string()).collect()
    }

    pub fn moves(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.action.kind, ActionKind::Move { .. }))
            .count()
    }

    pub fn removes(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.action.kind, ActionKind::Remove { .. }))
            .count()
    }
}

fn last_unit(layers: &[KernelSpec]) -> Option<Range<usize>> {
    units(layers).pop()
}

/// Gain of each stage's last unit.
pub fn last_unit_gains(net: &NetworkSpec, alpha: f64) -> Result<Vec<f64>> {
    last_unit_gains_with(net, alpha, Execution::default())
}

fn last_unit_gains_with(net: &NetworkSpec, alpha: f64, exec: Execution) -> Result<Vec<f64>> {
    if let Some(s) = net.stages.iter().position(|s| s.layers.is_empty()) {
        return Err(Error::EmptyStage(s));
    }
    let shapes = net.stage_input_shapes();
    let idx: Vec<usize> = (0..net.stages.len()).collect();
    par::try_map_collect(exec, &idx, |&s| {
        let gains = rf::unit_gains(&net.stages[s].layers, shapes[s], alpha, IMAGE_DIMS)?;
        Ok(gains.last().expect("stage is non-empty").1)
    })
}

fn argmin(values: impl Iterator<Item = (usize, f64)>, eps: f64) -> Option<(usize, f64)> {
    values.fold(None, |best, (i, v)| match best {
        Some((_, b)) if v >= b - eps => best,
        _ => Some((i, v)),
    })
}

fn argmax(values: impl Iterator<Item = (usize, f64)>, eps: f64) -> Option<(usize, f64)> {
    values.fold(None, |best, (i, v)| match best {
        Some((_, b)) if v <= b + eps => best,
        _ => Some((i, v)),
    })
}

/// Stage whose last unit has the smallest gain; lowest index on ties.
pub fn source_candidate(net: &NetworkSpec, alpha: f64) -> Result<(usize, f64)> {
    let gains = last_unit_gains(net, alpha)?;
    argmin(gains.into_iter().enumerate(), 1e-9).ok_or(Error::EmptyStage(0))
}

fn round_to_groups(value: usize, groups: usize) -> usize {
    let g = groups.max(1);
    let r = (value + g / 2) / g * g;
    r.max(g)
}

/// Copy of `unit` reading and producing `channels`. Channel-preserving
/// layers follow their input; other layers are scaled by
/// `channels / unit_out`, rounded to a multiple of their groups; the final
/// layer produces exactly `channels`.
pub fn adjust_unit(unit: &[KernelSpec], channels: usize) -> Vec<KernelSpec> {
    let unit_out = unit.last().map_or(channels, |l| l.out_channels).max(1);
    adjust_layers(unit, channels, channels, unit_out)
}

fn adjust_layers(layers: &[KernelSpec], in_channels: usize, out: usize, unit_out: usize) -> Vec<KernelSpec> {
    let mut ch = in_channels;
    let n = layers.len();
    let mut res = Vec::with_capacity(n);
    for (i, l) in layers.iter().enumerate() {
        let mut c = l.clone();
        c.out_channels = if l.kind.preserves_channels() {
            ch
        } else if i + 1 == n {
            out
        } else {
            let groups = if l.kind.uses_groups() { l.groups } else { 1 };
            round_to_groups(l.out_channels * out / unit_out, groups)
        };
        if l.kind == KernelKind::Residual {
            c.inner = adjust_layers(&l.inner, ch, c.out_channels, unit_out);
        }
        ch = c.out_channels;
        res.push(c);
    }
    res
}

fn with_unit_appended(net: &NetworkSpec, stage: usize, unit: &[KernelSpec]) -> NetworkSpec {
    let mut n = net.clone();
    let in_ch = net.stage_input_shapes()[stage].channels;
    let c = net.stages[stage].out_channels(in_ch);
    n.stages[stage].layers.extend(adjust_unit(unit, c));
    n
}

/// Stage where appending an adjusted copy of `donor` gains most; lowest
/// index on ties. Stages where the copy does not validate are skipped.
pub fn target_candidate(net: &NetworkSpec, donor: &[KernelSpec], alpha: f64) -> Result<(usize, f64)> {
    target_candidate_with(net, donor, alpha, 1e-9, Execution::default())
}

fn target_candidate_with(
    net: &NetworkSpec,
    donor: &[KernelSpec],
    alpha: f64,
    eps: f64,
    exec: Execution,
) -> Result<(usize, f64)> {
    let shapes = net.stage_input_shapes();
    let idx: Vec<usize> = (0..net.stages.len()).collect();
    let gains = par::try_map_collect(exec, &idx, |&s| {
        let trial = with_unit_appended(net, s, donor);
        if !trial.validate().is_empty() {
            return Ok(None);
        }
        let g = rf::unit_gains(&trial.stages[s].layers, shapes[s], alpha, IMAGE_DIMS)?;
        Ok::<_, Error>(Some(g.last().expect("appended unit").1))
    })?;
    argmax(gains.into_iter().enumerate().filter_map(|(i, g)| g.map(|g| (i, g))), eps)
        .ok_or_else(|| Error::InvalidArgument("no stage accepts the donor unit".into()))
}

/// Removes the last unit of `stage`; if it changed the channel count, the
/// new last layer takes over its output width so the next stage still sees
/// the same input.
fn remove_last_unit(net: &NetworkSpec, stage: usize) -> (NetworkSpec, Vec<KernelSpec>) {
    let mut n = net.clone();
    let in_ch = net.stage_input_shapes()[stage].channels;
    let range = last_unit(&net.stages[stage].layers).expect("non-empty stage");
    let unit_in = if range.start == 0 {
        in_ch
    } else {
        net.stages[stage].layers[range.start - 1].out_channels
    };
    let removed: Vec<KernelSpec> = n.stages[stage].layers.drain(range).collect();
    let removed_out = removed.last().expect("non-empty unit").out_channels;
    if removed_out != unit_in {
        if let Some(last) = n.stages[stage].layers.last_mut() {
            last.out_channels = removed_out;
            if let Some(inner_last) = last.inner.last_mut() {
                inner_last.out_channels = removed_out;
            }
        }
    }
    (n, removed)
}

/// One decision of the pass.
pub fn step(net: &NetworkSpec, cfg: &OrganizerConfig) -> Result<(Action, NetworkSpec)> {
    cfg.check()?;
    net.ensure_valid()?;
    let eps = cfg.tie_epsilon;
    let gains = last_unit_gains_with(net, cfg.alpha, cfg.exec)?;
    let movable = |s: usize| units(&net.stages[s].layers).len() > 1;
    let Some((source, dmin)) = argmin(gains.iter().copied().enumerate().filter(|&(s, _)| movable(s)), eps) else {
        let dmin = gains.iter().copied().fold(f64::INFINITY, f64::min);
        return Ok((Action::terminate(TerminateReason::AllSingletons, dmin, f64::NAN), net.clone()));
    };
    let range = last_unit(&net.stages[source].layers).expect("movable stage");
    let donor = &net.stages[source].layers[range];
    let (target, dmax) = target_candidate_with(net, donor, cfg.alpha, eps, cfg.exec)?;
    let theta = cfg.theta;

    if dmax > dmin + eps && dmax > theta {
        if target == source {
            return Ok((Action::terminate(TerminateReason::SameStage, dmin, dmax), net.clone()));
        }
        let (removed_net, removed) = remove_last_unit(net, source);
        let moved_net = with_unit_appended(&removed_net, target, &removed);
        if !moved_net.validate().is_empty() {
            return Ok((Action::terminate(TerminateReason::InvalidRepair, dmin, dmax), net.clone()));
        }
        let appended = moved_net.stages[target].layers[net.stages[target].layers.len()..].to_vec();
        let action = Action {
            kind: ActionKind::Move {
                source,
                target,
                moved: appended,
            },
            delta_min: dmin,
            delta_prime_max: dmax,
        };
        return Ok((action, moved_net));
    }
    if dmax < theta && dmin < theta {
        let (removed_net, removed) = remove_last_unit(net, source);
        if !removed_net.validate().is_empty() {
            return Ok((Action::terminate(TerminateReason::InvalidRepair, dmin, dmax), net.clone()));
        }
        let action = Action {
            kind: ActionKind::Remove { source, removed },
            delta_min: dmin,
            delta_prime_max: dmax,
        };
        return Ok((action, removed_net));
    }
    Ok((Action::terminate(TerminateReason::NoImprovement, dmin, dmax), net.clone()))
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub net: NetworkSpec,
    pub log: MoveLog,
    /// Every network produced along the way, starting with the input.
    pub trajectory: Vec<NetworkSpec>,
}

impl Outcome {
    /// Whether the pass stopped on its own rather than at the iteration limit.
    pub fn converged(&self) -> bool {
        !matches!(
            self.log.entries.last().map(|e| &e.action.kind),
            Some(ActionKind::Terminate(TerminateReason::IterationLimit))
        )
    }
}

pub fn optimize(net: &NetworkSpec, cfg: &OrganizerConfig) -> Result<Outcome> {
    cfg.check()?;
    net.ensure_valid()?;
    let max_iters = cfg.max_iters_for(net);
    let mut current = net.clone();
    let mut seen = HashSet::from([current.fingerprint()]);
    let mut log = MoveLog::default();
    let mut trajectory = vec![current.clone()];
    let mut total = rf::total_gain(&current, cfg.alpha)?;
    for iteration in 1..=max_iters {
        let (mut action, next) = step(&current, cfg)?;
        let mut accept = !action.is_terminate();
        if accept && iteration == max_iters {
            action = Action::terminate(TerminateReason::IterationLimit, action.delta_min, action.delta_prime_max);
            accept = false;
        }
        if accept && seen.contains(&next.fingerprint()) {
            action = Action::terminate(TerminateReason::Cycle, action.delta_min, action.delta_prime_max);
            accept = false;
        }
        let after = if accept { rf::total_gain(&next, cfg.alpha)? } else { total };
        let fingerprint = if accept { next.fingerprint() } else { current.fingerprint() };
        log.entries.push(LogEntry {
            iteration,
            action: action.clone(),
            total_gain_before: total,
            total_gain_after: after,
            fingerprint,
        });
        if !accept {
            break;
        }
        seen.insert(fingerprint);
        current = next;
        total = after;
        trajectory.push(current.clone());
    }
    Ok(Outcome {
        net: current,
        log,
        trajectory,
    })
}

/// Per-stage unit counts, excluding plain convolutions when `blocks_only`.
pub fn stage_unit_counts(net: &NetworkSpec, blocks_only: bool) -> Vec<usize> {
    net.stages
        .iter()
        .map(|s| {
            units(&s.layers)
                .into_iter()
                .filter(|r| !blocks_only || s.layers[r.start].kind != KernelKind::Standard)
                .count()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Head, StageSpec, TensorShape, Transition};

    fn net(stages: Vec<StageSpec>, input: TensorShape) -> NetworkSpec {
        NetworkSpec {
            name: "t".into(),
            input,
            stem: Transition::None,
            stages,
            head: Head {
                hidden: vec![],
                classes: 10,
            },
        }
    }

    #[test]
    fn adjusted_copy_scales_channels() {
        let unit = [KernelSpec::dw(3, 64), KernelSpec::pw(128)];
        assert_eq!(adjust_unit(&unit, 32), vec![KernelSpec::dw(3, 32), KernelSpec::pw(32)]);
        let bottleneck = [KernelSpec::residual(vec![
            KernelSpec::pw(128),
            KernelSpec::standard(3, 128),
            KernelSpec::pw(512),
        ])];
        let adj = adjust_unit(&bottleneck, 256);
        assert_eq!(adj[0].inner[0].out_channels, 64);
        assert_eq!(adj[0].inner[2].out_channels, 256);
        assert_eq!(adj[0].out_channels, 256);
    }

    #[test]
    fn removal_repairs_widening() {
        let n = net(
            vec![
                StageSpec::new(vec![KernelSpec::standard(3, 8), KernelSpec::standard(3, 16)], Transition::MaxPool(2)),
                StageSpec::new(vec![KernelSpec::standard(3, 16)], Transition::None),
            ],
            TensorShape::new(8, 3),
        );
        let (r, removed) = remove_last_unit(&n, 0);
        assert_eq!(removed, vec![KernelSpec::standard(3, 16)]);
        assert_eq!(r.stages[0].layers, vec![KernelSpec::standard(3, 16)]);
        assert!(r.validate().is_empty());
    }

    #[test]
    fn singleton_only_net_terminates() {
        let n = net(vec![StageSpec::new(vec![KernelSpec::standard(3, 8)], Transition::None)], TensorShape::new(8, 3));
        let (a, same) = step(&n, &OrganizerConfig::default()).unwrap();
        assert_eq!(a.kind, ActionKind::Terminate(TerminateReason::AllSingletons));
        assert_eq!(same, n);
        assert_eq!(source_candidate(&n, 3.0).unwrap().0, 0);
    }

    #[test]
    fn saturated_net_terminates_on_tie() {
        let stage = || StageSpec::new(vec![KernelSpec::standard(3, 4); 3], Transition::MaxPool(2));
        let mut n = net(vec![stage(), stage()], TensorShape::new(4, 4));
        n.stages[1].transition = Transition::None;
        let (a, _) = step(&n, &OrganizerConfig::default()).unwrap();
        assert!(a.is_terminate(), "{a:?}");
    }

    #[test]
    fn below_theta_removes() {
        let stage = || StageSpec::new(vec![KernelSpec::standard(3, 4); 3], Transition::MaxPool(2));
        let mut n = net(vec![stage(), stage()], TensorShape::new(4, 4));
        n.stages[1].transition = Transition::None;
        let cfg = OrganizerConfig {
            theta: 0.5,
            ..OrganizerConfig::default()
        };
        let (a, next) = step(&n, &cfg).unwrap();
        assert!(matches!(a.kind, ActionKind::Remove { source: 0, .. }), "{a:?}");
        assert_eq!(next.layer_count(), n.layer_count() - 1);
    }

    #[test]
    fn log_line_format() {
        let e = LogEntry {
            iteration: 3,
            action: Action {
                kind: ActionKind::Move {
                    source: 4,
                    target: 0,
                    moved: vec![],
                },
                delta_min: 0.0,
                delta_prime_max: 1.73154,
            },
            total_gain_before: 1.0,
            total_gain_after: 2.0,
            fingerprint: 0,
        };
        assert!(e.to_string().starts_with("iter=3 action=move src=4 dst=0 dmin=0.0000 dmax=1.7315"));
    }
}
