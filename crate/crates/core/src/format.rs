//! YAML architecture files.
//!
//! ```yaml
//! name: vgg11-cifar10
//! input: { width: 32, channels: 3 }
//! stem: { type: strided, factor: 2 }        # optional, default none
//! stages:
//!   - transition: { type: maxpool, factor: 2 }
//!     layers:
//!       - { kind: standard, kernel: 3, out: 64 }
//!       - { kind: rpw, out: 64, groups: 2, overlap: "1/2" }
//! head: { hidden: [], classes: 10 }
//! ```
//!
//! Unknown keys are rejected. `kernel` defaults to 1, `groups` to 1 and
//! `overlap` to `0`. Serialization emits keys in a fixed order and omits
//! fields that hold their default value.

use serde::{Deserialize, Serialize};
use serde_yaml::Value;

use crate::error::{Error, Location, Result};
use crate::ir::{Head, KernelKind, KernelSpec, NetworkSpec, Overlap, StageSpec, TensorShape, Transition};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork<S> {
    name: String,
    input: RawInput,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stem: Option<RawTransition>,
    stages: Vec<S>,
    head: RawHead,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInput {
    width: usize,
    channels: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHead {
    #[serde(default)]
    hidden: Vec<usize>,
    classes: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawTransitionType {
    Maxpool,
    Strided,
    None,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTransition {
    #[serde(rename = "type")]
    kind: RawTransitionType,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    factor: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStage<L> {
    transition: RawTransition,
    layers: Vec<L>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    kind: KernelKind,
    #[serde(default = "one")]
    kernel: usize,
    out: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    groups: usize,
    #[serde(default, skip_serializing_if = "RawOverlap::is_zero")]
    overlap: RawOverlap,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    inner: Vec<RawLayer>,
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

/// Accepts `overlap: 0` as well as `overlap: "1/3"`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawOverlap {
    Int(u32),
    Text(String),
}

impl Default for RawOverlap {
    fn default() -> Self {
        RawOverlap::Int(0)
    }
}

impl RawOverlap {
    fn is_zero(&self) -> bool {
        matches!(self, RawOverlap::Int(0))
    }

    fn parse(&self) -> Result<Overlap> {
        match self {
            RawOverlap::Int(n) => Overlap::new(*n, 1),
            RawOverlap::Text(s) => s.parse(),
        }
    }
}

fn schema(location: Location, message: impl ToString) -> Error {
    Error::Schema {
        location,
        message: message.to_string(),
    }
}

fn transition_from_raw(raw: &RawTransition) -> Transition {
    match raw.kind {
        RawTransitionType::Maxpool => Transition::MaxPool(raw.factor),
        RawTransitionType::Strided => Transition::Strided(raw.factor),
        RawTransitionType::None => Transition::None,
    }
}

fn transition_to_raw(t: Transition) -> RawTransition {
    match t {
        Transition::MaxPool(factor) => RawTransition {
            kind: RawTransitionType::Maxpool,
            factor,
        },
        Transition::Strided(factor) => RawTransition {
            kind: RawTransitionType::Strided,
            factor,
        },
        Transition::None => RawTransition {
            kind: RawTransitionType::None,
            factor: 1,
        },
    }
}

fn layer_from_raw(raw: RawLayer, loc: Location) -> Result<KernelSpec> {
    let overlap = raw.overlap.parse().map_err(|e| schema(loc, e))?;
    let inner = raw
        .inner
        .into_iter()
        .map(|l| layer_from_raw(l, loc))
        .collect::<Result<Vec<_>>>()?;
    Ok(KernelSpec {
        kind: raw.kind,
        kernel_width: raw.kernel,
        out_channels: raw.out,
        groups: raw.groups,
        overlap,
        inner,
    })
}

fn layer_to_raw(layer: &KernelSpec) -> RawLayer {
    RawLayer {
        kind: layer.kind,
        kernel: layer.kernel_width,
        out: layer.out_channels,
        groups: layer.groups,
        overlap: if layer.overlap.is_zero() {
            RawOverlap::Int(0)
        } else {
            RawOverlap::Text(layer.overlap.to_string())
        },
        inner: layer.inner.iter().map(layer_to_raw).collect(),
    }
}

/// Parses without validating; schema problems only.
pub fn parse_unchecked(text: &str) -> Result<NetworkSpec> {
    let raw: RawNetwork<Value> = serde_yaml::from_str(text).map_err(|e| schema(Location::root(), e))?;
    let mut stages = Vec::with_capacity(raw.stages.len());
    for (s, stage_value) in raw.stages.into_iter().enumerate() {
        let stage: RawStage<Value> =
            serde_yaml::from_value(stage_value).map_err(|e| schema(Location::stage(s), e))?;
        let mut layers = Vec::with_capacity(stage.layers.len());
        for (l, layer_value) in stage.layers.into_iter().enumerate() {
            let loc = Location::layer(s, l);
            let raw_layer: RawLayer = serde_yaml::from_value(layer_value).map_err(|e| schema(loc, e))?;
            layers.push(layer_from_raw(raw_layer, loc)?);
        }
        stages.push(StageSpec::new(layers, transition_from_raw(&stage.transition)));
    }
    Ok(NetworkSpec {
        name: raw.name,
        input: TensorShape::new(raw.input.width, raw.input.channels),
        stem: raw.stem.as_ref().map_or(Transition::None, transition_from_raw),
        stages,
        head: Head {
            hidden: raw.head.hidden,
            classes: raw.head.classes,
        },
    })
}

/// Parses and validates an architecture file.
pub fn parse_network(text: &str) -> Result<NetworkSpec> {
    let net = parse_unchecked(text)?;
    net.ensure_valid()?;
    Ok(net)
}

/// Canonical YAML form of `net`.
pub fn serialize_network(net: &NetworkSpec) -> String {
    let raw = RawNetwork {
        name: net.name.clone(),
        input: RawInput {
            width: net.input.width,
            channels: net.input.channels,
        },
        stem: (net.stem != Transition::None).then(|| transition_to_raw(net.stem)),
        stages: net
            .stages
            .iter()
            .map(|s| RawStage {
                transition: transition_to_raw(s.transition),
                layers: s.layers.iter().map(layer_to_raw).collect(),
            })
            .collect(),
        head: RawHead {
            hidden: net.head.hidden.clone(),
            classes: net.head.classes,
        },
    };
    serde_yaml::to_string(&raw).expect("architecture serializes to YAML")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
name: tiny
input: { width: 32, channels: 3 }
stages:
  - transition: { type: none }
    layers:
      - { kind: standard, kernel: 3, out: 64 }
head: { hidden: [], classes: 10 }
";

    #[test]
    fn minimal_file() {
        let net = parse_network(MINIMAL).unwrap();
        assert_eq!(net.stages.len(), 1);
        assert_eq!(net.stages[0].layers, vec![KernelSpec::standard(3, 64)]);
        assert_eq!(net.input, TensorShape::new(32, 3));
    }

    #[test]
    fn unknown_key_is_schema_error_with_location() {
        let text = MINIMAL.replace("out: 64", "out: 64, strdie: 2");
        match parse_network(&text) {
            Err(Error::Schema { location, .. }) => assert_eq!(location, Location::layer(0, 0)),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_schema_error() {
        let text = MINIMAL.replace("out: 64", "kernel: 3");
        assert!(matches!(parse_network(&text), Err(Error::Schema { .. })));
    }

    #[test]
    fn gc_divisibility_is_validation_error() {
        let text = "
name: bad
input: { width: 8, channels: 8 }
stages:
  - transition: { type: none }
    layers:
      - { kind: gc, kernel: 3, out: 9, groups: 3 }
head: { classes: 10 }
";
        match parse_network(text) {
            Err(Error::Validation(v)) => {
                assert!(v.iter().all(|x| x.location == Location::layer(0, 0)));
                assert!(v[0].message.contains("groups must divide"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn rpw_overlap_survives_round_trip_exactly() {
        let text = "
name: r
input: { width: 8, channels: 12 }
stages:
  - transition: { type: none }
    layers:
      - { kind: dw, kernel: 3, out: 12 }
      - { kind: rpw, out: 12, groups: 3, overlap: \"2/6\" }
head: { classes: 10 }
";
        let net = parse_network(text).unwrap();
        let out = serialize_network(&net);
        assert!(out.contains("overlap: 1/3"), "{out}");
        assert_eq!(parse_network(&out).unwrap(), net);
    }

    #[test]
    fn serialization_is_deterministic() {
        let net = parse_network(MINIMAL).unwrap();
        assert_eq!(serialize_network(&net), serialize_network(&net.clone()));
    }
}
