//! Bundled architectures, stored as architecture-file text so they can be
//! dumped, edited and loaded back.

use crate::error::{Error, Result};
use crate::format::parse_network;
use crate::ir::NetworkSpec;

/// Prefix that selects a bundled architecture instead of a file path.
pub const PREFIX: &str = "presets:";

const PRESETS: [(&str, &str); 9] = [
    ("vgg11-cifar10", include_str!("../presets/vgg11-cifar10.yaml")),
    ("vgg16-cifar10", include_str!("../presets/vgg16-cifar10.yaml")),
    ("vgg16-cifar100", include_str!("../presets/vgg16-cifar100.yaml")),
    ("vgg19-cifar10", include_str!("../presets/vgg19-cifar10.yaml")),
    ("mobilenet-cifar10", include_str!("../presets/mobilenet-cifar10.yaml")),
    ("resnet50-cifar10", include_str!("../presets/resnet50-cifar10.yaml")),
    ("vgg16-imagenet", include_str!("../presets/vgg16-imagenet.yaml")),
    ("mobilenet-imagenet", include_str!("../presets/mobilenet-imagenet.yaml")),
    ("resnet50-imagenet", include_str!("../presets/resnet50-imagenet.yaml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))
}

pub fn load(name: &str) -> Result<NetworkSpec> {
    parse_network(text(name)?)
}

pub fn all() -> Result<Vec<NetworkSpec>> {
    names().map(load).collect()
}

/// Preset name inside a `presets:<name>` reference.
pub fn reference_name(input: &str) -> Option<&str> {
    input.strip_prefix(PREFIX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::TensorShape;

    #[test]
    fn every_preset_loads() {
        assert_eq!(all().unwrap().len(), 9);
    }

    #[test]
    fn vgg11_stage_shapes() {
        let net = load("vgg11-cifar10").unwrap();
        assert_eq!(net.stage_input_shape(0).unwrap(), TensorShape::new(32, 3));
        assert_eq!(net.stage_input_shape(2).unwrap(), TensorShape::new(8, 128));
        assert_eq!(net.stage_input_shape(4).unwrap(), TensorShape::new(2, 512));
        assert!(net.stage_input_shape(5).is_err());
    }

    #[test]
    fn unknown_name() {
        assert!(matches!(load("alexnet"), Err(Error::UnknownPreset(_))));
        assert_eq!(reference_name("presets:vgg16-cifar10"), Some("vgg16-cifar10"));
        assert_eq!(reference_name("net.yaml"), None);
    }
}
