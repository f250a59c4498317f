//! Static analysis and rewriting of convolutional network architectures.
//!
//! Networks are described as stages of layers ([`ir`]), loaded from YAML
//! ([`format`], [`presets`]) and analyzed for three-dimensional receptive
//! field growth ([`rf`], checked exactly by [`oracle`]) and cost ([`cost`]).
//! Two passes rewrite them: [`organizer`] moves or removes whole kernels
//! between stages, and [`decomposer`] replaces standard convolutions with
//! factorized blocks. [`report`] renders results as tables.

pub mod cost;
pub mod decomposer;
pub mod error;
pub mod format;
pub mod ir;
pub mod oracle;
pub mod organizer;
pub mod par;
pub mod presets;
pub mod report;
pub mod rf;

pub use error::{Error, Location, Result};
pub use ir::{Head, KernelKind, KernelSpec, NetworkSpec, Overlap, StageSpec, TensorShape, Transition};
pub use par::Execution;
