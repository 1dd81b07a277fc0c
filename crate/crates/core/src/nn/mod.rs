//! Deterministic 64-bit tensor engine and the two miniature backbones.

mod backbone;
pub mod gradcheck;
mod mask;
mod optim;
mod params;
pub mod snapshot;
mod tape;
mod tensor;

pub use backbone::{
    attention_block, forward, forward_with_masks, init_backbone, multi_head_attention, residual_block,
    BackboneConfig, BackboneKind, ForwardTrace, MiniResConfig, MiniVitConfig, NoDropout, SiteHook, SiteSpec,
};
pub use mask::DropoutMask;
pub use optim::{Adam, AdamConfig};
pub use params::{kaiming_uniform, GradFilter, ParamStore, Session};
pub use tape::{softmax, Tape, Var};
pub use tensor::Tensor;


use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("tape misuse: {0}")]
    Tape(String),
    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("mask error: {0}")]
    Mask(String),
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
