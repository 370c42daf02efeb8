//! Multi-class abnormality classification of capsule endoscopy frames with a
//! DenseNet-style + ResNet-style ensemble.
//!
//! The crate covers the whole pipeline: dataset discovery and stratified
//! splitting ([`dataset`]), preprocessing and augmentation ([`preprocess`]),
//! the networks ([`nn`]) and their gradient check ([`gradcheck`]),
//! optimization ([`training`]), batched inference ([`inference`]), checkpoints
//! ([`checkpoint`]), metrics ([`evaluation`]), t-SNE ([`tsne`]), figure
//! rendering ([`plot`]), a synthetic dataset generator ([`synth`]) and the
//! run configuration ([`config`]).

pub mod dataset;
pub mod nn;
pub mod preprocess;
pub mod checkpoint;
pub mod training;
pub mod gradcheck;
pub mod evaluation;
pub mod inference;
pub mod tsne;
pub mod plot;
pub mod synth;
pub mod config;
