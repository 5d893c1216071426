//! Desk-scale toolkit for studying dataset-poisoning trojans and cleansing
//! them by linearizing parametric activations and merging the surrounding
//! linear layers.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`], [`tape`], [`optim`], [`loss`], [`linalg`]: a minimal f32
//!   reverse-mode training stack with a deterministic PRNG ([`rng`])
//! - [`layers`], [`activations`], [`model`]: dense/conv layer zoo with four
//!   parametric activations whose linearity coefficient alpha is trainable
//! - [`merge`], [`compress`], [`bound`]: block detection, exact fusion,
//!   compression-ratio accounting, and the probabilistic gap bound audit
//! - [`data`], [`poison`], [`train`]: IDX/synthetic datasets, BadNet /
//!   Blended / SIG attacks, victim training, accuracy and ASR metrics
//! - [`defense`], [`accounting`], [`experiment`]: the linearize-and-merge
//!   cleanser, its fine-tuning baseline, parameter/MAC bookkeeping
//!   (including declarative transformer descriptors), and the end-to-end
//!   seeded pipeline
//! - [`checkpoint`], [`config`], [`report`]: the on-disk surfaces
//! - [`shadow`]: an independent f64 forward path used for verification

pub mod accounting;
pub mod activations;
pub mod bound;
pub mod checkpoint;
pub mod compress;
pub mod config;
pub mod data;
pub mod defense;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod linalg;
pub mod loss;
pub mod merge;
pub mod model;
pub mod ops;
pub mod optim;
pub mod poison;
pub mod report;
pub mod rng;
pub mod shadow;
pub mod tape;
pub mod tensor;
pub mod train;

pub use activations::ActKind;
pub use config::RunConfig;
pub use data::LabeledImageSet;
pub use defense::{DefenseConfig, DefenseMethod, ExperimentReport};
pub use error::{Error, Result};
pub use layers::{AlphaParam, Conv2dLayer, DenseLayer, Layer, ParametricActivation};
pub use merge::MergeableBlock;
pub use model::Model;
pub use poison::{AttackKind, PoisonSpec};
pub use rng::Rng;
pub use tape::GradTape;
pub use tensor::Tensor;
