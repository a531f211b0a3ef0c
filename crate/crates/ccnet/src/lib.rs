//! EEG-to-mel-spectrogram decoding with a ConvConcatNet-style network.
//!
//! The crate is self-contained: a small f64 tensor library with reverse-mode
//! autodiff ([`tensor`], [`graph`], [`gradcheck`]), the concatenation-fusion
//! network itself ([`model`]), Pearson-correlation training with Adam and
//! binary checkpoints ([`train`], [`checkpoint`]), the recording format,
//! subject-wise cross-validation folds and a synthetic dataset generator
//! ([`data`]), and normalized-prediction ensembling plus evaluation
//! ([`eval`]).
//!
//! See the guide under `book/` for a walkthrough; its code snippets run as
//! doc-tests.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod hash;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use graph::{GradStore, Graph, ParamId, ParamSet, Parameter};
pub use model::{build_model, param_count, Model, ModelConfig};
pub use tensor::{Mat, ShapeError, Tensor3};
