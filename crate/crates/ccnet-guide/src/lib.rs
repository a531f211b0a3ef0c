//! The guide under `book/` rendered as doc modules.
//!
//! mdBook cannot run a book's code listings against the workspace crates, so
//! each chapter is included here as module documentation and `cargo test
//! --doc` executes every Rust snippet. A chapter edit that breaks a snippet
//! breaks the build, which keeps the book in sync with the library.
//!
//! One module per chapter so a failing doc-test names its chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tensors-and-autodiff.md")]
pub mod tensors_and_autodiff {}

#[doc = include_str!("../../../book/src/the-network.md")]
pub mod the_network {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/data-and-folds.md")]
pub mod data_and_folds {}

#[doc = include_str!("../../../book/src/evaluation-and-ensembling.md")]
pub mod evaluation_and_ensembling {}

#[doc = include_str!("../../../book/src/cli-walkthrough.md")]
pub mod cli_walkthrough {}
