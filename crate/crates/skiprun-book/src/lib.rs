//! mdbook cannot run this book's examples against the real crate, so each
//! chapter is included here as module docs and `cargo test --doc` executes
//! every code block. One module per chapter keeps test failures traceable to
//! the file they came from.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../../book/src/skipping.md")]
pub mod skipping {}

#[doc = include_str!("../../../book/src/profiling.md")]
pub mod profiling {}

#[doc = include_str!("../../../book/src/benchmarking.md")]
pub mod benchmarking {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
