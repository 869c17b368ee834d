//! Guide chapters, compiled here so their snippets run as doc-tests.

#[doc = include_str!("../../../book/src/index.md")]
pub mod index {}

#[doc = include_str!("../../../book/src/encoder.md")]
pub mod encoder {}

#[doc = include_str!("../../../book/src/sampling.md")]
pub mod sampling {}

#[doc = include_str!("../../../book/src/targets.md")]
pub mod targets {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/scenes.md")]
pub mod scenes {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
