//! The guide under `book/` as doc modules, one per chapter, so that
//! `cargo test --doc` runs every listing.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/prefix-experts.md")]
pub mod prefix_experts {}
#[doc = include_str!("../../../book/src/prompt-pools.md")]
pub mod prompt_pools {}
#[doc = include_str!("../../../book/src/objective.md")]
pub mod objective {}
#[doc = include_str!("../../../book/src/replay.md")]
pub mod replay {}
#[doc = include_str!("../../../book/src/voting.md")]
pub mod voting {}
#[doc = include_str!("../../../book/src/benchmark.md")]
pub mod benchmark {}
