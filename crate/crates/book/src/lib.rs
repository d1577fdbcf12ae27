//! The guide's chapters as doc comments, so `cargo test` runs every snippet.
//! One module per chapter keeps failures traceable to their file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/wavelets.md")]
pub mod wavelets {}
#[doc = include_str!("../../../book/src/intent.md")]
pub mod intent {}
#[doc = include_str!("../../../book/src/ppo.md")]
pub mod ppo {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
