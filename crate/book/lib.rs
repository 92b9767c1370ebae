//! The guide's chapters, compiled as doc-tests so every snippet stays in
//! sync with the library.

#[doc = include_str!("src/intro.md")]
pub mod chapter0 {}
#[doc = include_str!("src/lattice.md")]
pub mod chapter1 {}
#[doc = include_str!("src/losses.md")]
pub mod chapter2 {}
#[doc = include_str!("src/decoding.md")]
pub mod chapter3 {}
#[doc = include_str!("src/pipeline.md")]
pub mod chapter4 {}
