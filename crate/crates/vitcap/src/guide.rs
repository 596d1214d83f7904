//! The book, compiled.
//!
//! Each module below embeds one chapter of the mdbook under `book/`
//! as its doc comment, so `cargo test --doc` builds and runs every
//! code block in the book. The book cannot drift from the library:
//! a snippet that stops compiling fails the test suite. One module
//! per chapter keeps doctest failures attributable to their source
//! file.

#[doc = include_str!("../../../book/src/tour.md")]
pub mod tour {}

#[doc = include_str!("../../../book/src/tensors-and-tape.md")]
pub mod tensors_and_tape {}

#[doc = include_str!("../../../book/src/gradient-checking.md")]
pub mod gradient_checking {}

#[doc = include_str!("../../../book/src/images-and-fixtures.md")]
pub mod images_and_fixtures {}

#[doc = include_str!("../../../book/src/text-and-vocabulary.md")]
pub mod text_and_vocabulary {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/decoding.md")]
pub mod decoding {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/alignment.md")]
pub mod alignment {}
