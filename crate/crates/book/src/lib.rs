// mdbook can't test snippets that depend on an outside crate, so each
// chapter is pulled in here as the docs of an empty module and `cargo test`
// runs the code blocks as doctests. One module per chapter keeps a failure
// traceable to its page.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/volumes.md")]
pub mod volumes {}
#[doc = include_str!("../../../book/src/fields.md")]
pub mod fields {}
#[doc = include_str!("../../../book/src/objective.md")]
pub mod objective {}
#[doc = include_str!("../../../book/src/gradients.md")]
pub mod gradients {}
#[doc = include_str!("../../../book/src/registration.md")]
pub mod registration {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/attention.md")]
pub mod attention {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
