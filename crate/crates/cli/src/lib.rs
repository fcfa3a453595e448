//! Rendering helpers behind the `dimaf` binary.

pub mod render;
