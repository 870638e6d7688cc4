//! Reverse-mode tape with nested forward-mode spatial derivatives.

mod check;
mod dual;
mod jet;
mod tape;

pub use check::{check_grad, GradCheck};
pub use dual::{gradient3, Dual};
pub use jet::{spatial_grad, tile, Jet};
pub use tape::{sigmoid, softplus, Tape, Var};
