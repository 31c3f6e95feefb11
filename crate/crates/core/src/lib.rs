pub mod attention_reg;
pub mod combinators;
pub mod equiv;
pub mod error;
pub mod expcli;
pub mod losses;
pub mod ndgrad;
pub mod refine;
pub mod transform;

pub use error::{Error, Result};
