//! Dense grids with a first-order reverse-mode tape and Adam.

mod adam;
mod attention;
mod conv;
mod grid;
mod ops;
mod points;
mod pool;
mod sample;
mod tape;

pub use adam::AdamState;
pub use grid::{GradGrid, NodeRef};
pub use points::PointMap;
pub use sample::{DOMAIN_SLACK, MAX_DIM};
pub use tape::{Gradients, Param, ParamId, Tape};

pub(crate) use sample::Outside;
