//! Parameter-vector arithmetic, seeded random streams and small dense linear algebra.

mod linalg;
mod param;
mod rng;

pub use linalg::SquareMatrix;
pub use param::{axpy, dot, kahan_sum, sq_dist, weighted_sum, Layout, ParamVector, Segment};
pub(crate) use param::check_finite;
pub use rng::{Purpose, Rng};
