//! Dense numeric core: row-major matrices, reproducible random streams,
//! stable tempered softmax and a central-difference gradient estimator.

mod fdiff;
mod matrix;
mod rng;
mod softmax;

pub use fdiff::finite_diff_grad;
pub use matrix::Matrix;
pub use rng::RngStream;
pub use softmax::{argmax, log_softmax_row_into, log_tempered_softmax, softmax_row_into, tempered_softmax};
