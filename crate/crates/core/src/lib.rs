//! Deep P-spline networks: B-spline neuron layers with layer-wise difference
//! penalties, closed-form ECM tuning of the penalty weights, GCV-driven
//! structure selection, a Gaussian-process output head for surrogate
//! modeling, and the benchmark harness around them.

pub mod basis;
pub mod bench;
pub mod data;
pub mod linalg;
pub mod model;
pub mod ecm;
pub mod gp;
pub mod select;
pub mod train;

pub use basis::{BasisError, DifferenceOp, KnotVector};
pub use data::{load_csv, save_csv, DataError, Dataset, Response};
pub use model::{DpsModel, ForwardCache, ModelError, NetworkSpec, OutputKind, Standardization};
