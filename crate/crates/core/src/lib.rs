//! Watertight surface reconstruction from raw, unoriented and corrupted point
//! clouds by minimizing the Dirichlet energy of a point-based generalized
//! winding-number field.
//!
//! The field at a query `q` is
//!
//! ```text
//! w(q) = sum_i a_i c_i (p_i - q) . n_i / (4 pi |p_i - q|^3)
//! ```
//!
//! with per-point normals `n_i`, area weights `a_i` and confidences `c_i`.
//! [`optimizer::run_diwr`] alternates normal updates, area-weight and
//! confidence optimization; [`extract`] turns the result into a closed mesh.

pub mod confidence;
pub mod corrupt;
pub mod energies;
pub mod energy_grid;
pub mod error;
pub mod extract;
pub mod metrics;
pub mod optimizer;
pub mod orientation;
pub mod pcio;
pub mod pipeline;
pub mod shapes;
pub mod spatial;
pub mod winding;

pub use error::{DiwrError, Result};
pub use pcio::{PointCloud, ScaleRecord, TriMesh};

pub type Vec3 = nalgebra::Vector3<f64>;

pub(crate) const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;
