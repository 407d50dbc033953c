//! Sparse-to-dense depth completion.
//!
//! The pipeline feeds an RGB image, a semantic image, and a sparse depth map
//! through three encoder–decoder branches (color-, semantic-, and
//! depth-guided). Branch features are fused with channel/spatial attention,
//! branch depths are blended with learned confidence weights, and the blended
//! map is refined by iterative affinity-driven propagation with dilated
//! stencils and sparse re-injection.

pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod config;
pub mod cspn;
pub mod data;
pub mod error;
pub mod fusion;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod train;
pub mod viz;

pub use error::{DepthfillError, Result};
