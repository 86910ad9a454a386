//! Small numerical kernels used by the probabilistic modules.

pub mod lsq;
pub mod quadrature;
pub mod root;
pub mod special;
pub mod stats;
