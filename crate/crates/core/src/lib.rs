//! Desk-scale laboratory for semi-supervised learning and unsupervised
//! domain adaptation on synthetic covariate-shift problems.

pub mod autodiff;
pub mod models;
pub mod domains;
pub mod ssl;
pub mod uda;
pub mod trainer;
pub mod analysis;
