//! Front propagation laboratory for the Fisher-KPP equation `u_t = u_xx + f(u)`
//! with front-like initial data.

pub mod barrier_check;
pub mod error;
pub mod front_lab;
pub mod kpp_core;
pub mod linear_tail;
pub mod quadrature;
pub mod rd_solver;
pub mod scenario;
pub mod special;
pub mod traveling_wave;

pub use error::{LabError, Result};
