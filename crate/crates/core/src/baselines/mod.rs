//! Comparison models.

pub mod arx;
pub mod linear;
pub mod recurrent;
pub mod residual;
