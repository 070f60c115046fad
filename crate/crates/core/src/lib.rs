//! Deep-equilibrium query decoder and a toy set-prediction detector.

pub mod decoder;
pub mod fixed_point;
pub mod geometry;
pub mod grad;
pub mod losses;
pub mod synth;
pub mod tensor;
pub mod trainer;
