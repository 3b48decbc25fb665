//! Desk-scale laboratory for gradient-leakage attacks on CTC-trained
//! sequence models: input reconstruction via derivative-free gradients
//! matching, speaker identification of the reconstructions, and the
//! DP-SGD / dropout defenses that degrade the attack.

pub mod attack;
pub mod corpus;
pub mod ctc;
pub mod defense;
pub mod error;
pub mod experiment;
pub mod math;
pub mod model;
pub mod speaker;

pub use error::{GradLabError, Result};
