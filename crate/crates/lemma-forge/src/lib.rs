//! Synthesis of error-corrective revision trajectories from math problem
//! corpora: wrong solutions are collected from a student model or injected
//! by a teacher model, truncated at their first erroneous step, and bridged
//! to a correct continuation through a fixed reflection phrase. The result
//! is a filtered SFT dataset plus scoring and statistics tooling.

pub mod answer;
pub mod model;
pub mod segment;
pub mod gateway;
pub mod analyzer;
pub mod forge;
pub mod pipeline;
