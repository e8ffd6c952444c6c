//! Rich-feedback preference curation and Diffusion-DPO fine-tuning at desk scale.

pub mod backends;
pub mod diffusion;
pub mod eval;
pub mod pipeline;
pub mod store;
pub mod trainer;
