//! Synthetic tasks, timing methodology and experiment presets.

pub mod synthetic;
pub mod presets;
pub mod timing;
