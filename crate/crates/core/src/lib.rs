//! Sequential-dependence multi-task learning on conversion-funnel data.
//!
//! The crate covers the full loop at desk scale: feature ingestion and
//! embedding, an inducing-point attention encoder with an annealed hard/soft
//! example selector, per-task pattern extraction, a dependence-aware loss,
//! reference baselines, a synthetic funnel generator, exact finite-support
//! checks of the distribution-reweighting identities, and a deterministic
//! Adam trainer with resumable checkpoints. Everything runs on f64 with a
//! small taped autodiff engine in [`numerics`].

pub mod asrg;
pub mod baselines;
pub mod datagen;
pub mod features;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pattern_selector;
pub mod theory;
pub mod trainer;
