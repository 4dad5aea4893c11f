//! Anatomy prior network, per-sequence pathology encoders, cross-modal max
//! fusion and the scenario-dependent scar/edema decoder sets.
//!
//! The prior U-Net sees every available sequence and outputs
//! background/myocardium/LV probabilities. Each pathology encoder sees its
//! own sequence(s) plus that prior. A decoder attached to encoder `n` is fed,
//! at every scale, `n`'s own features and the elementwise max of the other
//! encoders' features, and outputs background/LV/healthy-myo/pathology.

mod checkpoint;
pub mod fusion;
mod inference;
mod maps;
mod net;
mod scenario;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use fusion::{build_pathology_inputs, cmff_fuse, fuse_max, FeaturePyramid};
pub use inference::{predict_study, predict_study_maps};
pub use maps::{
    assemble_prediction, mpc_class, pathology_class, pathology_probabilities, reformulate_mpc,
    reformulate_pathology, ProbabilityMaps, PATHOLOGY_THRESHOLD,
};
pub use net::{model_forward, ForwardVars, MyoPsNet, NetConfig, NetInput};
pub use scenario::{DecoderId, DecoderSource, EncoderId, Pathology, ScenarioConfig, ScenarioName};
