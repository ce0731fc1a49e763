//! Desk-scale networks: the dual-head optimizee with its frozen reference,
//! its coordinate partition, and the recurrent learning-rate policy.

pub mod checkpoint;
mod model;
mod policy;

pub use checkpoint::Checkpoint;
pub use model::{
    digest, ArchKind, Architecture, Backbone, BackboneOut, Classifier, Conv, Coordinate, CoordinateMap, Dense,
    DualHeadModel, DualOutput, NewHead, REGISTERED_ARCHS,
};
pub use policy::{
    argmax, index_to_scale, sample_categorical, ActionMode, ActionVector, PolicyNetwork, PolicyStep, DEFAULT_ACTIONS,
    DEFAULT_HIDDEN,
};
