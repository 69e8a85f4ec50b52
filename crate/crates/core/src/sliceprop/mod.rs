//! Slice propagators: windowed affinity registration with cycle
//! verification, and volumetric displacement fields with kernel refinement.

pub mod affinity;
pub mod edge;
pub mod flow;
pub mod model;
mod network;
pub mod propagate;
pub mod refine;
pub mod train;

pub use affinity::{compute_affinity, verify_and_correct, warp_with_affinity, AffinityMatrix, Verification};
pub use edge::{edge_profile, edge_weight_map};
pub use flow::{apply_ddf, boundary_loss, predict_ddf, DeformationFieldSet};
pub use model::{AffinityArch, Arch, FlowArch, PropagatorKind, PropagatorModel, Regularization};
pub use propagate::{
    propagate, propagate_affinity, propagate_flow, select_annotated_slice, PropagateOptions, Propagation,
    PropagationRecord, Sampling, SliceAnnotation,
};
pub use refine::{refine_mask_kernel, RefineConfig, Refined};
pub use train::{smoothed_ratio, train, train_affinity_model, train_flow_model, train_with_observer};
