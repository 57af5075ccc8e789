//! Hierarchical cross-modal guidance.
//!
//! The low-level path reprojects the non-dominant feature through a
//! spatial correlation with the dominant one and refines the residual sum.
//! The high-level path is a compound distillation loss that pulls the
//! student (non-dominant) feature toward the teacher (dominant) feature.

mod distill;
mod reproject;

pub use distill::{
    da_included_pixels, feature_variance, loss_da, loss_distill, loss_distill_with_scale, loss_rw, loss_struct,
    scale_factor, w_sem, DistillComponents, DistillResult, DistillWeights, DA_NORM_EPS,
};
pub use reproject::{
    correlation, correlation_backward, refine, reproject, reproject_backward, LowLevelCache,
    LowLevelGrads, QKProjection, RefineBlock,
};
