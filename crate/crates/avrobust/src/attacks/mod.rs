//! Universal perturbations in the log-mel domain.

mod pgd;
mod project;
mod universal;

pub use pgd::{multimodal_pgd_step, pgd_step, AttackConfig, Direction, Mask, Range};
pub use project::{normalize_gradient, normalize_gradient_with, project, LinfStep, Norm};
pub use universal::{
    apply_perturbation, sidecar_path, train_universal_observed, train_universal_perturbation, train_universal_with,
    Perturbation, BALL_TOLERANCE,
};
