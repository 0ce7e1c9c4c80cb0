//! Camera model, perspective projection, Procrustes alignment and PnP refinement.

mod camera;
mod pnp;
mod procrustes;

pub use camera::{nearest_rotation, project, CameraModel, DEFAULT_UNKNOWN_FOCAL};
pub use pnp::{orthonormality_error, pnp_refine, robust_reprojection_cost, PnpOptions, PnpOutcome};
pub use procrustes::{procrustes_align, rigid_init_relative_camera, AlignScale, SimilarityTransform};
