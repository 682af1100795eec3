//! Procedural stand-in for a shape category: colored box and ellipsoid
//! compositions, an analytic ray caster for ground-truth views, surface point
//! extraction and camera pose sampling.

mod cameras;
mod dataset;
mod object;
mod points;

pub use cameras::{near_far, sample_camera_poses, CameraRig, PoseMode, UNIT_CUBE_BOUND};
pub use dataset::{build_dataset, load_dataset, load_manifest, write_dataset, Dataset, DatasetConfig, Manifest, ManifestEntry, Split};
pub use object::{generate_toy_object, reference_render, ObjectClass, Primitive, PrimitiveKind, ToyObject};
pub use points::{extract_points, sample_surface, surface_area};
