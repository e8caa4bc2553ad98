//! Synthetic parametric shapes, silhouette rendering and dataset files.

mod dataset;
mod ply;
mod render;
mod shapes;

pub use dataset::{build_dataset, DatasetConfig, DatasetManifest, LoadedShape, ManifestEntry, ShapeEntryConfig, Split, MANIFEST_FILE};
pub use ply::{parse_ply, read_ply, to_ply_string, write_ply};
pub use render::{render_silhouette, CameraModel, SilhouetteImage, View, SPLAT_RADIUS_PX};
pub use shapes::{generate_shape, validate_params, PointCloudShape, ShapeFamily, ShapeSpec, PARAM_MAX, PARAM_MIN, SHAPE_EXTENT};
