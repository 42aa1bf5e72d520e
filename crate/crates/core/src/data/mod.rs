//! Synthetic paired multispectral scenes, on-disk datasets and loading.

mod dataset;
mod gap;
pub mod raster;
mod render;

pub use dataset::{
    generate_dataset, generate_in_memory, load_dataset, DatasetConfig, Manifest, ManifestHeader,
    PairedSample, PairedSet, SceneEntry, Split,
};
pub use gap::luminance_correlation;
pub use render::{
    class_of, gaussian_blur, luminance, render_clean, render_scene, SceneSpec, Shape, ShapeKind,
    LWIR_BACKGROUND, LWIR_BLUR_SIGMA, NIR_GAMMA, NOISE_STD, NUM_CLASSES,
};
