//! Configuration, datasets, plots and other plumbing around training.

pub mod config;
pub mod data;
pub mod features;
pub mod images;
pub mod plots;
pub mod synthetic;

pub use config::RunConfig;
pub use data::DataSource;
pub use features::{synthetic_patch_bank, synthetic_pixel_bank, LabelKind};
pub use images::{decode_image, load_image_folder, save_rgb_map, ImageFolder, Preprocess};
pub use plots::{emit_plots, parse_metrics, PlotData, COLLAPSE_THRESHOLD};
pub use synthetic::{
    generate_synthetic, SyntheticDataset, SyntheticSample, SyntheticSpec, TextureLibrary,
};
