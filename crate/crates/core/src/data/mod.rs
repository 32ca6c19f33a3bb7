//! Dataset, map and checkpoint formats, standardization, and synthetic scenes.

pub mod checkpoint;
pub mod raster;
pub mod standardize;
pub mod synth;
pub mod text;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use raster::{crop_rotate_map, load_map_raster, write_map_raster, CropSpec, Interpolation, MapCrop, MapRaster};
pub use standardize::{standardize, ClassStats, StandardizationStats, StandardizedInstance};
pub use synth::{generate_synthetic, Scenario, SyntheticSpec};
pub use text::{load_trajectory_text, write_trajectory_text, TextFormat};
