//! Layout-to-image generation with per-instance assembled attention on top
//! of a small pixel-space diffusion transformer.

pub mod assemble;
pub mod autograd;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod layout_encoder;
pub mod mmdit;
pub mod model;
pub mod params;
pub mod raster;
pub mod synth_data;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use geometry::{BBox, CropRegion, DensityMap};
pub use layout_encoder::{Instance, InstanceContent, Layout};
pub use model::{Model, ModelConfig, Phase, Toggles};
pub use raster::RgbImage;
pub use tensor::{Matrix, Real};
