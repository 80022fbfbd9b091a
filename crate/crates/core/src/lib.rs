//! Volumetric inpainting of healthy brain tissue: volumes and masks, a 3D
//! U-Net, masked losses and metrics, mask generation and augmentation,
//! patch handling and training.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod io;
pub mod losses;
pub mod maskgen;
pub mod metrics;
pub mod patch;
pub mod phantom;
pub mod train;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Dims, Label, LabelMask, RangeTag, Volume};
