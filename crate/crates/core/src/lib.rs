//! Motion-deblurring dynamic Gaussian splatting on the CPU.

pub mod blce;
pub mod blursynth;
pub mod eval;
pub mod geometry;
pub mod grad;
pub mod image;
pub mod io;
pub mod lcee;
pub mod nn;
pub mod raster;
pub mod scene;
pub mod trainer;
