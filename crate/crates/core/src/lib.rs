//! Layered vector graphics from image-mask hierarchies.

pub mod document;
pub mod edit;
pub mod error;
pub mod geometry;
pub mod maskio;
pub mod raster;
pub mod rasterizer;
pub mod svgio;
pub mod vectorize;

pub use error::{Error, Result};
pub use geometry::{BezierPath, CubicBezier, Point2, Polyline};
pub use raster::{BinaryMask, RasterImage, Rgb};
