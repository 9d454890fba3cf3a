//! Image decoding/encoding, colour conversion and corpus discovery.

pub mod color;
pub mod corpus;
pub mod image;

pub use color::{hsv_to_rgb, rgb_to_hsv, Hsv};
pub use corpus::scan_corpus;
pub use image::{load_image, save_image, Image8};
