//! Multimodal identity datasets: synthetic generation, directory IO,
//! augmentation and triplet sampling.

pub mod augment;
pub mod dataset;
pub mod image;
pub mod sampler;
pub mod synthetic;

pub use augment::{augment, AugmentPolicy};
pub use dataset::{load_directory, save_directory, DatasetSplit, MultimodalSample};
pub use image::ImageBuf;
pub use sampler::{sample_triplets, TripletBatch, TripletSampler};
pub use synthetic::{generate_synthetic, pixel_nn_r1, SyntheticSpec};
