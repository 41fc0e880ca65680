//! Cross-modality medical image segmentation with an adversarial image
//! alignment module and mutual knowledge distillation between a segmentor
//! trained on translated assistant-modality images and a segmentor trained
//! on real target-modality images.
//!
//! All numerics are generic over [`Scalar`]; the `*32`/`*64` aliases below
//! pin the two supported precisions.

mod bytes;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Network32 = models::NetworkHandle<f32>;
pub type Network64 = models::NetworkHandle<f64>;
pub type ProbabilityMap32 = models::ProbabilityMap<f32>;
pub type ProbabilityMap64 = models::ProbabilityMap<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
