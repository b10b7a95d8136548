#![cfg_attr(not(feature = "std"), no_std)]
extern crate alloc;

pub mod datagen;
pub mod diagnostics;
pub mod diffcore;
pub mod error;
pub mod layers;
pub mod linalg;
pub mod lmm;
pub mod math;
pub mod metrics;
pub mod sr;
pub mod trainer;
pub mod unmix;
pub mod vca;

pub use error::{Error, Result};
