//! Desk-scale simulator for personalized federated adversarial fine-tuning.
//!
//! The library covers the full two-phase training pipeline:
//!
//! * **Phase 1** — federated adversarial fine-tuning of low-rank adapters.
//!   Clients train adapter-B matrices and a private classifier against
//!   PGD-perturbed inputs using a three-term loss (class-balanced adversarial
//!   cross-entropy, benign/adversarial KL stability, proximity to a fused
//!   global/expert reference). The server aggregates uploaded adapter vectors
//!   with ball-tree k-NN Gaussian weighting, a per-cluster median/MAD
//!   Byzantine filter, and trimmed-mean expert models.
//! * **Phase 2** — forward-gating layer selection. Each client fuses its
//!   adapters into dense layers, searches per-layer sigmoid gates under a
//!   budget with an alternating inner/outer optimization, then retrains the
//!   selected layers on benign data.
//!
//! All numeric kernels are generic over the scalar type via [`Scalar`];
//! concrete `f64` aliases are exported at the crate root ([`Real`],
//! [`RealModel`], ...). Simulations run in `f64` so results are
//! bit-reproducible under a fixed seed.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub mod aggregation;
pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod orchestration;
pub mod rng;

pub use error::{Error, Result};

/// Floating-point scalar usable by every numeric kernel in this crate.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum<Self>
    + ScalarOperand
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from `f64` for constants and RNG draws.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant not representable")
    }

    /// Conversion to `f64` for reporting.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl<T> Scalar for T where
    T: Float
        + NumAssign
        + FromPrimitive
        + ToPrimitive
        + Sum<T>
        + ScalarOperand
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

/// Scalar type used by the shipped simulator and CLI.
pub type Real = f64;
/// Adapter-augmented client model over [`Real`].
pub type RealModel = model::ClientModel<Real>;
/// Fully fused dense model over [`Real`].
pub type RealFusedModel = model::FusedModel<Real>;
/// Flattened adapter vector over [`Real`].
pub type RealFlat = model::FlatVector<Real>;
/// Dataset over [`Real`].
pub type RealDataset = data::Dataset<Real>;
