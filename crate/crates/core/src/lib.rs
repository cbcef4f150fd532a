//! Transducer loss kernels: the full-lattice loss, a band-restricted loss
//! whose lattice follows a continuous integrate-and-fire (CIF) alignment,
//! a small jointly trained toy model, streaming emission latency metrics,
//! and a time/memory benchmark of the two kernels.
//!
//! Kernels are generic over the lattice payload type ([`Scalar`], f32 or
//! f64) and accumulate in f64. The aliases below name the common
//! instantiations.

pub mod band;
pub mod bench;
pub mod cif;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod rnnt;
pub mod scalar;
pub mod tensor;

pub use memory::MemTracker;
pub use model::{ModelConfig, ToyModel};

pub use band::{
    bat_loss, bat_loss_tracked, build_window, gather_band, scatter_band, BandWindow, BandedLattice,
};
pub use cif::{cif_boundary, cif_fire, cif_scale, clamp_weights, CifAlignment, CifWeights};
pub use error::{Error, Result};
pub use rnnt::{rnnt_loss, rnnt_loss_tracked, LabelSeq, LogitLattice, LossResult};
pub use scalar::{DType, Element, Scalar};
pub use tensor::{AnyTensor, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type LogitLattice32 = LogitLattice<f32>;
pub type LogitLattice64 = LogitLattice<f64>;
pub type BandedLattice32 = BandedLattice<f32>;
pub type BandedLattice64 = BandedLattice<f64>;
pub type LossResult32 = LossResult<f32>;
pub type LossResult64 = LossResult<f64>;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
