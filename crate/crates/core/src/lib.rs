//! Heat-wide association study toolkit: stage-1 quasi-Poisson screening of
//! diagnosis codes against daily maximum temperature and stage-2
//! case-crossover distributed-lag non-linear models.
//!
//! The numerical core (`splinebasis`, `glmfit`, `clogitfit`, `dlnm`) is
//! generic over [`scalar::Real`]; orchestration works in `f64`.

pub mod clogitfit;
pub mod config;
pub mod crossover;
pub mod dlnm;
pub mod effect;
pub mod exposure;
pub mod glmfit;
pub mod ingest;
pub mod linalg;
pub mod pipeline;
pub mod scalar;
pub mod screening;
pub mod splinebasis;
pub mod synth;

pub use scalar::Real;

pub type MatrixF32 = linalg::Matrix<f32>;
pub type MatrixF64 = linalg::Matrix<f64>;
pub type BasisSpecF32 = splinebasis::BasisSpec<f32>;
pub type BasisSpecF64 = splinebasis::BasisSpec<f64>;
pub type CrossBasisF32 = dlnm::CrossBasis<f32>;
pub type CrossBasisF64 = dlnm::CrossBasis<f64>;
pub type QuasiPoissonFitF32 = glmfit::QuasiPoissonFit<f32>;
pub type QuasiPoissonFitF64 = glmfit::QuasiPoissonFit<f64>;
pub type ClogitFitF32 = clogitfit::ClogitFit<f32>;
pub type ClogitFitF64 = clogitfit::ClogitFit<f64>;
pub type EffectEstimateF32 = effect::EffectEstimate<f32>;
pub type EffectEstimateF64 = effect::EffectEstimate<f64>;
