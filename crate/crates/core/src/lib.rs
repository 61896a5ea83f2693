//! Unified dynamic model (UDM) of skin conductance.
//!
//! Skin conductance is modelled as the output of a low-order discrete linear
//! time-invariant system driven by a sparse, nonnegative sudomotor nerve
//! activity (SNA) signal and started from a nonzero initial state. The free
//! response of the system carries the tonic level, the forced response the
//! phasic responses.
//!
//! The crate is organised bottom-up:
//!
//! * [`signal`]: sampled series, preprocessing and validity screening
//! * [`lti`]: simulation, poles, partial fractions and subsystem pruning
//! * [`sysid`]: transfer-function and initial-state estimation (M-step)
//! * [`deconv`]: nonnegative L1-regularised SNA deconvolution (E-step)
//! * [`pipeline`]: trough-to-peak initialisation and the alternating fit
//! * [`decompose`]: free / short-term / long-term component split
//! * [`stats`]: arousal scores, Wilcoxon signed-rank test, sparsity metrics
//! * [`synth`]: ground-truth recording generator

pub mod decompose;
pub mod deconv;
pub mod error;
pub mod lti;
pub mod pipeline;
pub mod signal;
pub mod stats;
pub mod synth;
pub mod sysid;

pub use error::{Result, UdmError};
pub use lti::{DiscreteTransferFunction, InitialState};
pub use signal::UniformSeries;
pub use deconv::SnaSignal;
pub use pipeline::{fit, FitConfig, FitResult};
