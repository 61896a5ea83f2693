use serde::{Deserialize, Serialize};

use super::{partial_fractions, DiscreteTransferFunction, InitialState, Subsystem};
use crate::error::{Result, UdmError};

/// One subsystem as written to a model file. For complex pairs `gain` and
/// `gain_imag` are the real and imaginary parts of the residue at the
/// upper-half-plane pole, and `time_constant` is that of the envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsystemRecord {
    pub gain: f64,
    #[serde(default)]
    pub gain_imag: f64,
    pub pole_real: f64,
    pub pole_imag: f64,
    pub time_constant: Option<f64>,
}

/// Serialized model and initial state. Coefficients are authoritative; the
/// subsystem list is derived and informational.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub order: usize,
    pub sample_interval: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub initial_state: Vec<f64>,
    #[serde(default)]
    pub subsystems: Vec<SubsystemRecord>,
}

impl ModelRecord {
    pub fn new(tf: &DiscreteTransferFunction, init: &InitialState) -> Self {
        let dt = tf.sample_interval();
        let subsystems = partial_fractions(tf)
            .map(|set| {
                set.subsystems
                    .iter()
                    .map(|s| {
                        let (gain, gain_imag) = match s {
                            Subsystem::Real { gain, .. } => (*gain, 0.0),
                            Subsystem::ComplexPair { residue, .. } => (residue.re, residue.im),
                        };
                        SubsystemRecord {
                            gain,
                            gain_imag,
                            pole_real: s.pole().re,
                            pole_imag: s.pole().im,
                            time_constant: s.time_constant(dt),
                        }
                    })
                    .collect()
            })
            .unwrap_or_default();
        ModelRecord {
            order: tf.order(),
            sample_interval: dt,
            a: tf.a().to_vec(),
            b: tf.b().to_vec(),
            initial_state: init.prior_outputs().to_vec(),
            subsystems,
        }
    }

    pub fn to_model(&self) -> Result<(DiscreteTransferFunction, InitialState)> {
        if self.a.len() != self.order || self.initial_state.len() != self.order {
            return Err(UdmError::invalid(format!(
                "model record of order {} has {} denominator and {} state values",
                self.order,
                self.a.len(),
                self.initial_state.len()
            )));
        }
        Ok((
            DiscreteTransferFunction::new(self.a.clone(), self.b.clone(), self.sample_interval)?,
            InitialState::new(self.initial_state.clone())?,
        ))
    }
}
