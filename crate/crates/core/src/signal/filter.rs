//! Butterworth low-pass design by bilinear transform with frequency
//! prewarping, realised as a cascade of second-order sections (plus one
//! first-order section for odd orders).

use std::f64::consts::PI;

use num_complex::Complex64;

use super::UniformSeries;
use crate::error::{Result, UdmError};

/// One section `(b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
/// First-order sections carry `b2 = a2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Section {
    b: [f64; 3],
    a: [f64; 2],
}

impl Section {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    fn response(&self, z_inv: Complex64) -> Complex64 {
        let num = self.b[0] + z_inv * (self.b[1] + z_inv * self.b[2]);
        let den = 1.0 + z_inv * (self.a[0] + z_inv * self.a[1]);
        num / den
    }

    /// Transposed direct-form II states that hold `x0` as a fixed point.
    fn steady_state(&self, x0: f64) -> [f64; 2] {
        let y0 = self.dc_gain() * x0;
        let s2 = self.b[2] * x0 - self.a[1] * y0;
        let s1 = self.b[1] * x0 - self.a[0] * y0 + s2;
        [s1, s2]
    }

    fn run(&self, input: &mut [f64]) {
        let Some(&first) = input.first() else { return };
        let [mut s1, mut s2] = self.steady_state(first);
        for x in input.iter_mut() {
            let xin = *x;
            let y = self.b[0] * xin + s1;
            s1 = self.b[1] * xin - self.a[0] * y + s2;
            s2 = self.b[2] * xin - self.a[1] * y;
            *x = y;
        }
    }
}

/// A designed Butterworth low-pass filter.
#[derive(Debug, Clone, PartialEq)]
pub struct ButterworthLowpass {
    sections: Vec<Section>,
    order: usize,
    cutoff_hz: f64,
    sample_rate_hz: f64,
}

impl ButterworthLowpass {
    pub fn design(order: usize, cutoff_hz: f64, sample_rate_hz: f64) -> Result<Self> {
        if !(1..=4).contains(&order) {
            return Err(UdmError::invalid(format!("filter order must be 1..=4, got {order}")));
        }
        let nyquist = 0.5 * sample_rate_hz;
        if !(cutoff_hz > 0.0) || cutoff_hz >= nyquist {
            return Err(UdmError::invalid(format!(
                "cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz"
            )));
        }
        // Prewarped analog cutoff, normalised so the bilinear map is s = (1 - z^-1)/(1 + z^-1).
        let k = (PI * cutoff_hz / sample_rate_hz).tan();
        let mut sections = Vec::with_capacity(order.div_ceil(2));
        for idx in 0..order {
            let theta = PI * (2 * idx + order + 1) as f64 / (2 * order) as f64;
            let pole = Complex64::from_polar(1.0, theta);
            if pole.im > 1e-12 {
                let q = 1.0 / (-2.0 * pole.re);
                let norm = 1.0 / (1.0 + k / q + k * k);
                let b0 = k * k * norm;
                sections.push(Section {
                    b: [b0, 2.0 * b0, b0],
                    a: [2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm],
                });
            } else if pole.im.abs() <= 1e-12 {
                let b0 = k / (1.0 + k);
                sections.push(Section {
                    b: [b0, b0, 0.0],
                    a: [(k - 1.0) / (k + 1.0), 0.0],
                });
            }
        }
        Ok(ButterworthLowpass {
            sections,
            order,
            cutoff_hz,
            sample_rate_hz,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn cutoff_hz(&self) -> f64 {
        self.cutoff_hz
    }

    pub fn dc_gain(&self) -> f64 {
        self.sections.iter().map(Section::dc_gain).product()
    }

    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / self.sample_rate_hz;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections
            .iter()
            .map(|s| s.response(z_inv))
            .fold(Complex64::new(1.0, 0.0), |acc, h| acc * h)
    }

    /// Causal filtering with every section started at steady state for the
    /// first sample.
    pub fn apply(&self, samples: &[f64]) -> Vec<f64> {
        let mut out = samples.to_vec();
        for s in &self.sections {
            s.run(&mut out);
        }
        out
    }
}

/// Forward (causal) Butterworth low-pass of a series.
pub fn butterworth_lowpass(series: &UniformSeries, cutoff_hz: f64, order: usize) -> Result<UniformSeries> {
    let filter = ButterworthLowpass::design(order, cutoff_hz, series.sample_rate())?;
    series.with_samples(filter.apply(series.samples()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn steady_amplitude(out: &[f64], skip: usize) -> f64 {
        out[skip..].iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    #[test]
    fn constant_passes_unchanged() {
        let s = UniformSeries::new(vec![3.7; 500], 1.0 / 32.0).unwrap();
        for order in 1..=4 {
            let y = butterworth_lowpass(&s, 5.0, order).unwrap();
            for v in y.samples() {
                assert!((v - 3.7).abs() < 1e-12, "order {order}: {v}");
            }
        }
    }

    #[test]
    fn dc_gain_is_one() {
        for order in 1..=4 {
            let f = ButterworthLowpass::design(order, 5.0, 32.0).unwrap();
            assert!((f.dc_gain() - 1.0).abs() < 1e-12);
            assert!((f.response(0.0).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn minus_three_db_at_cutoff() {
        let fs = 32.0;
        let fc = 5.0;
        for order in 1..=4 {
            let f = ButterworthLowpass::design(order, fc, fs).unwrap();
            let n = (fs * 60.0) as usize;
            let x: Vec<f64> = (0..n)
                .map(|i| (2.0 * PI * fc * i as f64 / fs).sin())
                .collect();
            let y = f.apply(&x);
            // measure over the last 40 cycles, peak of interpolated sine
            let skip = n - (40.0 * fs / fc) as usize;
            let rms_in = (x[skip..].iter().map(|v| v * v).sum::<f64>() / (n - skip) as f64).sqrt();
            let rms_out = (y[skip..].iter().map(|v| v * v).sum::<f64>() / (n - skip) as f64).sqrt();
            let db = 20.0 * (rms_out / rms_in).log10();
            assert!((db + 3.0103).abs() < 0.1, "order {order}: {db} dB");
            let analytic = 20.0 * f.response(fc).norm().log10();
            assert!((analytic + 3.0103).abs() < 1e-6);
        }
    }

    #[test]
    fn attenuates_twelve_hertz_noise() {
        let fs = 32.0;
        let f = ButterworthLowpass::design(2, 5.0, fs).unwrap();
        let n = 32 * 60;
        let x: Vec<f64> = (0..n)
            .map(|i| 2.0 + 50e-3 * (2.0 * PI * 12.0 * i as f64 / fs).sin())
            .collect();
        let y = f.apply(&x);
        let amp_in = steady_amplitude(&x.iter().map(|v| v - 2.0).collect::<Vec<_>>(), 320);
        let amp_out = steady_amplitude(&y.iter().map(|v| v - 2.0).collect::<Vec<_>>(), 320);
        let atten = 20.0 * (amp_in / amp_out).log10();
        assert!(atten >= 14.0, "attenuation {atten} dB");
    }

    #[test]
    fn rejects_cutoff_at_nyquist() {
        assert!(ButterworthLowpass::design(2, 5.0, 10.0).is_err());
        assert!(ButterworthLowpass::design(0, 1.0, 10.0).is_err());
        assert!(ButterworthLowpass::design(5, 1.0, 10.0).is_err());
    }
}
