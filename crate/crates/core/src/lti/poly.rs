//! Dense real polynomials stored with the highest power first.

use num_complex::Complex64;

pub fn mul(p: &[f64], q: &[f64]) -> Vec<f64> {
    if p.is_empty() || q.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; p.len() + q.len() - 1];
    for (i, &pi) in p.iter().enumerate() {
        for (j, &qj) in q.iter().enumerate() {
            out[i + j] += pi * qj;
        }
    }
    out
}

/// `p + q`, aligning the constant terms.
pub fn add(p: &[f64], q: &[f64]) -> Vec<f64> {
    let n = p.len().max(q.len());
    let mut out = vec![0.0; n];
    for (k, v) in p.iter().rev().enumerate() {
        out[n - 1 - k] += v;
    }
    for (k, v) in q.iter().rev().enumerate() {
        out[n - 1 - k] += v;
    }
    out
}

pub fn scale(p: &[f64], s: f64) -> Vec<f64> {
    p.iter().map(|c| c * s).collect()
}

pub fn eval_complex(p: &[f64], z: Complex64) -> Complex64 {
    p.iter().fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c)
}

/// Value and first derivative at `z`.
pub fn eval_with_derivative(p: &[f64], z: Complex64) -> (Complex64, Complex64) {
    let mut val = Complex64::new(0.0, 0.0);
    let mut der = Complex64::new(0.0, 0.0);
    for &c in p {
        der = der * z + val;
        val = val * z + c;
    }
    (val, der)
}

/// Monic polynomial with the given roots; conjugate pairs must both be present
/// for the result to be real, and imaginary residue is discarded.
pub fn from_roots(roots: &[Complex64]) -> Vec<f64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
        for (i, &c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        coeffs = next;
    }
    coeffs.into_iter().map(|c| c.re).collect()
}
