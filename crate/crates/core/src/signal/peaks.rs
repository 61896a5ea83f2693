//! Valley/peak detection by sign changes of the first difference.

/// One valley followed by the next peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValleyPeak {
    pub valley: usize,
    pub peak: usize,
    /// Rise from valley to peak.
    pub amplitude: f64,
}

/// Interior local minima and maxima, in time order, as `(index, is_peak)`.
/// A plateau extremum is reported at the first sample of the plateau.
pub fn local_extrema(x: &[f64]) -> Vec<(usize, bool)> {
    let mut out = Vec::new();
    let mut prev_dir = 0i8;
    let mut plateau_start = 0usize;
    for i in 0..x.len().saturating_sub(1) {
        let d = x[i + 1] - x[i];
        let dir = if d > 0.0 {
            1
        } else if d < 0.0 {
            -1
        } else {
            continue;
        };
        if prev_dir == -1 && dir == 1 {
            out.push((plateau_start, false));
        } else if prev_dir == 1 && dir == -1 {
            out.push((plateau_start, true));
        }
        prev_dir = dir;
        plateau_start = i + 1;
    }
    out
}

/// Valley-peak pairs whose rise is at least `min_amplitude`.
pub fn valley_peak_pairs(x: &[f64], min_amplitude: f64) -> Vec<ValleyPeak> {
    let extrema = local_extrema(x);
    extrema
        .windows(2)
        .filter_map(|w| match (w[0], w[1]) {
            ((valley, false), (peak, true)) => {
                let amplitude = x[peak] - x[valley];
                (amplitude >= min_amplitude).then_some(ValleyPeak {
                    valley,
                    peak,
                    amplitude,
                })
            }
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_has_no_pairs() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        assert!(valley_peak_pairs(&x, 0.01).is_empty());
        let y: Vec<f64> = x.iter().rev().copied().collect();
        assert!(valley_peak_pairs(&y, 0.01).is_empty());
    }

    #[test]
    fn plateau_tie_breaks_to_first_sample() {
        let x = [3.0, 2.0, 1.0, 1.0, 1.0, 2.0, 4.0, 4.0, 3.0];
        let pairs = valley_peak_pairs(&x, 0.01);
        assert_eq!(
            pairs,
            vec![ValleyPeak {
                valley: 2,
                peak: 6,
                amplitude: 3.0
            }]
        );
    }

    #[test]
    fn threshold_filters_small_rises() {
        let x = [1.0, 0.9, 0.905, 0.8, 1.2, 1.0];
        let pairs = valley_peak_pairs(&x, 0.01);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].valley, 3);
        assert_eq!(pairs[0].peak, 4);
    }
}
