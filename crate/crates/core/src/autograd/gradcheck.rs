//! Central finite-difference gradient checking in double precision.

use rand::seq::index::sample;
use rand::Rng;

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Relative error with a small absolute floor so exactly-zero gradients compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        diff / 1e-8
    } else {
        diff / scale
    }
}

/// Compares `analytic` (the gradient of `f` w.r.t. `input`) against central
/// differences with step `h`, on at most `max_coords` randomly chosen coordinates.
pub fn check_tensor<R: Rng>(
    input: &Tensor<f64>,
    analytic: &Tensor<f64>,
    f: &mut dyn FnMut(&Tensor<f64>) -> f64,
    h: f64,
    max_coords: usize,
    rng: &mut R,
) -> GradCheckReport {
    assert_eq!(input.shape(), analytic.shape());
    let n = input.numel();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        sample(rng, n, max_coords).into_vec()
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut probe = input.clone();
    for i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let err = rel_err(a, numeric);
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report
}
