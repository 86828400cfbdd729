//! Raw 4D CTA feature extraction: accumulated-intensity curve, perfusion-window
//! detection, temporal crop + down-sampling, temporal MIP and intensity scaling.

use ndarray::{Array, Array3, Array4, ArrayView, Axis, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of consecutive derivative samples in the window rules.
pub const DEFAULT_K: usize = 5;
/// Default number of frames kept after down-sampling.
pub const DEFAULT_CE: usize = 6;

/// Raw spatiotemporal CTA volume, axes `(T,Z,Y,X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtaSequence {
    data: Array4<f32>,
    spacing_mm: [f64; 3],
}

impl CtaSequence {
    pub fn new(data: Array4<f32>, spacing_mm: [f64; 3]) -> Result<Self> {
        let t = data.len_of(Axis(0));
        if t < 2 {
            return Err(Error::Invalid(format!("CTA needs at least 2 time points, got {t}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("CTA contains non-finite values".into()));
        }
        Ok(Self { data, spacing_mm })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn time_points(&self) -> usize {
        self.data.len_of(Axis(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerfusionWindow {
    pub t_start: usize,
    pub t_end: usize,
}

impl PerfusionWindow {
    pub fn new(t_start: usize, t_end: usize, time_points: usize) -> Result<Self> {
        if t_start > t_end || t_end >= time_points {
            return Err(Error::Invalid(format!(
                "invalid perfusion window [{t_start}, {t_end}] for {time_points} time points"
            )));
        }
        Ok(Self { t_start, t_end })
    }

    pub fn len(&self) -> usize {
        self.t_end - self.t_start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A detected window plus which of the two rules had to fall back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowDetection {
    pub window: PerfusionWindow,
    pub start_fallback: bool,
    pub end_fallback: bool,
    /// The rules produced `t_start > t_end` and the full range was used instead.
    pub crossed: bool,
}

impl WindowDetection {
    pub fn used_fallback(&self) -> bool {
        self.start_fallback || self.end_fallback || self.crossed
    }
}

/// `q(t)`: sum of all voxel intensities of frame `t`.
pub fn accumulated_intensity_curve(seq: &CtaSequence) -> Vec<f64> {
    seq.data
        .outer_iter()
        .map(|frame| frame.iter().map(|&v| v as f64).sum())
        .collect()
}

/// Backward difference with `q'(0) = 0`.
fn backward_difference(q: &[f64]) -> Vec<f64> {
    let mut d = vec![0.0; q.len()];
    for t in 1..q.len() {
        d[t] = q[t] - q[t - 1];
    }
    d
}

/// Heaviside step with `H(0) = 0`.
fn heaviside(x: f64) -> bool {
    x > 0.0
}

/// Start/end of contrast passage from the accumulated-intensity curve.
///
/// `t_start` is the earliest `t < T−K` whose next `K` derivatives are all
/// positive; `t_end` the latest `t ≥ K` whose preceding `K` derivatives are
/// all non-positive. Missing rules fall back to `0` / `T−1`.
pub fn detect_perfusion_window(q: &[f64], k: usize) -> Result<WindowDetection> {
    let t_len = q.len();
    if k == 0 {
        return Err(Error::Invalid("K must be positive".into()));
    }
    if t_len < k + 1 {
        return Err(Error::Invalid(format!(
            "curve of length {t_len} is too short for K = {k} (need at least {})",
            k + 1
        )));
    }
    let d = backward_difference(q);
    let start = (0..t_len - k).find(|&t| (0..k).all(|j| heaviside(d[t + j])));
    let end = (k..t_len).rev().find(|&t| (0..k).all(|j| !heaviside(d[t - j])));
    let t_start = start.unwrap_or(0);
    let t_end = end.unwrap_or(t_len - 1);
    let crossed = t_start > t_end;
    let window = if crossed {
        PerfusionWindow {
            t_start: 0,
            t_end: t_len - 1,
        }
    } else {
        PerfusionWindow { t_start, t_end }
    };
    Ok(WindowDetection {
        window,
        start_fallback: start.is_none(),
        end_fallback: end.is_none(),
        crossed,
    })
}

/// Frame indices `round(t_start + k·(t_end−t_start)/(C_e−1))`, `k = 0..C_e`.
pub fn downsample_indices(win: PerfusionWindow, c_e: usize) -> Vec<usize> {
    assert!(c_e >= 1, "C_e must be positive");
    if c_e == 1 {
        return vec![win.t_start];
    }
    let span = (win.t_end - win.t_start) as f64;
    (0..c_e)
        .map(|k| (win.t_start as f64 + k as f64 * span / (c_e - 1) as f64).round() as usize)
        .collect()
}

/// `I*`: the frames at [`downsample_indices`], stacked as `(C_e,Z,Y,X)`.
pub fn temporal_crop_downsample(seq: &CtaSequence, win: PerfusionWindow, c_e: usize) -> Result<Array4<f32>> {
    if win.t_start > win.t_end || win.t_end >= seq.time_points() {
        return Err(Error::Invalid(format!(
            "window [{}, {}] invalid for {} time points",
            win.t_start,
            win.t_end,
            seq.time_points()
        )));
    }
    if c_e == 0 {
        return Err(Error::Invalid("C_e must be positive".into()));
    }
    let idx = downsample_indices(win, c_e);
    Ok(seq.data.select(Axis(0), &idx))
}

/// `F_l`: per-voxel maximum over the full time axis.
pub fn temporal_mip(seq: &CtaSequence) -> Array3<f32> {
    let mut frames = seq.data.outer_iter();
    let mut out = frames.next().expect("at least one frame").to_owned();
    for frame in frames {
        Zip::from(&mut out).and(&frame).for_each(|o, &v| {
            if v > *o {
                *o = v;
            }
        });
    }
    out
}

/// Linear-interpolation percentile of an already sorted slice.
pub fn percentile_sorted(sorted: &[f32], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized<D: Dimension> {
    pub data: Array<f32, D>,
    pub min: f64,
    pub p99: f64,
    /// Set when the input was constant (`p99 == min`); `data` is then all zeros.
    pub degenerate: bool,
}

/// Scales to `[0,1]` using the minimum and the 99th percentile, clipping above.
pub fn normalize_intensity<D: Dimension>(vol: ArrayView<f32, D>) -> Normalized<D> {
    let mut sorted: Vec<f32> = vol.iter().copied().collect();
    if sorted.is_empty() {
        return Normalized {
            data: vol.to_owned(),
            min: 0.0,
            p99: 0.0,
            degenerate: true,
        };
    }
    sorted.sort_by(f32::total_cmp);
    let min = sorted[0] as f64;
    let p99 = percentile_sorted(&sorted, 99.0);
    let range = p99 - min;
    if !(range > 0.0) {
        log::warn!("normalize_intensity: constant volume, returning zeros");
        return Normalized {
            data: Array::zeros(vol.raw_dim()),
            min,
            p99,
            degenerate: true,
        };
    }
    let data = vol.mapv(|v| (((v as f64 - min) / range).clamp(0.0, 1.0)) as f32);
    Normalized {
        data,
        min,
        p99,
        degenerate: false,
    }
}

/// Low-level feature, cropped/down-sampled sequence and the detection that produced it.
#[derive(Debug, Clone)]
pub struct CtaFeatures {
    pub f_l: Array3<f32>,
    pub i_star: Array4<f32>,
    pub detection: WindowDetection,
    pub indices: Vec<usize>,
}

pub fn extract_features(seq: &CtaSequence, k: usize, c_e: usize) -> Result<CtaFeatures> {
    let q = accumulated_intensity_curve(seq);
    let detection = detect_perfusion_window(&q, k)?;
    let i_star = temporal_crop_downsample(seq, detection.window, c_e)?;
    Ok(CtaFeatures {
        f_l: temporal_mip(seq),
        i_star,
        indices: downsample_indices(detection.window, c_e),
        detection,
    })
}
