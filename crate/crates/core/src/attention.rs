//! Lesion-centred spatial weight map shared by the synthesis and
//! segmentation losses.
//!
//! Foreground pixels get weight `w`; a background pixel at in-plane
//! Euclidean distance `d` (pixels) from the lesion gets
//! `0.5 + e^{-d/D} / (e^{-d/D} + 1)`, which decays from 1 towards 0.5.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::edt::edt;
use crate::error::{Error, Result};

pub const DEFAULT_FOREGROUND_WEIGHT: f64 = 1.5;
pub const DEFAULT_DECAY: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub data: Array2<f64>,
    pub w: f64,
    pub d: f64,
}

/// Background weight at distance `dist` with decay `d`.
pub fn background_weight(dist: f64, d: f64) -> f64 {
    let e = (-dist / d).exp();
    0.5 + e / (e + 1.0)
}

fn check_params(w: f64, d: f64) -> Result<()> {
    if !(w >= 1.0) {
        return Err(Error::Invalid(format!("foreground weight must be >= 1, got {w}")));
    }
    if !(d > 0.0) {
        return Err(Error::Invalid(format!("decay D must be positive, got {d}")));
    }
    Ok(())
}

/// Weight map of one 2-D slice. An empty mask yields 0.5 everywhere.
pub fn compute_weight_map(mask: ArrayView2<f32>, w: f64, d: f64) -> Result<WeightMap> {
    check_params(w, d)?;
    if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invalid("weight map mask must be binary".into()));
    }
    let (h, wd) = mask.dim();
    let sites: Vec<bool> = mask.iter().map(|&v| v == 1.0).collect();
    let data = if sites.iter().any(|&s| s) {
        let dist = edt(&sites, &[h, wd], &[1.0, 1.0]);
        let vals = sites
            .iter()
            .zip(dist)
            .map(|(&fg, di)| if fg { w } else { background_weight(di, d) })
            .collect();
        Array2::from_shape_vec((h, wd), vals).expect("shape")
    } else {
        Array2::from_elem((h, wd), 0.5)
    };
    Ok(WeightMap { data, w, d })
}

/// Per-slice weight maps of a `(Z,Y,X)` mask.
pub fn weight_map_volume(mask: ArrayView3<f32>, w: f64, d: f64) -> Result<Array3<f64>> {
    let mut out = Array3::zeros(mask.raw_dim());
    for (z, slice) in mask.axis_iter(Axis(0)).enumerate() {
        let map = compute_weight_map(slice, w, d)?;
        out.index_axis_mut(Axis(0), z).assign(&map.data);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(points: &[(usize, usize)], h: usize, w: usize) -> Array2<f32> {
        let mut m = Array2::zeros((h, w));
        for &(y, x) in points {
            m[[y, x]] = 1.0;
        }
        m
    }

    #[test]
    fn foreground_gets_w() {
        let m = mask_with(&[(3, 3)], 8, 8);
        let map = compute_weight_map(m.view(), 1.5, 50.0).unwrap();
        assert_eq!(map.data[[3, 3]], 1.5);
    }

    #[test]
    fn closed_form_values() {
        assert!((background_weight(0.0, 50.0) - 1.0).abs() < 1e-12);
        let e = (-1.0f64).exp();
        assert!((background_weight(50.0, 50.0) - (0.5 + e / (e + 1.0))).abs() < 1e-15);
        assert!((background_weight(50.0, 50.0) - 0.76894).abs() < 1e-5);
    }

    #[test]
    fn pixel_distance_used() {
        let m = mask_with(&[(0, 0)], 1, 60);
        let map = compute_weight_map(m.view(), 1.5, 50.0).unwrap();
        assert!((map.data[[0, 50]] - background_weight(50.0, 50.0)).abs() < 1e-12);
        assert!((map.data[[0, 1]] - background_weight(1.0, 50.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_uniform_half() {
        let m = Array2::<f32>::zeros((5, 7));
        let map = compute_weight_map(m.view(), 1.5, 50.0).unwrap();
        assert!(map.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_non_binary() {
        let mut m = Array2::<f32>::zeros((2, 2));
        m[[0, 0]] = 0.3;
        assert!(compute_weight_map(m.view(), 1.5, 50.0).is_err());
        assert!(compute_weight_map(Array2::zeros((2, 2)).view(), 0.5, 50.0).is_err());
    }

    #[test]
    fn background_decreases_with_distance() {
        let m = mask_with(&[(4, 4), (4, 5)], 10, 16);
        let map = compute_weight_map(m.view(), 1.5, 50.0).unwrap();
        for x in 6..15 {
            assert!(map.data[[4, x + 1]] < map.data[[4, x]]);
            assert!(map.data[[4, x]] > 0.5 && map.data[[4, x]] <= 1.0);
        }
    }
}
