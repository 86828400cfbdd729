//! Synthetic CT perfusion cases with gamma-variate bolus kinetics.
//!
//! Healthy brain voxels follow a baseline bolus scaled by a smooth tissue
//! factor; lesion voxels (spheres in physical space) get a reduced
//! amplitude and a delayed onset. Perfusion maps come from the noise-free
//! curves, so their orderings between lesion and healthy tissue are exact.

use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::{save_case, CaseRecord, DatasetSplit};

pub const SPLIT_FILE: &str = "split.txt";
pub const DWI_BACKGROUND: f64 = 0.2;
pub const DWI_LESION: f64 = 0.7;
pub const DWI_TEXTURE: f64 = 0.1;
pub const TISSUE_VARIATION: f64 = 0.2;

/// Peak-normalised gamma variate: 1 at `t0 + a·b`, 0 for `t ≤ t0`.
pub fn gamma_variate(t: f64, t0: f64, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Invalid(format!("gamma variate needs a, b > 0 (got {a}, {b})")));
    }
    if t <= t0 {
        return Ok(0.0);
    }
    let s = t - t0;
    Ok((s / (a * b)).powf(a) * (a - s / b).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bolus {
    /// Arterial onset (frames).
    pub t0: f64,
    pub a: f64,
    pub b: f64,
}

impl Bolus {
    pub fn peak_time(&self) -> f64 {
        self.t0 + self.a * self.b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `(Z, Y, X)`.
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub time_points: usize,
    pub n_lesions: usize,
    /// Radius range in in-plane voxels; spheres are round in millimetres.
    pub lesion_radius_range: (f64, f64),
    pub bolus: Bolus,
    pub baseline: f64,
    pub amplitude: f64,
    pub cbf_scale: f64,
    /// Onset delay of lesion curves, in frames.
    pub delay_shift: f64,
    pub noise_sigma: f64,
    pub dwi_noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [12, 128, 128],
            spacing_mm: [5.0, 1.5, 1.5],
            time_points: 48,
            n_lesions: 1,
            lesion_radius_range: (4.0, 14.0),
            bolus: Bolus { t0: 6.0, a: 3.0, b: 2.5 },
            baseline: 30.0,
            amplitude: 60.0,
            cbf_scale: 0.4,
            delay_shift: 4.0,
            noise_sigma: 2.0,
            dwi_noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.dims.iter().any(|&d| d == 0) {
            return bad(format!("dims must be positive, got {:?}", self.dims));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("spacing must be positive, got {:?}", self.spacing_mm));
        }
        if self.time_points < 2 {
            return bad("need at least 2 time points".into());
        }
        if !(self.cbf_scale > 0.0 && self.cbf_scale < 1.0) {
            return bad(format!("cbf_scale must be in (0,1), got {}", self.cbf_scale));
        }
        if !(self.delay_shift > 0.0) {
            return bad(format!("delay_shift must be positive, got {}", self.delay_shift));
        }
        if !(self.bolus.a > 0.0 && self.bolus.b > 0.0) {
            return bad("bolus a and b must be positive".into());
        }
        let (r0, r1) = self.lesion_radius_range;
        if !(r0 > 0.0 && r1 >= r0) {
            return bad(format!("invalid lesion radius range {r0}..{r1}"));
        }
        if !(self.noise_sigma >= 0.0 && self.dwi_noise_sigma >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    /// Centre in voxel coordinates `(z, y, x)`.
    pub centre: [f64; 3],
    pub radius_mm: f64,
}

impl Sphere {
    fn contains(&self, z: usize, y: usize, x: usize, spacing: [f64; 3]) -> bool {
        let p = [z as f64, y as f64, x as f64];
        let d2: f64 = (0..3)
            .map(|a| ((p[a] - self.centre[a]) * spacing[a]).powi(2))
            .sum();
        d2 <= self.radius_mm * self.radius_mm
    }
}

/// In-plane ellipse covering most of each slice.
fn in_brain(y: usize, x: usize, ny: usize, nx: usize) -> bool {
    let cy = (ny as f64 - 1.0) / 2.0;
    let cx = (nx as f64 - 1.0) / 2.0;
    let ry = 0.45 * ny as f64;
    let rx = 0.40 * nx as f64;
    ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2) <= 1.0
}

/// Smooth field in `[-1, 1]` from a few random in-plane sinusoids.
fn texture_field(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Array3<f64> {
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(1.0..3.0) / dims[1].max(dims[2]) as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let zf = rng.random_range(0.0..0.5);
            [theta, freq, phase, zf]
        })
        .collect();
    Array3::from_shape_fn((dims[0], dims[1], dims[2]), |(z, y, x)| {
        let s: f64 = waves
            .iter()
            .map(|&[theta, f, ph, zf]| {
                let u = y as f64 * theta.sin() + x as f64 * theta.cos();
                (std::f64::consts::TAU * f * u + ph + zf * z as f64).sin()
            })
            .sum();
        s / waves.len() as f64
    })
}

fn place_lesion(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Sphere> {
    let [nz, ny, nx] = spec.dims;
    let sp = spec.spacing_mm;
    let (r0, r1) = spec.lesion_radius_range;
    let r_vox = if r1 > r0 { rng.random_range(r0..=r1) } else { r0 };
    let radius_mm = r_vox * sp[1].min(sp[2]);
    let ext = [radius_mm / sp[0], radius_mm / sp[1], radius_mm / sp[2]];
    for _ in 0..200 {
        let mut centre = [0.0; 3];
        let mut ok = true;
        for (a, n) in [nz, ny, nx].into_iter().enumerate() {
            // Spheres may be clipped by the first/last slice, never by the brain.
            let margin = if a == 0 { 0.0 } else { ext[a].floor() };
            let lo = margin;
            let hi = n as f64 - 1.0 - margin;
            if hi < lo {
                ok = false;
                break;
            }
            centre[a] = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        }
        if !ok {
            break;
        }
        let s = Sphere { centre, radius_mm };
        // Every lesion voxel must lie inside the brain ellipse.
        let fits = (0..=(2.0 * ext[1]).ceil() as i64).all(|dy| {
            (0..=(2.0 * ext[2]).ceil() as i64).all(|dx| {
                let y = (centre[1] - ext[1]).floor() as i64 + dy;
                let x = (centre[2] - ext[2]).floor() as i64 + dx;
                if y < 0 || x < 0 || y >= ny as i64 || x >= nx as i64 {
                    return true;
                }
                let (y, x) = (y as usize, x as usize);
                let z = centre[0].round() as usize;
                !s.contains(z, y, x, sp) || in_brain(y, x, ny, nx)
            })
        });
        if fits {
            return Ok(s);
        }
    }
    Err(Error::Invalid(format!(
        "lesion of radius {r_vox:.1} voxels does not fit in dims {:?}",
        spec.dims
    )))
}

/// Map values of one curve shape sampled at frames `0..T`.
struct CurveStats {
    samples: Vec<f64>,
    area: f64,
    centroid: f64,
    peak_frame: usize,
}

fn curve_stats(bolus: Bolus, onset_shift: f64, t: usize) -> CurveStats {
    let samples: Vec<f64> = (0..t)
        .map(|i| gamma_variate(i as f64, bolus.t0 + onset_shift, bolus.a, bolus.b).unwrap_or(0.0))
        .collect();
    let area: f64 = samples.iter().sum();
    let centroid = if area > 0.0 {
        samples.iter().enumerate().map(|(i, c)| i as f64 * c).sum::<f64>() / area
    } else {
        0.0
    };
    let peak_frame = samples
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0;
    CurveStats { samples, area, centroid, peak_frame }
}

/// Generates one case; `case_id` is `"phantom"` (callers rename it).
pub fn generate_case(spec: &PhantomSpec) -> Result<CaseRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [nz, ny, nx] = spec.dims;
    let t = spec.time_points;
    let sp = spec.spacing_mm;

    let texture = texture_field(spec.dims, &mut rng);
    let lesions: Vec<Sphere> = (0..spec.n_lesions)
        .map(|_| place_lesion(spec, &mut rng))
        .collect::<Result<_>>()?;

    let healthy = curve_stats(spec.bolus, 0.0, t);
    let lesion = curve_stats(spec.bolus, spec.delay_shift, t);
    let t_onset = spec.bolus.t0;
    let t_peak = spec.bolus.peak_time();

    let mut cbf = Array3::<f32>::zeros((nz, ny, nx));
    let mut cbv = Array3::<f32>::zeros((nz, ny, nx));
    let mut mtt = Array3::<f32>::zeros((nz, ny, nx));
    let mut tmax = Array3::<f32>::zeros((nz, ny, nx));
    let mut mask = Array3::<f32>::zeros((nz, ny, nx));
    let mut dwi = Array3::<f32>::zeros((nz, ny, nx));
    let mut amp = Array3::<f64>::zeros((nz, ny, nx));
    let mut is_lesion = Array3::from_elem((nz, ny, nx), false);
    let mut brain = Array3::from_elem((nz, ny, nx), false);

    let dwi_noise = Normal::new(0.0, spec.dwi_noise_sigma.max(0.0)).expect("sigma");
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !in_brain(y, x, ny, nx) {
                    continue;
                }
                brain[[z, y, x]] = true;
                let tex = texture[[z, y, x]];
                let les = lesions.iter().any(|s| s.contains(z, y, x, sp));
                let tissue = 1.0 + TISSUE_VARIATION * tex;
                let (curve, a) = if les {
                    (&lesion, spec.amplitude * tissue * spec.cbf_scale)
                } else {
                    (&healthy, spec.amplitude * tissue)
                };
                let v = a * curve.area;
                let m = curve.centroid - t_onset;
                cbv[[z, y, x]] = v as f32;
                mtt[[z, y, x]] = m as f32;
                cbf[[z, y, x]] = (v / m) as f32;
                tmax[[z, y, x]] = (curve.peak_frame as f64 - t_peak) as f32;
                amp[[z, y, x]] = a;
                is_lesion[[z, y, x]] = les;
                mask[[z, y, x]] = if les { 1.0 } else { 0.0 };
                let base = if les { DWI_LESION } else { DWI_BACKGROUND };
                let d = base + DWI_TEXTURE * tex + dwi_noise.sample(&mut rng);
                dwi[[z, y, x]] = d.clamp(0.0, 1.0) as f32;
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("sigma");
    let mut cta = Array4::<f32>::zeros((t, nz, ny, nx));
    for ti in 0..t {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut v = 0.0;
                    if brain[[z, y, x]] {
                        let c = if is_lesion[[z, y, x]] { &lesion } else { &healthy };
                        v = spec.baseline + amp[[z, y, x]] * c.samples[ti];
                    }
                    v += noise.sample(&mut rng);
                    cta[[ti, z, y, x]] = v as f32;
                }
            }
        }
    }

    let case = CaseRecord {
        case_id: "phantom".into(),
        cta: Some(cta),
        cbf,
        cbv,
        mtt,
        tmax,
        dwi: Some(dwi),
        mask: Some(mask),
        spacing_mm: sp,
    };
    case.validate()?;
    Ok(case)
}

/// Seed of case `i` in a corpus generated from `seed`.
pub fn case_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

pub fn case_name(i: usize) -> String {
    format!("case_{i:03}")
}

/// Deterministic 80/10/10 split of `ids` (at least one val and one test case).
pub fn split_cases(ids: &[String], seed: u64) -> DatasetSplit {
    let mut order: Vec<String> = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED));
    let n = order.len();
    let n_val = ((n as f64 * 0.1).round() as usize).max(1);
    let n_test = ((n as f64 * 0.1).round() as usize).max(1);
    let n_train = n - n_val - n_test;
    let mut split = DatasetSplit {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    split.train.sort();
    split.val.sort();
    split.test.sort();
    split
}

/// Writes `n_cases` cases under `out_root` plus a split file; each case
/// copies `base` with its own derived seed.
pub fn generate_corpus(n_cases: usize, base: &PhantomSpec, out_root: &Path) -> Result<DatasetSplit> {
    if n_cases < 3 {
        return Err(Error::Invalid(format!("a corpus needs at least 3 cases, got {n_cases}")));
    }
    base.validate()?;
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let mut ids = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let spec = PhantomSpec { seed: case_seed(base.seed, i), ..base.clone() };
        let mut case = generate_case(&spec)?;
        case.case_id = case_name(i);
        save_case(&out_root.join(&case.case_id), &case)?;
        log::info!("wrote {}", case.case_id);
        ids.push(case.case_id);
    }
    let split = split_cases(&ids, base.seed);
    split.write(&out_root.join(SPLIT_FILE))?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_variate_shape() {
        assert_eq!(gamma_variate(2.0, 2.0, 3.0, 1.5).unwrap(), 0.0);
        assert!((gamma_variate(2.0 + 4.5, 2.0, 3.0, 1.5).unwrap() - 1.0).abs() < 1e-12);
        assert!(gamma_variate(1.0, 0.0, 0.0, 1.0).is_err());
        let (mut best, mut arg) = (0.0, 0.0);
        for i in 0..100_000 {
            let t = i as f64 * 1e-3;
            let v = gamma_variate(t, 5.0, 2.0, 3.0).unwrap();
            if v > best {
                best = v;
                arg = t;
            }
        }
        assert!((arg - 11.0).abs() <= 1e-3);
    }

    #[test]
    fn split_is_80_10_10() {
        let ids: Vec<String> = (0..60).map(case_name).collect();
        let s = split_cases(&ids, 1);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (48, 6, 6));
        let s = split_cases(&ids[..3], 1);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 1));
    }
}
