use std::fs;
use std::path::Path;

use ctpseg::metrics::{volume_cc, SizeBucket};
use ctpseg::perfusion::{accumulated_intensity_curve, detect_perfusion_window, CtaSequence, DEFAULT_K};
use ctpseg::phantom::*;
use ctpseg::volume_io::{list_cases, load_case, DatasetSplit};
use ndarray::Array3;

fn small_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        dims: [6, 48, 48],
        spacing_mm: [5.0, 1.5, 1.5],
        lesion_radius_range: (4.0, 8.0),
        seed,
        ..PhantomSpec::default()
    }
}

fn region_mean(map: &Array3<f32>, mask: &Array3<f32>, brain: &Array3<bool>, lesion: bool) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for ((i, &v), &m) in map.indexed_iter().zip(mask.iter()) {
        if brain[i] && (m == 1.0) == lesion {
            s += v as f64;
            n += 1.0;
        }
    }
    s / n
}

#[test]
fn map_orderings_hold() {
    for seed in 0..4 {
        let case = generate_case(&small_spec(seed)).unwrap();
        let mask = case.mask.as_ref().unwrap();
        assert!(mask.iter().any(|&v| v == 1.0));
        let brain = case.cbv.mapv(|v| v > 0.0);
        let m = |map: &Array3<f32>, l| region_mean(map, mask, &brain, l);
        assert!(m(&case.cbf, true) < m(&case.cbf, false));
        assert!(m(&case.mtt, true) > m(&case.mtt, false));
        let dt = m(&case.tmax, true) - m(&case.tmax, false);
        assert!((dt - 4.0).abs() <= 1.0, "tmax gap {dt}");
    }
}

#[test]
fn cta_window_is_detected_without_fallback() {
    for seed in 0..4 {
        let case = generate_case(&small_spec(seed)).unwrap();
        let seq = CtaSequence::new(case.cta.unwrap(), case.spacing_mm).unwrap();
        let det = detect_perfusion_window(&accumulated_intensity_curve(&seq), DEFAULT_K).unwrap();
        assert!(!det.used_fallback(), "{det:?}");
        let w = det.window;
        assert!(0 < w.t_start && w.t_start < w.t_end && w.t_end <= seq.time_points() - 1);
    }
}

#[test]
fn mask_recovered_by_thresholding_clean_dwi() {
    let spec = PhantomSpec { dwi_noise_sigma: 0.0, ..small_spec(9) };
    let case = generate_case(&spec).unwrap();
    let dwi = case.dwi.unwrap();
    let mask = case.mask.unwrap();
    for (d, m) in dwi.iter().zip(mask.iter()) {
        assert_eq!(*d > 0.45, *m == 1.0);
    }
}

#[test]
fn lesions_stay_inside_the_brain() {
    for seed in 0..6 {
        let case = generate_case(&PhantomSpec { n_lesions: 2, ..small_spec(seed) }).unwrap();
        let mask = case.mask.unwrap();
        for (i, &m) in mask.indexed_iter() {
            if m == 1.0 {
                assert!(case.cbv[i] > 0.0);
            }
        }
    }
}

#[test]
fn rejects_invalid_specs() {
    assert!(generate_case(&PhantomSpec { cbf_scale: 1.2, ..small_spec(0) }).is_err());
    let huge = PhantomSpec { lesion_radius_range: (40.0, 40.0), ..small_spec(0) };
    assert!(generate_case(&huge).is_err());
}

#[test]
fn wide_radii_span_all_buckets() {
    let mut seen = std::collections::BTreeSet::new();
    for seed in 0..24 {
        let spec = PhantomSpec {
            dims: [20, 112, 112],
            spacing_mm: [5.0, 1.5, 1.5],
            time_points: 8,
            lesion_radius_range: (3.0, 22.0),
            seed,
            ..PhantomSpec::default()
        };
        let case = generate_case(&spec).unwrap();
        let mask = case.mask.unwrap().mapv(|v| v == 1.0);
        seen.insert(SizeBucket::from_cc(volume_cc(mask.view(), spec.spacing_mm)));
    }
    assert_eq!(seen.len(), 3, "{seen:?}");
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn corpus_is_deterministic_and_loadable() {
    let spec = PhantomSpec {
        dims: [3, 32, 32],
        time_points: 12,
        lesion_radius_range: (2.0, 3.0),
        ..small_spec(7)
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let split = generate_corpus(10, &spec, a.path()).unwrap();
    generate_corpus(10, &spec, b.path()).unwrap();
    assert_eq!(read_tree(a.path()), read_tree(b.path()));
    assert_eq!((split.train.len(), split.val.len(), split.test.len()), (8, 1, 1));
    assert_eq!(DatasetSplit::read(&a.path().join(SPLIT_FILE)).unwrap(), split);
    let ids = list_cases(a.path()).unwrap();
    assert_eq!(ids.len(), 10);
    for id in ids {
        let c = load_case(&a.path().join(&id)).unwrap();
        assert!(c.cta.is_some() && c.dwi.is_some() && c.mask.is_some());
    }
    assert!(generate_corpus(2, &spec, a.path()).is_err());
}
