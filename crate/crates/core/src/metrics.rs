//! Segmentation and synthesis evaluation metrics.
//!
//! Masks are `(Z,Y,X)` boolean volumes; spacing follows the same order in
//! millimetres. Surface distances use 6-connected exposure and exact
//! Euclidean distance transforms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize, Serializer};

use crate::edt::squared_edt;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const LOCAL_MARGIN_INPLANE: usize = 5;
pub const LOCAL_MARGIN_SLICES: usize = 1;

/// Returned by [`psnr`] when the two inputs are identical over the region.
pub const PSNR_INFINITE: f64 = f64::INFINITY;

pub fn binarize(v: ArrayView3<f32>) -> Array3<bool> {
    v.mapv(|x| x >= 0.5)
}

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("shape mismatch {a:?} vs {b:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn dice_precision_recall(seg: ArrayView3<bool>, gt: ArrayView3<bool>) -> Result<Overlap> {
    same_shape(seg.shape(), gt.shape())?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    Zip::from(&seg).and(&gt).for_each(|&s, &g| match (s, g) {
        (true, true) => tp += 1,
        (true, false) => fp += 1,
        (false, true) => fneg += 1,
        _ => {}
    });
    let n_seg = tp + fp;
    let n_gt = tp + fneg;
    if n_seg == 0 && n_gt == 0 {
        return Ok(Overlap { dice: 1.0, precision: 1.0, recall: 1.0 });
    }
    if n_seg == 0 || n_gt == 0 {
        return Ok(Overlap { dice: 0.0, precision: 0.0, recall: 0.0 });
    }
    let tp = tp as f64;
    Ok(Overlap {
        dice: 2.0 * tp / (2.0 * tp + fp as f64 + fneg as f64),
        precision: tp / n_seg as f64,
        recall: tp / n_gt as f64,
    })
}

/// Foreground voxels with at least one face neighbour that is background
/// or outside the volume.
pub fn surface(mask: ArrayView3<bool>) -> Array3<bool> {
    let (nz, ny, nx) = mask.dim();
    let mut out = Array3::from_elem((nz, ny, nx), false);
    let bg = |z: isize, y: isize, x: isize| {
        z < 0
            || y < 0
            || x < 0
            || z >= nz as isize
            || y >= ny as isize
            || x >= nx as isize
            || !mask[[z as usize, y as usize, x as usize]]
    };
    for ((z, y, x), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let (z, y, x) = (z as isize, y as isize, x as isize);
        out[[z as usize, y as usize, x as usize]] = bg(z - 1, y, x)
            || bg(z + 1, y, x)
            || bg(z, y - 1, x)
            || bg(z, y + 1, x)
            || bg(z, y, x - 1)
            || bg(z, y, x + 1);
    }
    out
}

/// Distances (mm) from each surface voxel of `from` to the surface of `to`.
fn directed_surface_distances(
    from_surface: &Array3<bool>,
    to_surface: &Array3<bool>,
    spacing: [f64; 3],
) -> Vec<f64> {
    let dims = from_surface.shape().to_vec();
    let sites: Vec<bool> = to_surface.iter().copied().collect();
    let d2 = squared_edt(&sites, &dims, &spacing);
    from_surface
        .iter()
        .zip(d2)
        .filter(|(s, _)| **s)
        .map(|(_, d)| d.sqrt())
        .collect()
}

fn surfaces(
    seg: ArrayView3<bool>,
    gt: ArrayView3<bool>,
    name: &str,
) -> Result<(Array3<bool>, Array3<bool>)> {
    same_shape(seg.shape(), gt.shape())?;
    if !seg.iter().any(|&v| v) || !gt.iter().any(|&v| v) {
        return Err(Error::UndefinedMetric(format!("{name} needs non-empty masks")));
    }
    Ok((surface(seg), surface(gt)))
}

pub fn hausdorff(seg: ArrayView3<bool>, gt: ArrayView3<bool>, spacing: [f64; 3]) -> Result<f64> {
    let (s, g) = surfaces(seg, gt, "hausdorff")?;
    let a = directed_surface_distances(&s, &g, spacing);
    let b = directed_surface_distances(&g, &s, spacing);
    Ok(a.into_iter().chain(b).fold(0.0, f64::max))
}

pub fn assd(seg: ArrayView3<bool>, gt: ArrayView3<bool>, spacing: [f64; 3]) -> Result<f64> {
    let (s, g) = surfaces(seg, gt, "assd")?;
    let a = directed_surface_distances(&s, &g, spacing);
    let b = directed_surface_distances(&g, &s, spacing);
    let n = (a.len() + b.len()) as f64;
    Ok((a.iter().sum::<f64>() + b.iter().sum::<f64>()) / n)
}

/// Volume in cubic centimetres of the `true` voxels.
pub fn volume_cc(mask: ArrayView3<bool>, spacing: [f64; 3]) -> f64 {
    let n = mask.iter().filter(|&&v| v).count() as f64;
    n * spacing.iter().product::<f64>() / 1000.0
}

pub fn rve(seg: ArrayView3<bool>, gt: ArrayView3<bool>, spacing: [f64; 3]) -> Result<f64> {
    same_shape(seg.shape(), gt.shape())?;
    let vg = volume_cc(gt, spacing);
    if vg == 0.0 {
        return Err(Error::UndefinedMetric("rve needs a non-empty ground truth".into()));
    }
    Ok((vg - volume_cc(seg, spacing)).abs() / vg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub fn from_cc(cc: f64) -> Self {
        if cc < 10.0 {
            Self::Small
        } else if cc <= 50.0 {
            Self::Medium
        } else {
            Self::Large
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Small => "small",
            Self::Medium => "medium",
            Self::Large => "large",
        }
    }
}

pub fn size_bucket(gt: ArrayView3<bool>, spacing: [f64; 3]) -> Result<SizeBucket> {
    let cc = volume_cc(gt, spacing);
    if cc == 0.0 {
        return Err(Error::UndefinedMetric("size bucket of an empty lesion".into()));
    }
    Ok(SizeBucket::from_cc(cc))
}

/// Inclusive `(z0..=z1, y0..=y1, x0..=x1)` box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Region {
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        (self.lo[0]..=self.hi[0]).contains(&z)
            && (self.lo[1]..=self.hi[1]).contains(&y)
            && (self.lo[2]..=self.hi[2]).contains(&x)
    }
}

/// Bounding box of the lesion, grown by the local-region margins and
/// clipped to the volume. `None` for an empty mask.
pub fn local_region(gt: ArrayView3<bool>) -> Option<Region> {
    let dims = gt.dim();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((z, y, x), &v) in gt.indexed_iter() {
        if v {
            any = true;
            for (a, c) in [z, y, x].into_iter().enumerate() {
                lo[a] = lo[a].min(c);
                hi[a] = hi[a].max(c);
            }
        }
    }
    if !any {
        return None;
    }
    let margins = [LOCAL_MARGIN_SLICES, LOCAL_MARGIN_INPLANE, LOCAL_MARGIN_INPLANE];
    let ext = [dims.0, dims.1, dims.2];
    for a in 0..3 {
        lo[a] = lo[a].saturating_sub(margins[a]);
        hi[a] = (hi[a] + margins[a]).min(ext[a] - 1);
    }
    Some(Region { lo, hi })
}

/// Per-pixel SSIM of one slice for every window centre whose 7×7 window
/// lies fully inside the image. Index `[cy-3, cx-3]`.
pub fn ssim_map_2d(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Array2::zeros((0, 0));
    }
    let n = (k * k) as f64;
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let cov_norm = n / (n - 1.0);
    let mut out = Array2::zeros((h - k + 1, w - k + 1));
    for ((oy, ox), o) in out.indexed_iter_mut() {
        let wa = a.slice(s![oy..oy + k, ox..ox + k]);
        let wb = b.slice(s![oy..oy + k, ox..ox + k]);
        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        Zip::from(&wa).and(&wb).for_each(|&x, &y| {
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        });
        let ma = sa / n;
        let mb = sb / n;
        let va = cov_norm * (saa / n - ma * ma);
        let vb = cov_norm * (sbb / n - mb * mb);
        let vab = cov_norm * (sab / n - ma * mb);
        *o = ((2.0 * ma * mb + c1) * (2.0 * vab + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    out
}

/// Mean windowed SSIM over slices. With `region`, only windows centred in
/// the region contribute.
pub fn ssim(a: ArrayView3<f32>, b: ArrayView3<f32>, region: Option<Region>) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    let half = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..a.dim().0 {
        if let Some(r) = region {
            if z < r.lo[0] || z > r.hi[0] {
                continue;
            }
        }
        let sa = a.index_axis(Axis(0), z).mapv(f64::from);
        let sb = b.index_axis(Axis(0), z).mapv(f64::from);
        let map = ssim_map_2d(sa.view(), sb.view());
        for ((my, mx), &v) in map.indexed_iter() {
            if let Some(r) = region {
                if !r.contains(z, my + half, mx + half) {
                    continue;
                }
            }
            total += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("ssim region holds no complete window".into()));
    }
    Ok(total / count as f64)
}

/// PSNR in dB for data range 1. Identical inputs give [`PSNR_INFINITE`].
pub fn psnr(a: ArrayView3<f32>, b: ArrayView3<f32>, region: Option<Region>) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((z, y, x), &va) in a.indexed_iter() {
        if region.is_some_and(|r| !r.contains(z, y, x)) {
            continue;
        }
        let d = f64::from(va) - f64::from(b[[z, y, x]]);
        sum += d * d;
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("psnr region is empty".into()));
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_INFINITE);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn ser_opt_f64<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() => s.serialize_str(if *x > 0.0 { "inf" } else { "-inf" }),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

/// Metrics of one case. `None` marks a metric that is undefined for it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub hd_mm: Option<f64>,
    pub assd_mm: Option<f64>,
    pub rve: Option<f64>,
    pub ssim_global: Option<f64>,
    pub ssim_local: Option<f64>,
    #[serde(serialize_with = "ser_opt_f64")]
    pub psnr_global: Option<f64>,
    #[serde(serialize_with = "ser_opt_f64")]
    pub psnr_local: Option<f64>,
    pub lesion_volume_cc: f64,
    pub size_bucket: Option<SizeBucket>,
}

/// Inputs to [`evaluate_case`]. Synthesis metrics need both images.
pub struct CaseInputs<'a> {
    pub case_id: &'a str,
    pub seg: ArrayView3<'a, bool>,
    pub gt: ArrayView3<'a, bool>,
    pub spacing_mm: [f64; 3],
    pub synth: Option<ArrayView3<'a, f32>>,
    pub dwi: Option<ArrayView3<'a, f32>>,
}

pub fn evaluate_case(inp: &CaseInputs) -> Result<CaseMetrics> {
    let ov = dice_precision_recall(inp.seg, inp.gt)?;
    let sp = inp.spacing_mm;
    let ok = |r: Result<f64>| -> Result<Option<f64>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(m)) => {
                log::debug!("{}: {m}", inp.case_id);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    };
    let region = local_region(inp.gt);
    let (mut sg, mut sl, mut pg, mut pl) = (None, None, None, None);
    if let (Some(a), Some(b)) = (inp.synth, inp.dwi) {
        sg = ok(ssim(a, b, None))?;
        pg = ok(psnr(a, b, None))?;
        if let Some(r) = region {
            sl = ok(ssim(a, b, Some(r)))?;
            pl = ok(psnr(a, b, Some(r)))?;
        }
    }
    Ok(CaseMetrics {
        case_id: inp.case_id.to_string(),
        dice: ov.dice,
        precision: ov.precision,
        recall: ov.recall,
        hd_mm: ok(hausdorff(inp.seg, inp.gt, sp))?,
        assd_mm: ok(assd(inp.seg, inp.gt, sp))?,
        rve: ok(rve(inp.seg, inp.gt, sp))?,
        ssim_global: sg,
        ssim_local: sl,
        psnr_global: pg,
        psnr_local: pl,
        lesion_volume_cc: volume_cc(inp.gt, sp),
        size_bucket: size_bucket(inp.gt, sp).ok(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    /// Finite values that entered the statistics.
    pub n: usize,
}

impl Summary {
    /// Population mean and standard deviation over the finite values.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt(), n: v.len() })
    }
}

pub const METRIC_NAMES: [&str; 11] = [
    "dice",
    "precision",
    "recall",
    "hd_mm",
    "assd_mm",
    "rve",
    "ssim_global",
    "ssim_local",
    "psnr_global",
    "psnr_local",
    "lesion_volume_cc",
];

impl CaseMetrics {
    pub fn values(&self) -> [Option<f64>; 11] {
        [
            Some(self.dice),
            Some(self.precision),
            Some(self.recall),
            self.hd_mm,
            self.assd_mm,
            self.rve,
            self.ssim_global,
            self.ssim_local,
            self.psnr_global,
            self.psnr_local,
            Some(self.lesion_volume_cc),
        ]
    }
}

pub type Aggregate = BTreeMap<String, Option<Summary>>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_case: Vec<CaseMetrics>,
    pub overall: Aggregate,
    pub per_bucket: BTreeMap<SizeBucket, Aggregate>,
}

fn aggregate<'a>(cases: impl Iterator<Item = &'a CaseMetrics> + Clone) -> Aggregate {
    METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let s = Summary::of(cases.clone().filter_map(|c| c.values()[i]));
            (name.to_string(), s)
        })
        .collect()
}

impl MetricsReport {
    pub fn new(per_case: Vec<CaseMetrics>) -> Self {
        let overall = aggregate(per_case.iter());
        let mut per_bucket = BTreeMap::new();
        for b in [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large] {
            let it = per_case.iter().filter(move |c| c.size_bucket == Some(b));
            if it.clone().next().is_some() {
                per_bucket.insert(b, aggregate(it));
            }
        }
        Self { per_case, overall, per_bucket }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per case, followed by `mean`/`std` rows overall and per bucket.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) if x.is_infinite() => "inf".to_string(),
            Some(x) => format!("{x}"),
            None => String::new(),
        };
        let mut out = String::from("case_id,");
        out += &METRIC_NAMES.join(",");
        out += ",size_bucket\n";
        for c in &self.per_case {
            let vals: Vec<String> = c.values().iter().map(|v| fmt(*v)).collect();
            let bucket = c.size_bucket.map(|b| b.as_str()).unwrap_or("");
            let _ = writeln!(out, "{},{},{}", c.case_id, vals.join(","), bucket);
        }
        let mut summary_rows = |label: &str, agg: &Aggregate| {
            for (stat, pick) in [("mean", 0), ("std", 1)] {
                let vals: Vec<String> = METRIC_NAMES
                    .iter()
                    .map(|m| {
                        fmt(agg[*m].map(|s| if pick == 0 { s.mean } else { s.std }))
                    })
                    .collect();
                let _ = writeln!(out, "{stat},{},{label}", vals.join(","));
            }
        };
        summary_rows("all", &self.overall);
        for (b, agg) in &self.per_bucket {
            summary_rows(b.as_str(), agg);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: (usize, usize, usize), pts: &[(usize, usize, usize)]) -> Array3<bool> {
        let mut m = Array3::from_elem(dims, false);
        for &p in pts {
            m[p] = true;
        }
        m
    }

    #[test]
    fn overlap_examples() {
        let seg = mask((1, 1, 3), &[(0, 0, 0), (0, 0, 1)]);
        let gt = mask((1, 1, 3), &[(0, 0, 1), (0, 0, 2)]);
        let o = dice_precision_recall(seg.view(), gt.view()).unwrap();
        assert_eq!((o.dice, o.precision, o.recall), (0.5, 0.5, 0.5));
        let e = Array3::from_elem((1, 1, 3), false);
        let o = dice_precision_recall(e.view(), e.view()).unwrap();
        assert_eq!(o.dice, 1.0);
        let o = dice_precision_recall(e.view(), gt.view()).unwrap();
        assert_eq!(o.recall, 0.0);
    }

    #[test]
    fn distances_of_single_voxels() {
        let a = mask((1, 1, 5), &[(0, 0, 0)]);
        let b = mask((1, 1, 5), &[(0, 0, 3)]);
        assert_eq!(hausdorff(a.view(), b.view(), [1.0; 3]).unwrap(), 3.0);
        assert_eq!(hausdorff(a.view(), b.view(), [1.0, 1.0, 2.0]).unwrap(), 6.0);
        assert_eq!(assd(a.view(), b.view(), [1.0; 3]).unwrap(), 3.0);
        assert_eq!(hausdorff(a.view(), a.view(), [1.0; 3]).unwrap(), 0.0);
        let e = Array3::from_elem((1, 1, 5), false);
        assert!(matches!(
            hausdorff(e.view(), a.view(), [1.0; 3]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn rve_examples() {
        let gt = mask((1, 1, 4), &[(0, 0, 0)]);
        let seg = mask((1, 1, 4), &[(0, 0, 0), (0, 0, 1)]);
        assert_eq!(rve(seg.view(), gt.view(), [1.0; 3]).unwrap(), 1.0);
        assert_eq!(rve(gt.view(), gt.view(), [1.0; 3]).unwrap(), 0.0);
        let e = Array3::from_elem((1, 1, 4), false);
        assert_eq!(rve(e.view(), gt.view(), [1.0; 3]).unwrap(), 1.0);
    }

    #[test]
    fn buckets() {
        assert_eq!(SizeBucket::from_cc(5.0), SizeBucket::Small);
        assert_eq!(SizeBucket::from_cc(10.0), SizeBucket::Medium);
        assert_eq!(SizeBucket::from_cc(30.0), SizeBucket::Medium);
        assert_eq!(SizeBucket::from_cc(50.0), SizeBucket::Medium);
        assert_eq!(SizeBucket::from_cc(80.0), SizeBucket::Large);
    }

    #[test]
    fn ssim_and_psnr_examples() {
        let a = Array3::<f32>::zeros((2, 10, 10));
        let b = Array3::<f32>::ones((2, 10, 10));
        assert!(ssim(a.view(), b.view(), None).unwrap() < 1e-3);
        assert!((ssim(b.view(), b.view(), None).unwrap() - 1.0).abs() < 1e-12);
        let h = Array3::<f32>::from_elem((2, 10, 10), 0.5);
        assert!((psnr(a.view(), h.view(), None).unwrap() - 6.020599913).abs() < 1e-6);
        assert_eq!(psnr(a.view(), a.view(), None).unwrap(), PSNR_INFINITE);
    }

    #[test]
    fn local_region_is_dilated_box() {
        let gt = mask((4, 20, 20), &[(1, 8, 9), (2, 10, 12)]);
        let r = local_region(gt.view()).unwrap();
        assert_eq!(r.lo, [0, 3, 4]);
        assert_eq!(r.hi, [3, 15, 17]);
    }

    #[test]
    fn report_csv_has_bucket_rows() {
        let gt = mask((1, 4, 4), &[(0, 1, 1)]);
        let m = evaluate_case(&CaseInputs {
            case_id: "c1",
            seg: gt.view(),
            gt: gt.view(),
            spacing_mm: [1.0; 3],
            synth: None,
            dwi: None,
        })
        .unwrap();
        let rep = MetricsReport::new(vec![m]);
        let csv = rep.to_csv();
        assert!(csv.lines().any(|l| l.starts_with("mean,") && l.ends_with(",small")));
        assert!(rep.to_json().unwrap().contains("\"small\""));
    }
}
