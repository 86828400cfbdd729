//! Two-file volume container (`<name>.json` header + `<name>.raw` payload),
//! case-directory layout and dataset split files.
//!
//! Payloads are C-order little-endian IEEE-754 float32 with axis order
//! `[T,]Z,Y,X`. Masks are stored as float32 0/1.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "float32")]
    Float32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ByteOrder {
    #[serde(rename = "little-endian")]
    LittleEndian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: Vec<usize>,
    pub spacing_mm: [f64; 3],
    pub dtype: Dtype,
    pub byte_order: ByteOrder,
}

impl VolumeHeader {
    pub fn new(dims: &[usize], spacing_mm: [f64; 3]) -> Self {
        Self {
            dims: dims.to_vec(),
            spacing_mm,
            dtype: Dtype::Float32,
            byte_order: ByteOrder::LittleEndian,
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn payload_bytes(&self) -> usize {
        self.numel() * 4
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.dims.len() != 3 && self.dims.len() != 4 {
            return Err(format!("dims must have length 3 or 4, got {}", self.dims.len()));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(format!("all dims must be >= 1, got {:?}", self.dims));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(format!("spacing must be positive, got {:?}", self.spacing_mm));
        }
        Ok(())
    }
}

/// Accepts `dir/name`, `dir/name.json` or `dir/name.raw` and returns both file paths.
pub fn bundle_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (PathBuf::from(json), PathBuf::from(raw))
}

pub fn bundle_exists(path: &Path) -> bool {
    let (json, raw) = bundle_paths(path);
    json.is_file() && raw.is_file()
}

fn parse_header(json_path: &Path, text: &str) -> Result<VolumeHeader> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::MalformedHeader {
            path: json_path.to_path_buf(),
            reason: e.to_string(),
        })?;
    if let Some(dtype) = value.get("dtype").and_then(|d| d.as_str()) {
        if dtype != "float32" {
            return Err(Error::UnsupportedDtype(dtype.to_string()));
        }
    }
    let header: VolumeHeader =
        serde_json::from_value(value).map_err(|e| Error::MalformedHeader {
            path: json_path.to_path_buf(),
            reason: e.to_string(),
        })?;
    Ok(header)
}

fn check_header(json_path: &Path, header: &VolumeHeader) -> Result<()> {
    header.validate().map_err(|reason| Error::MalformedHeader {
        path: json_path.to_path_buf(),
        reason,
    })
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let (json_path, _) = bundle_paths(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header = parse_header(&json_path, &text)?;
    check_header(&json_path, &header)?;
    Ok(header)
}

/// Reads a header + payload pair. The returned array has the header's dims.
pub fn read_volume(path: &Path) -> Result<(VolumeHeader, ArrayD<f32>)> {
    let (json_path, raw_path) = bundle_paths(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header = parse_header(&json_path, &text)?;
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if bytes.len() != header.payload_bytes() {
        return Err(Error::PayloadSize {
            path: raw_path,
            expected: header.payload_bytes(),
            found: bytes.len(),
        });
    }
    check_header(&json_path, &header)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let array = ArrayD::from_shape_vec(IxDyn(&header.dims), data)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((header, array))
}

/// Writes `<path>.json` and `<path>.raw`. Non-finite values are rejected.
pub fn write_volume(path: &Path, header: &VolumeHeader, data: &ArrayD<f32>) -> Result<()> {
    header.validate().map_err(Error::Invalid)?;
    if data.shape() != header.dims.as_slice() {
        return Err(Error::Shape(format!(
            "data shape {:?} does not match header dims {:?}",
            data.shape(),
            header.dims
        )));
    }
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!(
            "non-finite value at flat index {pos} in {}",
            path.display()
        )));
    }
    let (json_path, raw_path) = bundle_paths(path);
    let mut bytes = Vec::with_capacity(header.payload_bytes());
    // iter() walks logical order, so non-standard layouts still serialize as C-order
    for v in data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let text = serde_json::to_string_pretty(header)?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

pub fn write_array3(path: &Path, data: &Array3<f32>, spacing_mm: [f64; 3]) -> Result<()> {
    let header = VolumeHeader::new(data.shape(), spacing_mm);
    write_volume(path, &header, &data.clone().into_dyn())
}

pub fn write_array4(path: &Path, data: &Array4<f32>, spacing_mm: [f64; 3]) -> Result<()> {
    let header = VolumeHeader::new(data.shape(), spacing_mm);
    write_volume(path, &header, &data.clone().into_dyn())
}

pub fn read_array3(path: &Path) -> Result<(VolumeHeader, Array3<f32>)> {
    let (header, data) = read_volume(path)?;
    let data = data.into_dimensionality().map_err(|_| {
        Error::Shape(format!(
            "{} must be 3-D, header dims {:?}",
            path.display(),
            header.dims
        ))
    })?;
    Ok((header, data))
}

pub fn read_array4(path: &Path) -> Result<(VolumeHeader, Array4<f32>)> {
    let (header, data) = read_volume(path)?;
    let data = data.into_dimensionality().map_err(|_| {
        Error::Shape(format!(
            "{} must be 4-D, header dims {:?}",
            path.display(),
            header.dims
        ))
    })?;
    Ok((header, data))
}

/// One patient case. Perfusion maps are `(Z,Y,X)`; `cta` is `(T,Z,Y,X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub cta: Option<Array4<f32>>,
    pub cbf: Array3<f32>,
    pub cbv: Array3<f32>,
    pub mtt: Array3<f32>,
    pub tmax: Array3<f32>,
    pub dwi: Option<Array3<f32>>,
    pub mask: Option<Array3<f32>>,
    pub spacing_mm: [f64; 3],
}

pub const PERFUSION_MAPS: [&str; 4] = ["cbf", "cbv", "mtt", "tmax"];

impl CaseRecord {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.cbf.dim()
    }

    /// Perfusion maps in the fixed channel order CBF, CBV, MTT, Tmax.
    pub fn perfusion_maps(&self) -> [&Array3<f32>; 4] {
        [&self.cbf, &self.cbv, &self.mtt, &self.tmax]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InconsistentCase {
            case_id: self.case_id.clone(),
            reason,
        };
        let dims = self.cbf.dim();
        for (name, map) in PERFUSION_MAPS.iter().zip(self.perfusion_maps()) {
            if map.dim() != dims {
                return Err(fail(format!("{name} dims {:?} differ from cbf {:?}", map.dim(), dims)));
            }
        }
        if let Some(dwi) = &self.dwi {
            if dwi.dim() != dims {
                return Err(fail(format!("dwi dims {:?} differ from cbf {:?}", dwi.dim(), dims)));
            }
        }
        if let Some(mask) = &self.mask {
            if mask.dim() != dims {
                return Err(fail(format!("mask dims {:?} differ from cbf {:?}", mask.dim(), dims)));
            }
            if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(fail("mask contains values other than 0 and 1".into()));
            }
        }
        if let Some(cta) = &self.cta {
            let (t, z, y, x) = cta.dim();
            if (z, y, x) != dims {
                return Err(fail(format!("cta spatial dims {:?} differ from cbf {:?}", (z, y, x), dims)));
            }
            if t < 2 {
                return Err(fail(format!("cta needs at least 2 time points, got {t}")));
            }
            if cta.iter().any(|v| !v.is_finite()) {
                return Err(fail("cta contains non-finite values".into()));
            }
        }
        Ok(())
    }
}

fn spacing_matches(a: [f64; 3], b: [f64; 3]) -> bool {
    a.iter()
        .zip(b.iter())
        .all(|(x, y)| (x - y).abs() <= 1e-6 * x.abs().max(y.abs()))
}

/// Loads a case directory holding `cbf`, `cbv`, `mtt`, `tmax` and optionally
/// `cta4d`, `dwi`, `mask` bundles.
pub fn load_case(dir: &Path) -> Result<CaseRecord> {
    let case_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("case")
        .to_string();
    let mut spacing: Option<[f64; 3]> = None;
    let mut check_spacing = |name: &str, header: &VolumeHeader| -> Result<()> {
        match spacing {
            None => {
                spacing = Some(header.spacing_mm);
                Ok(())
            }
            Some(s) if spacing_matches(s, header.spacing_mm) => Ok(()),
            Some(s) => Err(Error::InconsistentCase {
                case_id: case_id.clone(),
                reason: format!("{name} spacing {:?} differs from {:?}", header.spacing_mm, s),
            }),
        }
    };

    let mut maps = Vec::with_capacity(4);
    for name in PERFUSION_MAPS {
        let path = dir.join(name);
        if !bundle_exists(&path) {
            return Err(Error::MissingMember {
                dir: dir.to_path_buf(),
                member: name.to_string(),
            });
        }
        let (header, data) = read_array3(&path)?;
        check_spacing(name, &header)?;
        maps.push(data);
    }
    let mut optional3 = |name: &str| -> Result<Option<Array3<f32>>> {
        let path = dir.join(name);
        if !bundle_exists(&path) {
            return Ok(None);
        }
        let (header, data) = read_array3(&path)?;
        check_spacing(name, &header)?;
        Ok(Some(data))
    };
    let dwi = optional3("dwi")?;
    let mask = optional3("mask")?;
    let cta_path = dir.join("cta4d");
    let cta = if bundle_exists(&cta_path) {
        let (header, data) = read_array4(&cta_path)?;
        check_spacing("cta4d", &header)?;
        Some(data)
    } else {
        None
    };

    let mut it = maps.into_iter();
    let record = CaseRecord {
        case_id,
        cta,
        cbf: it.next().unwrap(),
        cbv: it.next().unwrap(),
        mtt: it.next().unwrap(),
        tmax: it.next().unwrap(),
        dwi,
        mask,
        spacing_mm: spacing.unwrap_or([1.0; 3]),
    };
    record.validate()?;
    Ok(record)
}

/// Writes every present member of `case` into `dir` (created if needed).
pub fn save_case(dir: &Path, case: &CaseRecord) -> Result<()> {
    case.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, map) in PERFUSION_MAPS.iter().zip(case.perfusion_maps()) {
        write_array3(&dir.join(name), map, case.spacing_mm)?;
    }
    if let Some(dwi) = &case.dwi {
        write_array3(&dir.join("dwi"), dwi, case.spacing_mm)?;
    }
    if let Some(mask) = &case.mask {
        write_array3(&dir.join("mask"), mask, case.spacing_mm)?;
    }
    if let Some(cta) = &case.cta {
        write_array4(&dir.join("cta4d"), cta, case.spacing_mm)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    /// Parses lines of the form `<train|val|test> <case_id>`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut split = DatasetSplit::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(kind), Some(id), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Invalid(format!(
                    "split file line {}: expected '<train|val|test> <case_id>'",
                    lineno + 1
                )));
            };
            let bucket = match kind {
                "train" => &mut split.train,
                "val" => &mut split.val,
                "test" => &mut split.test,
                other => {
                    return Err(Error::Invalid(format!(
                        "split file line {}: unknown split '{other}'",
                        lineno + 1
                    )))
                }
            };
            bucket.push(id.to_string());
        }
        Ok(split)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (kind, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for id in ids {
                out.push_str(kind);
                out.push(' ');
                out.push_str(id);
                out.push('\n');
            }
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Case directories directly under `root` that contain a `cbf` bundle, sorted by name.
pub fn list_cases(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() && bundle_exists(&entry.path().join("cbf")) {
            if let Some(name) = entry.file_name().to_str() {
                ids.push(name.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn reads_c_order_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v");
        let header = VolumeHeader::new(&[2, 2, 2], [1.0, 1.0, 1.0]);
        fs::write(dir.path().join("v.json"), serde_json::to_string(&header).unwrap()).unwrap();
        let bytes: Vec<u8> = (0..8).flat_map(|i| (i as f32).to_le_bytes()).collect();
        assert_eq!(bytes.len(), 32);
        fs::write(dir.path().join("v.raw"), bytes).unwrap();
        let (h, data) = read_volume(&path).unwrap();
        assert_eq!(h.dims, vec![2, 2, 2]);
        assert_eq!(data.len(), 8);
        assert_eq!(data[[0, 1, 1]], 3.0);
        assert_eq!(data[[1, 0, 1]], 5.0);
    }

    #[test]
    fn size_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("v.json"),
            r#"{"dims":[2,2],"spacing_mm":[1,1,1],"dtype":"float32","byte_order":"little-endian"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("v.raw"), vec![0u8; 32]).unwrap();
        assert!(matches!(
            read_volume(&dir.path().join("v")),
            Err(Error::PayloadSize { expected: 16, found: 32, .. })
        ));
        fs::write(
            dir.path().join("w.json"),
            r#"{"dims":[1,2,2],"spacing_mm":[1,1,1],"dtype":"float32","byte_order":"little-endian"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("w.raw"), vec![0u8; 32]).unwrap();
        match read_volume(&dir.path().join("w")) {
            Err(Error::PayloadSize { expected, found, .. }) => {
                assert_eq!(expected, 16);
                assert_eq!(found, 32);
            }
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_dtype() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("v.json"),
            r#"{"dims":[1,1,1],"spacing_mm":[1,1,1],"dtype":"int16","byte_order":"little-endian"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("v.raw"), vec![0u8; 2]).unwrap();
        assert!(matches!(
            read_volume(&dir.path().join("v")),
            Err(Error::UnsupportedDtype(_))
        ));
    }

    #[test]
    fn malformed_header() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("v.json"), "{not json").unwrap();
        fs::write(dir.path().join("v.raw"), vec![0u8; 4]).unwrap();
        assert!(matches!(
            read_volume(&dir.path().join("v")),
            Err(Error::MalformedHeader { .. })
        ));
    }

    #[test]
    fn zero_volume_payload() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array::<f32, _>::zeros((1, 4, 4));
        write_array3(&dir.path().join("z"), &data, [1.0, 1.0, 1.0]).unwrap();
        let raw = fs::read(dir.path().join("z.raw")).unwrap();
        assert_eq!(raw.len(), 64);
        assert!(raw.iter().all(|&b| b == 0));
    }

    #[test]
    fn nan_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = Array::<f32, _>::zeros((1, 2, 2));
        data[[0, 1, 0]] = f32::NAN;
        let err = write_array3(&dir.path().join("n"), &data, [1.0, 1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn unwritable_path() {
        let data = Array::<f32, _>::zeros((1, 2, 2));
        let err = write_array3(Path::new("/nonexistent-dir/x/v"), &data, [1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    fn small_case(id: &str) -> CaseRecord {
        let m = Array3::<f32>::from_shape_fn((2, 3, 4), |(z, y, x)| (z + y + x) as f32);
        CaseRecord {
            case_id: id.into(),
            cta: None,
            cbf: m.clone(),
            cbv: m.clone(),
            mtt: m.clone(),
            tmax: m,
            dwi: None,
            mask: None,
            spacing_mm: [5.0, 0.9, 0.9],
        }
    }

    #[test]
    fn four_map_case_has_absent_optionals() {
        let dir = tempfile::tempdir().unwrap();
        let case_dir = dir.path().join("c1");
        save_case(&case_dir, &small_case("c1")).unwrap();
        let loaded = load_case(&case_dir).unwrap();
        assert_eq!(loaded.case_id, "c1");
        assert!(loaded.cta.is_none() && loaded.dwi.is_none() && loaded.mask.is_none());
        assert_eq!(loaded.spacing_mm, [5.0, 0.9, 0.9]);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let case_dir = dir.path().join("c2");
        save_case(&case_dir, &small_case("c2")).unwrap();
        write_array3(&case_dir.join("mtt"), &Array3::zeros((2, 3, 5)), [5.0, 0.9, 0.9]).unwrap();
        assert!(matches!(
            load_case(&case_dir),
            Err(Error::InconsistentCase { .. })
        ));
    }

    #[test]
    fn missing_map_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let case_dir = dir.path().join("c3");
        save_case(&case_dir, &small_case("c3")).unwrap();
        fs::remove_file(case_dir.join("tmax.raw")).unwrap();
        assert!(matches!(load_case(&case_dir), Err(Error::MissingMember { .. })));
    }

    #[test]
    fn non_binary_mask_rejected() {
        let mut case = small_case("c4");
        let mut mask = Array3::zeros((2, 3, 4));
        mask[[0, 0, 0]] = 0.5;
        case.mask = Some(mask);
        assert!(case.validate().is_err());
    }

    #[test]
    fn split_file_round_trip() {
        let split = DatasetSplit {
            train: vec!["a".into(), "b".into()],
            val: vec!["c".into()],
            test: vec!["d".into()],
        };
        assert_eq!(DatasetSplit::parse(&split.to_text()).unwrap(), split);
        assert!(DatasetSplit::parse("holdout x\n").is_err());
        assert!(DatasetSplit::parse("# comment\n\ntrain a # trailing\n").is_ok());
    }
}
