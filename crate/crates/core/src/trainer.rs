//! Training configuration, slice datasets, the training loop (end-to-end
//! and staged) and full-pipeline inference.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::compute_weight_map;
use crate::autograd::{Graph, Real, RmsProp, Tensor, Var, VarStore};
use crate::error::{Error, Result};
use crate::losses::{overall_loss, segmentation_loss, synthesis_loss, LossBreakdown, LossInputs, LossWeights};
use crate::nets::{ArchConfig, Model, ModelBundle, PipelineInputs, Variant, PREFIX_C, PREFIX_E, PREFIX_G, PREFIX_S};
use crate::perfusion::{extract_features, normalize_intensity, CtaSequence};
use crate::volume_io::{load_case, CaseRecord, DatasetSplit};

pub const RMS_DECAY: f64 = 0.99;
pub const RMS_EPS: f64 = 1e-8;
pub const TRAIN_LOG: &str = "train_log.csv";
pub const VAL_LOG: &str = "val_log.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const LAST_CKPT: &str = "last";
pub const BEST_CKPT: &str = "best";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    EndToEnd,
    Staged,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::EndToEnd => "end_to_end",
            TrainMode::Staged => "staged",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "end_to_end" => Ok(TrainMode::EndToEnd),
            "staged" => Ok(TrainMode::Staged),
            _ => Err(Error::Invalid(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Foreground weight of the attention map.
    pub w: f64,
    /// Decay distance of the attention map, in pixels.
    pub d: f64,
    pub c_e: usize,
    pub crop_size: (usize, usize),
    pub seed: u64,
    pub mode: TrainMode,
    pub variant: Variant,
    pub base_ch: usize,
    pub depth: usize,
    /// Run length of the window detector.
    pub window_k: usize,
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 5,
            epochs: 300,
            lr: 0.002,
            lr_decay_epoch: 180,
            lr_decay_factor: 0.2,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.2,
            w: 1.5,
            d: 50.0,
            c_e: 6,
            crop_size: (256, 256),
            seed: 0,
            mode: TrainMode::EndToEnd,
            variant: Variant::PseudoDwiFull,
            base_ch: 32,
            depth: 4,
            window_k: crate::perfusion::DEFAULT_K,
            flip_augment: false,
        }
    }
}

/// Keys of the `key = value` config format, in serialization order.
pub const CONFIG_KEYS: [&str; 19] = [
    "batch_size",
    "epochs",
    "lr",
    "lr_decay_epoch",
    "lr_decay_factor",
    "alpha",
    "beta",
    "gamma",
    "w",
    "D",
    "C_e",
    "crop_size",
    "seed",
    "mode",
    "variant",
    "base_ch",
    "depth",
    "window_k",
    "flip_augment",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Invalid(format!("bad value {v:?} for {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 || self.c_e == 0 || self.base_ch == 0 {
            return bad("batch_size, epochs, C_e and base_ch must be positive");
        }
        if self.lr_decay_epoch == 0 || self.lr_decay_epoch >= self.epochs {
            return bad("lr_decay_epoch must be in [1, epochs)");
        }
        let reals = [self.lr, self.lr_decay_factor, self.alpha, self.beta, self.gamma, self.d];
        if reals.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("lr, lr_decay_factor, alpha, beta, gamma and D must be positive");
        }
        if !(self.w >= 1.0) {
            return bad("w must be at least 1");
        }
        let m = 1usize << self.depth;
        let (h, w) = self.crop_size;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Invalid(format!(
                "crop_size {h}x{w} must be a positive multiple of 2^depth = {m}"
            )));
        }
        if self.window_k == 0 {
            return bad("window_k must be positive");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch > self.lr_decay_epoch {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            variant: self.variant,
            c_e: self.c_e,
            base_ch: self.base_ch,
            depth: self.depth,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta, gamma: self.gamma }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr" => format!("{:?}", self.lr),
            "lr_decay_epoch" => self.lr_decay_epoch.to_string(),
            "lr_decay_factor" => format!("{:?}", self.lr_decay_factor),
            "alpha" => format!("{:?}", self.alpha),
            "beta" => format!("{:?}", self.beta),
            "gamma" => format!("{:?}", self.gamma),
            "w" => format!("{:?}", self.w),
            "D" => format!("{:?}", self.d),
            "C_e" => self.c_e.to_string(),
            "crop_size" => format!("{}x{}", self.crop_size.0, self.crop_size.1),
            "seed" => self.seed.to_string(),
            "mode" => self.mode.to_string(),
            "variant" => self.variant.to_string(),
            "base_ch" => self.base_ch.to_string(),
            "depth" => self.depth.to_string(),
            "window_k" => self.window_k.to_string(),
            "flip_augment" => self.flip_augment.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_decay_epoch" => self.lr_decay_epoch = parse(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "w" => self.w = parse(key, v)?,
            "D" => self.d = parse(key, v)?,
            "C_e" => self.c_e = parse(key, v)?,
            "crop_size" => {
                let (h, w) = v
                    .split_once('x')
                    .ok_or_else(|| Error::Invalid(format!("crop_size must be HxW, got {v:?}")))?;
                self.crop_size = (parse(key, h)?, parse(key, w)?);
            }
            "seed" => self.seed = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "variant" => self.variant = v.parse()?,
            "base_ch" => self.base_ch = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "window_k" => self.window_k = parse(key, v)?,
            "flip_augment" => self.flip_augment = parse(key, v)?,
            _ => return Err(Error::Invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        CONFIG_KEYS
            .iter()
            .map(|k| (k.to_string(), self.get(k).expect("known key")))
            .collect()
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in map {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// `key = value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Centre-pads (zeros, symmetric) or centre-crops a slice to `size`.
pub fn fit_slice(src: ArrayView2<f32>, size: (usize, usize)) -> Array2<f32> {
    let mut out = Array2::zeros(size);
    let (sh, sw) = src.dim();
    let (oh, ow) = size;
    let (src_y, dst_y, ny) = axis_offsets(sh, oh);
    let (src_x, dst_x, nx) = axis_offsets(sw, ow);
    out.slice_mut(s![dst_y..dst_y + ny, dst_x..dst_x + nx])
        .assign(&src.slice(s![src_y..src_y + ny, src_x..src_x + nx]));
    out
}

/// Inverse of [`fit_slice`]: recovers a slice of the original `size`,
/// with zeros where the crop discarded data.
pub fn unfit_slice(src: ArrayView2<f32>, size: (usize, usize)) -> Array2<f32> {
    let mut out = Array2::zeros(size);
    let (fh, fw) = src.dim();
    let (src_y, dst_y, ny) = axis_offsets(size.0, fh);
    let (src_x, dst_x, nx) = axis_offsets(size.1, fw);
    out.slice_mut(s![src_y..src_y + ny, src_x..src_x + nx])
        .assign(&src.slice(s![dst_y..dst_y + ny, dst_x..dst_x + nx]));
    out
}

/// `(start in source, start in target, length)` for fitting `n` into `m`.
fn axis_offsets(n: usize, m: usize) -> (usize, usize, usize) {
    if n <= m {
        (0, (m - n) / 2, n)
    } else {
        ((n - m) / 2, 0, m)
    }
}

/// Normalised volumes of one case, ready for slicing.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub case_id: String,
    pub dims: (usize, usize, usize),
    /// CBF, CBV, MTT, Tmax.
    pub f_o: [Array3<f32>; 4],
    pub f_l: Option<Array3<f32>>,
    /// `(C_e, Z, Y, X)`.
    pub i_star: Option<Array4<f32>>,
    pub dwi: Option<Array3<f32>>,
    pub mask: Option<Array3<f32>>,
}

fn norm3(v: &Array3<f32>) -> Array3<f32> {
    normalize_intensity(v.view()).data
}

/// DWI already in `[0,1]` is used as is; anything else is min/p99 scaled.
fn dwi_target(v: &Array3<f32>) -> Array3<f32> {
    if v.iter().all(|x| (0.0..=1.0).contains(x)) {
        v.clone()
    } else {
        norm3(v)
    }
}

pub fn prepare_case(case: &CaseRecord, cfg: &TrainConfig) -> Result<PreparedCase> {
    case.validate()?;
    let [cbf, cbv, mtt, tmax] = case.perfusion_maps();
    let f_o = [norm3(cbf), norm3(cbv), norm3(mtt), norm3(tmax)];
    let (f_l, i_star) = match &case.cta {
        Some(cta) => {
            let seq = CtaSequence::new(cta.clone(), case.spacing_mm)?;
            let feats = extract_features(&seq, cfg.window_k, cfg.c_e)?;
            if feats.detection.used_fallback() {
                log::warn!("{}: perfusion window fell back to sequence bounds", case.case_id);
            }
            (Some(norm3(&feats.f_l)), Some(normalize_intensity(feats.i_star.view()).data))
        }
        None => (None, None),
    };
    Ok(PreparedCase {
        case_id: case.case_id.clone(),
        dims: case.dims(),
        f_o,
        f_l,
        i_star,
        dwi: case.dwi.as_ref().map(dwi_target),
        mask: case.mask.clone(),
    })
}

/// One training/inference slice; every tensor is `[1,C,H,W]` at the crop size.
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub case_id: String,
    pub z: usize,
    pub f_o: Tensor<f32>,
    pub f_l: Tensor<f32>,
    pub i_star: Tensor<f32>,
    pub i_d: Tensor<f32>,
    /// Background, lesion.
    pub y: Tensor<f32>,
    pub a: Tensor<f32>,
}

fn channels_tensor(chs: &[Array2<f32>]) -> Tensor<f32> {
    let (h, w) = chs[0].dim();
    let mut data = Vec::with_capacity(chs.len() * h * w);
    for c in chs {
        data.extend(c.iter().copied());
    }
    Tensor::from_vec(&[1, chs.len(), h, w], data)
}

fn fitted(v: &Array3<f32>, z: usize, size: (usize, usize)) -> Array2<f32> {
    fit_slice(v.index_axis(Axis(0), z), size)
}

fn missing(case: &PreparedCase, what: &str) -> Error {
    Error::InconsistentCase { case_id: case.case_id.clone(), reason: format!("missing {what}") }
}

/// Inputs of slice `z` without targets; absent inputs become zero tensors.
fn slice_inputs(p: &PreparedCase, z: usize, cfg: &TrainConfig) -> [Tensor<f32>; 4] {
    let size = cfg.crop_size;
    let zero = || Array2::<f32>::zeros(size);
    let f_o: Vec<Array2<f32>> = p.f_o.iter().map(|m| fitted(m, z, size)).collect();
    let f_l = p.f_l.as_ref().map_or_else(zero, |v| fitted(v, z, size));
    let i_star: Vec<Array2<f32>> = match &p.i_star {
        Some(v) => (0..v.dim().0)
            .map(|c| fit_slice(v.slice(s![c, z, .., ..]), size))
            .collect(),
        None => (0..cfg.c_e).map(|_| zero()).collect(),
    };
    let dwi = p.dwi.as_ref().map_or_else(zero, |v| fitted(v, z, size));
    [
        channels_tensor(&f_o),
        channels_tensor(&[f_l]),
        channels_tensor(&i_star),
        channels_tensor(&[dwi]),
    ]
}

/// One sample per axial slice of a case with every member present.
pub fn build_samples(case: &CaseRecord, cfg: &TrainConfig) -> Result<Vec<SliceSample>> {
    let p = prepare_case(case, cfg)?;
    if p.i_star.is_none() {
        return Err(missing(&p, "cta"));
    }
    if p.dwi.is_none() {
        return Err(missing(&p, "dwi"));
    }
    let mask = p.mask.as_ref().ok_or_else(|| missing(&p, "mask"))?;
    let mut out = Vec::with_capacity(p.dims.0);
    for z in 0..p.dims.0 {
        let [f_o, f_l, i_star, i_d] = slice_inputs(&p, z, cfg);
        let m = fitted(mask, z, cfg.crop_size);
        let wm = compute_weight_map(m.view(), cfg.w, cfg.d)?;
        let y = channels_tensor(&[m.mapv(|v| 1.0 - v), m]);
        let a = channels_tensor(&[wm.data.mapv(|v| v as f32)]);
        out.push(SliceSample { case_id: p.case_id.clone(), z, f_o, f_l, i_star, i_d, y, a });
    }
    Ok(out)
}

/// Samples of every listed case under `root`.
pub fn build_dataset(root: &Path, ids: &[String], cfg: &TrainConfig) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for id in ids {
        let case = load_case(&root.join(id))?;
        out.extend(build_samples(&case, cfg)?);
    }
    Ok(out)
}

/// Training and validation samples named by a split file.
pub fn load_split_datasets(
    root: &Path,
    split_file: &Path,
    cfg: &TrainConfig,
) -> Result<(Vec<SliceSample>, Vec<SliceSample>)> {
    let split = DatasetSplit::read(split_file)?;
    Ok((build_dataset(root, &split.train, cfg)?, build_dataset(root, &split.val, cfg)?))
}

// ---------------------------------------------------------------------------
// Training

/// What a step optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Overall objective, every network learns.
    EndToEnd,
    /// `L_e`, extractor only.
    Extractor,
    /// `L_g`, generator and context encoder.
    Generator,
    /// `L_s`, segmenter only.
    Segmenter,
}

impl Phase {
    fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            Phase::EndToEnd => &[PREFIX_E, PREFIX_G, PREFIX_C, PREFIX_S],
            Phase::Extractor => &[PREFIX_E],
            Phase::Generator => &[PREFIX_G, PREFIX_C],
            Phase::Segmenter => &[PREFIX_S],
        }
    }

    pub fn trains_segmenter(self) -> bool {
        matches!(self, Phase::EndToEnd | Phase::Segmenter)
    }
}

/// `(phase, epochs)` in order. Staged training splits the budget in thirds.
pub fn schedule(cfg: &TrainConfig) -> Vec<(Phase, usize)> {
    if cfg.mode == TrainMode::EndToEnd || !cfg.variant.uses_synthesis() {
        return vec![(Phase::EndToEnd, cfg.epochs)];
    }
    let third = cfg.epochs / 3;
    vec![
        (Phase::Extractor, third),
        (Phase::Generator, third),
        (Phase::Segmenter, cfg.epochs - 2 * third),
    ]
}

fn stack<F: Real>(items: &[&Tensor<f32>]) -> Tensor<F> {
    Tensor::stack_batch(items).cast()
}

struct BatchVars {
    inputs: PipelineInputs,
    y: Var,
    a: Var,
    i_d: Var,
}

fn batch_vars<F: Real>(g: &mut Graph<F>, batch: &[&SliceSample]) -> BatchVars {
    let col = |f: fn(&SliceSample) -> &Tensor<f32>| -> Tensor<F> {
        stack(&batch.iter().map(|s| f(s)).collect::<Vec<_>>())
    };
    let f_o = g.constant(col(|s| &s.f_o));
    let f_l = g.constant(col(|s| &s.f_l));
    let i_star = g.constant(col(|s| &s.i_star));
    let i_d = g.constant(col(|s| &s.i_d));
    let y = g.constant(col(|s| &s.y));
    let a = g.constant(col(|s| &s.a));
    BatchVars {
        inputs: PipelineInputs { f_o: Some(f_o), f_l: Some(f_l), i_star: Some(i_star), dwi: Some(i_d) },
        y,
        a,
        i_d,
    }
}

fn scalar<F: Real>(g: &Graph<F>, v: Var) -> f64 {
    g.value(v).item().as_f64()
}

/// Builds the loss of `phase` on a batch; returns the scalar to minimise and its breakdown.
pub fn batch_loss<F: Real>(
    g: &mut Graph<F>,
    model: &Model,
    vs: &VarStore<F>,
    batch: &[&SliceSample],
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let b = batch_vars(g, batch);
    let w = cfg.loss_weights();
    match phase {
        Phase::EndToEnd => {
            let out = model.forward(g, vs, &b.inputs)?;
            let inp = LossInputs { probs: out.probs, y: b.y, a: b.a, i_d: b.i_d, i_g: out.i_g, f_h: out.f_h };
            let terms = overall_loss(g, vs, model.context.as_ref(), &inp, w)?;
            Ok((terms.total, LossBreakdown::from_terms(g, &terms)))
        }
        Phase::Extractor | Phase::Generator => {
            let ctx = model
                .context
                .as_ref()
                .ok_or_else(|| Error::Invalid("staged phase needs the synthesis networks".into()))?;
            let i_star = b.inputs.i_star.expect("batch has I*");
            let f_h = model.extract(g, vs, i_star)?;
            let mut bd = LossBreakdown::default();
            let total = if phase == Phase::Extractor {
                let t = synthesis_loss(g, vs, ctx, f_h, b.i_d, b.a, w.gamma)?;
                bd.l_e = scalar(g, t.total);
                g.mul_scalar(t.total, w.beta)
            } else {
                let (f_o, f_l) = (b.inputs.f_o.expect("F_o"), b.inputs.f_l.expect("F_l"));
                let i_g = model.generate(g, vs, f_o, f_l, f_h)?;
                let t = synthesis_loss(g, vs, ctx, i_g, b.i_d, b.a, w.gamma)?;
                bd.l_l = scalar(g, t.l_l);
                bd.l_h = scalar(g, t.l_h);
                bd.l_g = scalar(g, t.total);
                g.mul_scalar(t.total, w.alpha)
            };
            bd.l_total = scalar(g, total);
            Ok((total, bd))
        }
        Phase::Segmenter => {
            let out = model.forward(g, vs, &b.inputs)?;
            let t = segmentation_loss(g, out.probs, b.y, b.a)?;
            let bd = LossBreakdown {
                l_wce: scalar(g, t.wce),
                l_hgd: scalar(g, t.hgd),
                l_s: scalar(g, t.total),
                l_total: scalar(g, t.total),
                ..Default::default()
            };
            Ok((t.total, bd))
        }
    }
}

/// Freezes every network not trained in `phase`.
pub fn set_phase<F: Real>(vs: &mut VarStore<F>, phase: Phase) {
    for p in [PREFIX_E, PREFIX_G, PREFIX_C, PREFIX_S] {
        vs.set_frozen_prefix(p, !phase.trainable_prefixes().contains(&p));
    }
}

/// One optimiser step on a batch. Running statistics of frozen networks
/// are left untouched.
pub fn train_step<F: Real>(
    model: &Model,
    vs: &mut VarStore<F>,
    opt: &mut RmsProp<F>,
    batch: &[&SliceSample],
    cfg: &TrainConfig,
    phase: Phase,
    step: usize,
) -> Result<LossBreakdown> {
    let mut g = Graph::new(true);
    let (loss, bd) = batch_loss(&mut g, model, vs, batch, cfg, phase)?;
    if !bd.is_finite() {
        return Err(Error::Diverged { step, detail: format!("non-finite loss {bd:?}") });
    }
    let grads = g.backward(loss);
    let pg = g.param_grads(&grads);
    opt.step(vs, &pg);
    for (id, v) in g.take_buffer_updates() {
        if !vs.is_frozen(id) {
            vs.set(id, v);
        }
    }
    if !vs.all_finite() {
        return Err(Error::Diverged { step, detail: "non-finite parameters after update".into() });
    }
    Ok(bd)
}

fn flip_w(t: &Tensor<f32>) -> Tensor<f32> {
    let (n, c, h, w) = t.dims4();
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for r in 0..n * c * h {
        for x in 0..w {
            out[r * w + x] = d[r * w + (w - 1 - x)];
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

fn flipped(s: &SliceSample) -> SliceSample {
    SliceSample {
        case_id: s.case_id.clone(),
        z: s.z,
        f_o: flip_w(&s.f_o),
        f_l: flip_w(&s.f_l),
        i_star: flip_w(&s.i_star),
        i_d: flip_w(&s.i_d),
        y: flip_w(&s.y),
        a: flip_w(&s.a),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation Dice (the last one without validation data).
    pub best: ModelBundle,
    pub last: ModelBundle,
    pub best_epoch: usize,
    pub log: Vec<StepLog>,
    /// `(epoch, validation Dice)`.
    pub val_dice: Vec<(usize, f64)>,
}

struct LogFiles {
    train: BufWriter<File>,
    val: BufWriter<File>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_line(w: &mut BufWriter<File>, line: &str, path: &Path) -> Result<()> {
    writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Trains a fresh model. With `out`, writes the config, CSV logs and the
/// `last`/`best` checkpoints (refreshed every epoch).
pub fn train(
    cfg: &TrainConfig,
    train_set: &[SliceSample],
    val_set: &[SliceSample],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let mut bundle = ModelBundle::init(cfg.arch(), cfg.seed);
    bundle.hyperparams = cfg.to_map();
    let mut opt = RmsProp::new(cfg.lr, RMS_DECAY, RMS_EPS);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1_5EED);

    let mut files = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cpath = dir.join(CONFIG_FILE);
            fs::write(&cpath, cfg.to_text()).map_err(|e| Error::io(&cpath, e))?;
            let mut f = LogFiles { train: create(&dir.join(TRAIN_LOG))?, val: create(&dir.join(VAL_LOG))? };
            write_line(&mut f.train, LossBreakdown::CSV_HEADER, &dir.join(TRAIN_LOG))?;
            write_line(&mut f.val, "epoch,lr,val_dice", &dir.join(VAL_LOG))?;
            Some(f)
        }
        None => None,
    };

    let mut log = Vec::new();
    let mut val_dice = Vec::new();
    let mut best: Option<(f64, usize, ModelBundle)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    let mut epoch = 0;
    for (phase, n_epochs) in schedule(cfg) {
        set_phase(&mut bundle.store, phase);
        for _ in 0..n_epochs {
            epoch += 1;
            opt.lr = cfg.lr_at(epoch);
            order.shuffle(&mut rng);
            let mut sums = [0.0; 8];
            let mut n_steps = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let owned: Vec<SliceSample>;
                let batch: Vec<&SliceSample> = if cfg.flip_augment {
                    owned = chunk
                        .iter()
                        .map(|&i| if rng.random_bool(0.5) { flipped(&train_set[i]) } else { train_set[i].clone() })
                        .collect();
                    owned.iter().collect()
                } else {
                    chunk.iter().map(|&i| &train_set[i]).collect()
                };
                step += 1;
                let bd = train_step(&bundle.model, &mut bundle.store, &mut opt, &batch, cfg, phase, step)?;
                for (s, v) in sums.iter_mut().zip(bd.fields()) {
                    *s += v;
                }
                n_steps += 1;
                if let (Some(f), Some(dir)) = (files.as_mut(), out) {
                    write_line(&mut f.train, &bd.csv_row(step, epoch), &dir.join(TRAIN_LOG))?;
                }
                log.push(StepLog { step, epoch, loss: bd });
            }
            bundle.epoch = epoch;
            bundle.optimizer = Some(opt.clone());
            bundle.losses = ["l_l", "l_h", "L_g", "L_e", "L_WCE", "L_HGD", "L_s", "L_total"]
                .iter()
                .zip(sums)
                .map(|(k, s)| (k.to_string(), s / n_steps as f64))
                .collect();

            let dice = (!val_set.is_empty() && phase.trains_segmenter())
                .then(|| dataset_dice(&bundle, val_set, cfg.batch_size))
                .transpose()?;
            if let Some(d) = dice {
                bundle.losses.insert("val_dice".into(), d);
                val_dice.push((epoch, d));
                log::info!("epoch {epoch}: L_total {:.4}, val Dice {d:.4}", sums[7] / n_steps as f64);
            } else {
                log::info!("epoch {epoch}: L_total {:.4}", sums[7] / n_steps as f64);
            }
            let improved = match (&best, dice) {
                (_, None) => val_set.is_empty() || !phase.trains_segmenter(),
                (None, Some(_)) => true,
                (Some((b, ..)), Some(d)) => d > *b,
            };
            if improved {
                best = Some((dice.unwrap_or(f64::NEG_INFINITY), epoch, bundle.clone()));
            }
            if let (Some(f), Some(dir)) = (files.as_mut(), out) {
                let row = format!("{epoch},{},{}", opt.lr, dice.map_or(String::new(), |d| d.to_string()));
                write_line(&mut f.val, &row, &dir.join(VAL_LOG))?;
                bundle.save(&dir.join(LAST_CKPT))?;
                if improved {
                    bundle.save(&dir.join(BEST_CKPT))?;
                }
            }
        }
    }
    bundle.store.unfreeze_all();
    let (_, best_epoch, mut best) = best.expect("at least one epoch");
    best.store.unfreeze_all();
    Ok(TrainOutcome { best, last: bundle, best_epoch, log, val_dice })
}

// ---------------------------------------------------------------------------
// Inference

/// Eval-mode forward of a batch; returns `(pseudo DWI, lesion probability)` per sample.
fn infer_batch(bundle: &ModelBundle, batch: &[&SliceSample]) -> Result<Vec<(Option<Array2<f32>>, Array2<f32>)>> {
    let mut g = Graph::<f32>::new(false);
    let b = batch_vars(&mut g, batch);
    let out = bundle.model.forward(&mut g, &bundle.store, &b.inputs)?;
    let probs = g.value(out.probs);
    let (n, _, h, w) = probs.dims4();
    let plane = h * w;
    let res = (0..n)
        .map(|i| {
            let fg = Array2::from_shape_vec((h, w), probs.data()[(2 * i + 1) * plane..(2 * i + 2) * plane].to_vec())
                .expect("plane");
            let ig = out.i_g.map(|v| {
                let t = g.value(v);
                Array2::from_shape_vec((h, w), t.data()[i * plane..(i + 1) * plane].to_vec()).expect("plane")
            });
            (ig, fg)
        })
        .collect();
    Ok(res)
}

/// Mean over cases of the Dice between argmax predictions and labels.
/// A case with empty prediction and empty label counts as 1.
pub fn dataset_dice(bundle: &ModelBundle, samples: &[SliceSample], batch_size: usize) -> Result<f64> {
    let mut per_case: BTreeMap<&str, (f64, f64, f64)> = BTreeMap::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        for (s, (_, p)) in chunk.iter().zip(infer_batch(bundle, &refs)?) {
            let plane = p.len();
            let y = &s.y.data()[plane..2 * plane];
            let e = per_case.entry(&s.case_id).or_default();
            for (&pv, &yv) in p.iter().zip(y) {
                let pb = (pv > 0.5) as u8 as f64;
                let yb = (yv > 0.5) as u8 as f64;
                e.0 += pb * yb;
                e.1 += pb;
                e.2 += yb;
            }
        }
    }
    if per_case.is_empty() {
        return Err(Error::Invalid("no samples to score".into()));
    }
    let total: f64 = per_case
        .values()
        .map(|&(i, p, y)| if p + y == 0.0 { 1.0 } else { 2.0 * i / (p + y) })
        .sum();
    Ok(total / per_case.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Synthesised DWI, for pipelines that generate one.
    pub pseudo_dwi: Option<Array3<f32>>,
    /// Binary lesion mask.
    pub seg: Array3<f32>,
}

/// Training configuration recorded in a bundle (defaults where absent).
pub fn bundle_config(bundle: &ModelBundle) -> Result<TrainConfig> {
    let mut cfg = if bundle.hyperparams.is_empty() {
        TrainConfig::default()
    } else {
        TrainConfig::from_map(&bundle.hyperparams)?
    };
    let arch = bundle.arch();
    cfg.variant = arch.variant;
    cfg.c_e = arch.c_e;
    cfg.base_ch = arch.base_ch;
    cfg.depth = arch.depth;
    Ok(cfg)
}

/// Full-pipeline inference on every slice of a case, in evaluation mode.
pub fn predict(bundle: &ModelBundle, case: &CaseRecord) -> Result<Prediction> {
    let cfg = bundle_config(bundle)?;
    let variant = cfg.variant;
    if matches!(variant, Variant::CtaOnly | Variant::PseudoDwiFull | Variant::FoPlusPseudo) && case.cta.is_none() {
        return Err(Error::MissingMember { dir: case.case_id.clone().into(), member: "cta".into() });
    }
    if variant == Variant::RealDwi && case.dwi.is_none() {
        return Err(Error::MissingMember { dir: case.case_id.clone().into(), member: "dwi".into() });
    }
    let p = prepare_case(case, &cfg)?;
    let (nz, ny, nx) = p.dims;
    let zero_y = Tensor::zeros(&[1, 2, cfg.crop_size.0, cfg.crop_size.1]);
    let samples: Vec<SliceSample> = (0..nz)
        .map(|z| {
            let [f_o, f_l, i_star, i_d] = slice_inputs(&p, z, &cfg);
            SliceSample {
                case_id: p.case_id.clone(),
                z,
                f_o,
                f_l,
                i_star,
                i_d,
                y: zero_y.clone(),
                a: Tensor::zeros(&[1, 1, cfg.crop_size.0, cfg.crop_size.1]),
            }
        })
        .collect();
    let mut seg = Array3::zeros((nz, ny, nx));
    let mut pseudo = variant.uses_synthesis().then(|| Array3::zeros((nz, ny, nx)));
    for chunk in samples.chunks(cfg.batch_size) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        for (s, (ig, prob)) in chunk.iter().zip(infer_batch(bundle, &refs)?) {
            let mask = prob.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
            seg.index_axis_mut(Axis(0), s.z).assign(&unfit_slice(mask.view(), (ny, nx)));
            if let (Some(vol), Some(ig)) = (pseudo.as_mut(), ig) {
                vol.index_axis_mut(Axis(0), s.z).assign(&unfit_slice(ig.view(), (ny, nx)));
            }
        }
    }
    Ok(Prediction { pseudo_dwi: pseudo, seg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn lr_schedule_steps_after_decay_epoch() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(1), 0.002);
        assert_eq!(c.lr_at(180), 0.002);
        assert!((c.lr_at(181) - 0.0004).abs() < 1e-15);
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = TrainConfig::default();
        c.set("crop_size", "64x32").unwrap();
        c.set("mode", "staged").unwrap();
        c.set("variant", "f_o_only").unwrap();
        c.depth = 3;
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(TrainConfig::from_text("nope = 1").is_err());
        assert!(TrainConfig::from_text("epochs = 100\nlr_decay_epoch = 100").is_err());
        assert!(TrainConfig::from_text("crop_size = 100x100").is_err());
    }

    #[test]
    fn fit_and_unfit_are_inverse_on_the_kept_region() {
        let a = array![[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let padded = fit_slice(a.view(), (4, 5));
        assert_eq!(padded.row(0).sum(), 0.0);
        assert_eq!(padded[[1, 1]], 1.0);
        assert_eq!(unfit_slice(padded.view(), (2, 3)), a);
        let cropped = fit_slice(a.view(), (2, 1));
        assert_eq!(cropped, array![[2.0], [5.0]]);
        assert_eq!(unfit_slice(cropped.view(), (2, 3)), array![[0.0, 2.0, 0.0], [0.0, 5.0, 0.0]]);
    }

    #[test]
    fn staged_schedule_splits_in_thirds() {
        let c = TrainConfig { mode: TrainMode::Staged, epochs: 10, lr_decay_epoch: 5, ..Default::default() };
        assert_eq!(
            schedule(&c),
            vec![(Phase::Extractor, 3), (Phase::Generator, 3), (Phase::Segmenter, 4)]
        );
        let c = TrainConfig { variant: Variant::FoOnly, ..c };
        assert_eq!(schedule(&c), vec![(Phase::EndToEnd, 10)]);
    }
}
