//! Command-line entry point. Exit codes: 0 success, 1 invalid input, 2 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Axis;
use serde::Serialize;

use crate::attention::compute_weight_map;
use crate::error::{Error, Result};
use crate::metrics::{binarize, evaluate_case, CaseInputs, MetricsReport};
use crate::nets::ModelBundle;
use crate::perfusion::{extract_features, CtaSequence, DEFAULT_CE, DEFAULT_K};
use crate::phantom::{generate_corpus, PhantomSpec};
use crate::trainer::{self, TrainConfig};
use crate::volume_io::{bundle_exists, load_case, read_array3, write_array3, write_array4, DatasetSplit};

pub const SEG_FILE: &str = "seg";
pub const PSEUDO_DWI_FILE: &str = "pseudo_dwi";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const WINDOW_JSON: &str = "window.json";

#[derive(Debug, Parser)]
#[command(name = "ctpseg", version, about = "Stroke lesion segmentation from CT perfusion via pseudo-DWI synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic perfusion corpus with a train/val/test split.
    GenPhantom(GenPhantomArgs),
    /// Extract F_l and I* from one case.
    Preprocess(PreprocessArgs),
    /// Train a model on a dataset split.
    Train(TrainArgs),
    /// Run the full pipeline on one case, or on every test case of a split.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct GenPhantomArgs {
    /// Number of cases (at least 3).
    #[arg(long)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset root to write.
    #[arg(long)]
    out: PathBuf,
    /// Volume size as ZxYxX.
    #[arg(long, default_value = "12x128x128")]
    dims: String,
    /// Voxel spacing in mm as z,y,x.
    #[arg(long, default_value = "5,1.5,1.5")]
    spacing: String,
    #[arg(long, default_value_t = 48)]
    timepoints: usize,
    #[arg(long, default_value_t = 1)]
    lesions: usize,
    /// Lesion radius range in in-plane voxels, as lo,hi.
    #[arg(long, default_value = "4,14")]
    radius: String,
    #[arg(long, default_value_t = 2.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.4)]
    cbf_scale: f64,
    /// Lesion onset delay in frames.
    #[arg(long, default_value_t = 4.0)]
    delay: f64,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// Case directory.
    #[arg(long)]
    case: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run length of the perfusion window detector.
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// Channels of I*.
    #[arg(long = "c-e", default_value_t = DEFAULT_CE)]
    c_e: usize,
    /// Also write the attention weight map A (needs a mask).
    #[arg(long)]
    weight_map: bool,
    #[arg(long, default_value_t = 1.5)]
    w: f64,
    #[arg(long = "d", default_value_t = 50.0)]
    d: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// key = value file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Split file (defaults to <data>/split.txt).
    #[arg(long)]
    split: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hp: Hyper,
}

/// Hyperparameter overrides; unset flags keep the config-file or default value.
#[derive(Debug, Args)]
struct Hyper {
    /// Batch size [default: 5]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epochs [default: 300]
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate [default: 0.002]
    #[arg(long)]
    lr: Option<f64>,
    /// Epoch after which the learning rate is decayed [default: 180]
    #[arg(long)]
    lr_decay_epoch: Option<usize>,
    /// Learning-rate decay factor [default: 0.2]
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    /// Weight of the synthesis loss L_g [default: 1.0]
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the extractor loss L_e [default: 1.0]
    #[arg(long)]
    beta: Option<f64>,
    /// Weight of the contextual term inside L_g and L_e [default: 1.2]
    #[arg(long)]
    gamma: Option<f64>,
    /// Attention weight on lesion pixels [default: 1.5]
    #[arg(long)]
    w: Option<f64>,
    /// Attention decay distance in pixels [default: 50]
    #[arg(long = "d")]
    d: Option<f64>,
    /// Channels of the down-sampled CTA I* [default: 6]
    #[arg(long = "c-e")]
    c_e: Option<usize>,
    /// Crop size HxW [default: 256x256]
    #[arg(long)]
    crop_size: Option<String>,
    /// Random seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// end_to_end or staged [default: end_to_end]
    #[arg(long)]
    mode: Option<String>,
    /// cta_only, f_o_only, pseudo_dwi_full, f_o_plus_pseudo or real_dwi [default: pseudo_dwi_full]
    #[arg(long)]
    variant: Option<String>,
    /// Channels of the first UNet level [default: 32]
    #[arg(long)]
    base_ch: Option<usize>,
    /// Pooling steps per UNet [default: 4]
    #[arg(long)]
    depth: Option<usize>,
    /// Run length of the perfusion window detector [default: 5]
    #[arg(long)]
    window_k: Option<usize>,
    /// Random horizontal flips [default: false]
    #[arg(long)]
    flip_augment: Option<bool>,
}

impl Hyper {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        macro_rules! put {
            ($($field:ident => $key:literal),* $(,)?) => {
                $(if let Some(x) = &self.$field { v.push(($key, x.to_string())); })*
            };
        }
        put!(
            batch_size => "batch_size", epochs => "epochs", lr => "lr",
            lr_decay_epoch => "lr_decay_epoch", lr_decay_factor => "lr_decay_factor",
            alpha => "alpha", beta => "beta", gamma => "gamma", w => "w", d => "D",
            c_e => "C_e", crop_size => "crop_size", seed => "seed", mode => "mode",
            variant => "variant", base_ch => "base_ch", depth => "depth",
            window_k => "window_k", flip_augment => "flip_augment",
        );
        v
    }
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    /// Single case directory.
    #[arg(long, conflicts_with = "data")]
    case: Option<PathBuf>,
    /// Dataset root; predicts every test case of the split.
    #[arg(long, requires = "split")]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Prediction directory (one case) or root of per-case prediction directories.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth case directory or dataset root.
    #[arg(long)]
    gt: PathBuf,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_list<T: std::str::FromStr>(s: &str, sep: char, n: usize, what: &str) -> Result<Vec<T>> {
    let v: Vec<T> = s
        .split(sep)
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Invalid(format!("bad {what} {s:?}")))?;
    if v.len() != n {
        return Err(Error::Invalid(format!("{what} needs {n} values, got {s:?}")));
    }
    Ok(v)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

fn gen_phantom(a: &GenPhantomArgs) -> Result<()> {
    let dims: Vec<usize> = parse_list(&a.dims, 'x', 3, "dims")?;
    let spacing: Vec<f64> = parse_list(&a.spacing, ',', 3, "spacing")?;
    let radius: Vec<f64> = parse_list(&a.radius, ',', 2, "radius")?;
    let spec = PhantomSpec {
        dims: [dims[0], dims[1], dims[2]],
        spacing_mm: [spacing[0], spacing[1], spacing[2]],
        time_points: a.timepoints,
        n_lesions: a.lesions,
        lesion_radius_range: (radius[0], radius[1]),
        noise_sigma: a.noise,
        cbf_scale: a.cbf_scale,
        delay_shift: a.delay,
        seed: a.seed,
        ..PhantomSpec::default()
    };
    let split = generate_corpus(a.cases, &spec, &a.out)?;
    log::info!(
        "{} cases ({} train, {} val, {} test) in {}",
        a.cases,
        split.train.len(),
        split.val.len(),
        split.test.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct WindowRecord {
    t_start: usize,
    t_end: usize,
    indices: Vec<usize>,
    start_fallback: bool,
    end_fallback: bool,
}

fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let case = load_case(&a.case)?;
    let cta = case.cta.clone().ok_or_else(|| Error::MissingMember { dir: a.case.clone(), member: "cta4d".into() })?;
    let seq = CtaSequence::new(cta, case.spacing_mm)?;
    let f = extract_features(&seq, a.k, a.c_e)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    write_array3(&a.out.join("f_l"), &f.f_l, case.spacing_mm)?;
    write_array4(&a.out.join("i_star"), &f.i_star, case.spacing_mm)?;
    let rec = WindowRecord {
        t_start: f.detection.window.t_start,
        t_end: f.detection.window.t_end,
        indices: f.indices.clone(),
        start_fallback: f.detection.start_fallback,
        end_fallback: f.detection.end_fallback,
    };
    let path = a.out.join(WINDOW_JSON);
    fs::write(&path, serde_json::to_string_pretty(&rec)?).map_err(io_err(&path))?;
    if a.weight_map {
        let mask = case.mask.as_ref().ok_or_else(|| Error::MissingMember { dir: a.case.clone(), member: "mask".into() })?;
        let mut out = ndarray::Array3::<f32>::zeros(mask.dim());
        for (z, sl) in mask.axis_iter(Axis(0)).enumerate() {
            let wm = compute_weight_map(sl, a.w, a.d)?;
            out.index_axis_mut(Axis(0), z).assign(&wm.data.mapv(|v| v as f32));
        }
        write_array3(&a.out.join("weight_map"), &out, case.spacing_mm)?;
    }
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        cfg.apply_text(&fs::read_to_string(p).map_err(io_err(p))?)?;
    }
    for (k, v) in a.hp.pairs() {
        cfg.set(k, &v)?;
    }
    cfg.validate()?;
    let split_path = a.split.clone().unwrap_or_else(|| a.data.join(crate::phantom::SPLIT_FILE));
    let (train_set, val_set) = trainer::load_split_datasets(&a.data, &split_path, &cfg)?;
    log::info!("{} training and {} validation slices", train_set.len(), val_set.len());
    let out = trainer::train(&cfg, &train_set, &val_set, Some(&a.out))?;
    log::info!("best epoch {} of {}", out.best_epoch, cfg.epochs);
    Ok(())
}

fn predict_one(bundle: &ModelBundle, case_dir: &Path, out: &Path) -> Result<()> {
    let case = load_case(case_dir)?;
    let p = trainer::predict(bundle, &case)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_array3(&out.join(SEG_FILE), &p.seg, case.spacing_mm)?;
    if let Some(d) = &p.pseudo_dwi {
        write_array3(&out.join(PSEUDO_DWI_FILE), d, case.spacing_mm)?;
    }
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.model)?;
    match (&a.case, &a.data, &a.split) {
        (Some(case), _, _) => predict_one(&bundle, case, &a.out),
        (None, Some(root), Some(split)) => {
            for id in DatasetSplit::read(split)?.test {
                predict_one(&bundle, &root.join(&id), &a.out.join(&id))?;
            }
            Ok(())
        }
        _ => Err(Error::Invalid("predict needs --case or --data with --split".into())),
    }
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let pairs: Vec<(PathBuf, PathBuf)> = if bundle_exists(&a.pred.join(SEG_FILE)) {
        vec![(a.pred.clone(), a.gt.clone())]
    } else {
        list_cases_with_seg(&a.pred)?
            .into_iter()
            .map(|id| (a.pred.join(&id), a.gt.join(&id)))
            .collect()
    };
    if pairs.is_empty() {
        return Err(Error::Invalid(format!("no predictions under {}", a.pred.display())));
    }
    let mut per_case = Vec::with_capacity(pairs.len());
    for (pred, gt_dir) in pairs {
        let gt = load_case(&gt_dir)?;
        let mask = gt.mask.as_ref().ok_or_else(|| Error::MissingMember { dir: gt_dir.clone(), member: "mask".into() })?;
        let (_, seg) = read_array3(&pred.join(SEG_FILE))?;
        let synth = if bundle_exists(&pred.join(PSEUDO_DWI_FILE)) {
            Some(read_array3(&pred.join(PSEUDO_DWI_FILE))?.1)
        } else {
            None
        };
        let (segb, gtb) = (binarize(seg.view()), binarize(mask.view()));
        per_case.push(evaluate_case(&CaseInputs {
            case_id: &gt.case_id,
            seg: segb.view(),
            gt: gtb.view(),
            spacing_mm: gt.spacing_mm,
            synth: synth.as_ref().map(|s| s.view()),
            dwi: gt.dwi.as_ref().map(|d| d.view()),
        })?);
    }
    let report = MetricsReport::new(per_case);
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let csv = a.out.join(METRICS_CSV);
    fs::write(&csv, report.to_csv()).map_err(io_err(&csv))?;
    let json = a.out.join(METRICS_JSON);
    fs::write(&json, report.to_json()?).map_err(io_err(&json))?;
    Ok(())
}

fn list_cases_with_seg(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for e in fs::read_dir(root).map_err(io_err(root))? {
        let p = e.map_err(io_err(root))?.path();
        if p.is_dir() && bundle_exists(&p.join(SEG_FILE)) {
            ids.push(p.file_name().unwrap_or_default().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Help and usage text go to `out`, errors to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(out, "{e}");
                    1
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    let res = match &cli.command {
        Command::GenPhantom(a) => gen_phantom(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
