use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::models::{ArchConfig, Model};
use crate::autograd::{RmsProp, Tensor, VarStore};
use crate::error::{Error, Result};
use crate::volume_io::{read_volume, write_volume, VolumeHeader};

pub const MANIFEST: &str = "manifest.json";
const PARAM_DIR: &str = "params";
const OPTIM_DIR: &str = "optim";
const UNIT_SPACING: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerManifest {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    pub state: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub arch: ArchConfig,
    pub epoch: usize,
    pub losses: BTreeMap<String, f64>,
    pub hyperparams: BTreeMap<String, String>,
    pub params: Vec<String>,
    pub optimizer: Option<OptimizerManifest>,
}

/// Parameters and running statistics of all four networks plus the
/// training snapshot needed to resume or reproduce.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub model: Model,
    pub store: VarStore<f32>,
    pub optimizer: Option<RmsProp<f32>>,
    pub epoch: usize,
    pub losses: BTreeMap<String, f64>,
    pub hyperparams: BTreeMap<String, String>,
}

fn tensor_to_array(t: &Tensor<f32>) -> ArrayD<f32> {
    ArrayD::from_shape_vec(IxDyn(t.shape()), t.data().to_vec()).expect("tensor shape")
}

fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let header = VolumeHeader::new(t.shape(), UNIT_SPACING);
    write_volume(path, &header, &tensor_to_array(t))
}

fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let (h, a) = read_volume(path)?;
    Ok(Tensor::from_vec(&h.dims, a.iter().copied().collect()))
}

impl ModelBundle {
    /// Fresh bundle with Xavier-initialised weights from `seed`.
    pub fn init(arch: ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = VarStore::new();
        let model = Model::new(arch, &mut store, &mut rng);
        Self {
            model,
            store,
            optimizer: None,
            epoch: 0,
            losses: BTreeMap::new(),
            hyperparams: BTreeMap::new(),
        }
    }

    pub fn arch(&self) -> ArchConfig {
        self.model.arch
    }

    pub fn manifest(&self) -> Manifest {
        let params = self.store.ids().map(|id| self.store.name(id).to_string()).collect();
        let optimizer = self.optimizer.as_ref().map(|o| OptimizerManifest {
            lr: o.lr,
            decay: o.decay,
            eps: o.eps,
            state: o.state().keys().map(|id| self.store.name(*id).to_string()).collect(),
        });
        Manifest {
            arch: self.arch(),
            epoch: self.epoch,
            losses: self.losses.clone(),
            hyperparams: self.hyperparams.clone(),
            params,
            optimizer,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        if !self.store.all_finite() {
            return Err(Error::Invalid("refusing to save non-finite parameters".into()));
        }
        let pdir = dir.join(PARAM_DIR);
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        for id in self.store.ids() {
            write_tensor(&pdir.join(self.store.name(id)), self.store.get(id))?;
        }
        if let Some(opt) = &self.optimizer {
            let odir = dir.join(OPTIM_DIR);
            fs::create_dir_all(&odir).map_err(|e| Error::io(&odir, e))?;
            for (id, t) in opt.state() {
                write_tensor(&odir.join(self.store.name(*id)), t)?;
            }
        }
        let text = serde_json::to_string_pretty(&self.manifest())?;
        let mpath = dir.join(MANIFEST);
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        let mut b = Self::init(m.arch, 0);
        let expected: Vec<&str> = b.store.ids().map(|id| b.store.name(id)).collect();
        if expected != m.params.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Invalid(format!(
                "checkpoint {} does not match its declared architecture",
                dir.display()
            )));
        }
        let ids: Vec<_> = b.store.ids().collect();
        for id in ids {
            let t = read_tensor(&dir.join(PARAM_DIR).join(b.store.name(id)))?;
            if t.shape() != b.store.get(id).shape() {
                return Err(Error::Shape(format!(
                    "{}: stored {:?}, expected {:?}",
                    b.store.name(id),
                    t.shape(),
                    b.store.get(id).shape()
                )));
            }
            b.store.set(id, t);
        }
        if let Some(om) = &m.optimizer {
            let mut opt = RmsProp::new(om.lr, om.decay, om.eps);
            for name in &om.state {
                let id = b
                    .store
                    .lookup(name)
                    .ok_or_else(|| Error::Invalid(format!("optimizer state for unknown {name}")))?;
                opt.set_state(id, read_tensor(&dir.join(OPTIM_DIR).join(name))?);
            }
            b.optimizer = Some(opt);
        }
        b.epoch = m.epoch;
        b.losses = m.losses;
        b.hyperparams = m.hyperparams;
        Ok(b)
    }
}
