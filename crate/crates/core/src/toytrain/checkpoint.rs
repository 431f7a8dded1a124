use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Precision;
use crate::tensor::Tensor;
use crate::toytrain::config::TrainConfig;
use crate::toytrain::model::ToyModel;
use crate::toytrain::optim::AdamState;

const FORMAT: &str = "hbl-checkpoint/1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    A8,
    A4,
}

impl Stage {
    pub fn precision(self) -> Precision {
        match self {
            Stage::A8 => Precision::A8,
            Stage::A4 => Precision::A4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::A8 => "a8",
            Stage::A4 => "a4",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerEntry {
    step: u64,
    m: Vec<String>,
    v: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: TrainConfig,
    /// Global step of the next update.
    step: usize,
    stage: Stage,
    params: Vec<ParamEntry>,
    optimizer: OptimizerEntry,
}

/// Model parameters, optimizer moments and the position in the schedule.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub stage: Stage,
    pub model: ToyModel,
    pub optimizer: AdamState,
}

impl Checkpoint {
    /// Writes `manifest.json`, `params/*.bnt` and `optimizer/*.bnt` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["params", "optimizer"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let names = self.model.param_names();
        let mut params = Vec::with_capacity(names.len());
        let (mut m_files, mut v_files) = (Vec::new(), Vec::new());
        for (i, (name, t)) in names.iter().zip(self.model.tensors()).enumerate() {
            let file = format!("params/{name}.bnt");
            t.save(dir.join(&file))?;
            params.push(ParamEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            });
            let (mf, vf) = (
                format!("optimizer/{name}.m.bnt"),
                format!("optimizer/{name}.v.bnt"),
            );
            self.optimizer.m[i].save(dir.join(&mf))?;
            self.optimizer.v[i].save(dir.join(&vf))?;
            m_files.push(mf);
            v_files.push(vf);
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            config: self.config.clone(),
            step: self.step,
            stage: self.stage,
            params,
            optimizer: OptimizerEntry {
                step: self.optimizer.step,
                m: m_files,
                v: v_files,
            },
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::BadHeader(format!(
                "unknown checkpoint format {:?}",
                manifest.format
            )));
        }
        manifest.config.validate()?;
        let n = manifest.params.len();
        if manifest.optimizer.m.len() != n || manifest.optimizer.v.len() != n {
            return Err(Error::BadHeader(format!(
                "{n} parameters but {} / {} moment files",
                manifest.optimizer.m.len(),
                manifest.optimizer.v.len()
            )));
        }
        let load = |file: &str, shape: &[usize]| -> Result<Tensor> {
            let t = Tensor::load(resolve(dir, file)?)?;
            if t.shape() != shape {
                return Err(Error::shape(format!(
                    "{file} has shape {:?}, manifest says {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let mut tensors = Vec::with_capacity(n);
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for (i, p) in manifest.params.iter().enumerate() {
            tensors.push(load(&p.file, &p.shape)?);
            m.push(load(&manifest.optimizer.m[i], &p.shape)?);
            v.push(load(&manifest.optimizer.v[i], &p.shape)?);
        }
        let model = ToyModel::from_tensors(&manifest.config, tensors)?;
        let expected = model.param_names();
        let found: Vec<&str> = manifest.params.iter().map(|p| p.name.as_str()).collect();
        if expected != found {
            return Err(Error::BadHeader(
                "parameter names do not match the model".into(),
            ));
        }
        Ok(Checkpoint {
            config: manifest.config,
            step: manifest.step,
            stage: manifest.stage,
            model,
            optimizer: AdamState {
                step: manifest.optimizer.step,
                m,
                v,
            },
        })
    }
}

/// Manifest paths must stay inside the checkpoint directory.
fn resolve(dir: &Path, file: &str) -> Result<PathBuf> {
    let rel = Path::new(file);
    if rel.is_absolute()
        || rel
            .components()
            .any(|c| matches!(c, std::path::Component::ParentDir))
    {
        return Err(Error::BadHeader(format!(
            "path {file:?} escapes the checkpoint"
        )));
    }
    Ok(dir.join(rel))
}
