//! Checkpoint directories: `meta.json`, one SPFT file per tensor under
//! `tensors/`, and AdamW moments under `optim/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{validation, Error, Result};
use crate::llm::{LoraSpec, Vocab};
use crate::optim::{AdamW, Moments};
use crate::params::ParamStore;
use crate::pipeline::{ModelConfig, Pipeline};
use crate::spft::{self, DType};
use crate::trainer::{Phase, TrainConfig};

const TABLE: &str = "embed.table";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    /// Completed steps within `phase`.
    pub step: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vocab,
    pub lora: Option<LoraSpec>,
    pub table_hash: String,
    pub adapter_tensors: Vec<String>,
    pub model_tensors: Vec<String>,
    pub optim_steps: BTreeMap<String, u64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub adapter: ParamStore,
    pub model_params: ParamStore,
    pub table: Mat,
    pub moments: BTreeMap<String, Moments>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_store(dir: &Path, names: &[String]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for n in names {
        store.insert(n.clone(), spft::read_matrix(&dir.join(format!("{n}.spft")))?, false);
    }
    Ok(store)
}

impl Checkpoint {
    pub fn capture(pipe: &Pipeline, train: &TrainConfig, opt: &AdamW, phase: Phase, step: usize) -> Self {
        let meta = CheckpointMeta {
            phase,
            step,
            model: pipe.config.clone(),
            train: train.clone(),
            vocab: pipe.model.vocab().clone(),
            lora: pipe.model.lora.clone(),
            table_hash: pipe.model.table.hash(),
            adapter_tensors: pipe.adapter.names().cloned().collect(),
            model_tensors: pipe.model.params.names().cloned().collect(),
            optim_steps: opt.state.iter().map(|(n, m)| (n.clone(), m.t)).collect(),
        };
        Self {
            meta,
            adapter: pipe.adapter.clone(),
            model_params: pipe.model.params.clone(),
            table: pipe.model.table.weights.clone(),
            moments: opt.state.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let tensors = dir.join("tensors");
        let optim = dir.join("optim");
        for d in [&tensors, &optim] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for (name, p) in self.adapter.iter().chain(self.model_params.iter()) {
            spft::write_matrix(&tensors.join(format!("{name}.spft")), &p.value, DType::F64)?;
        }
        spft::write_matrix(&tensors.join(format!("{TABLE}.spft")), &self.table, DType::F64)?;
        for (name, m) in &self.moments {
            spft::write_matrix(&optim.join(format!("{name}.m.spft")), &m.m, DType::F64)?;
            spft::write_matrix(&optim.join(format!("{name}.v.spft")), &m.v, DType::F64)?;
        }
        write_json(&dir.join("meta.json"), &self.meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| validation(format!("{}: {e}", meta_path.display())))?;
        let tensors = dir.join("tensors");
        let adapter = read_store(&tensors, &meta.adapter_tensors)?;
        let model_params = read_store(&tensors, &meta.model_tensors)?;
        let table = spft::read_matrix(&tensors.join(format!("{TABLE}.spft")))?;
        let optim = dir.join("optim");
        let mut moments = BTreeMap::new();
        for (name, &t) in &meta.optim_steps {
            let m = spft::read_matrix(&optim.join(format!("{name}.m.spft")))?;
            let v = spft::read_matrix(&optim.join(format!("{name}.v.spft")))?;
            moments.insert(name.clone(), Moments { m, v, t });
        }
        Ok(Self {
            meta,
            adapter,
            model_params,
            table,
            moments,
        })
    }

    /// Copy the saved tensors into a pipeline of the same architecture and
    /// vocabulary; optimiser moments go into `opt`.
    pub fn restore(&self, pipe: &mut Pipeline, opt: &mut AdamW) -> Result<()> {
        if pipe.config != self.meta.model {
            return Err(validation("checkpoint model configuration differs from the pipeline's"));
        }
        if pipe.model.vocab() != &self.meta.vocab {
            return Err(validation("checkpoint vocabulary differs from the corpus vocabulary"));
        }
        if pipe.model.table.weights != self.table || pipe.model.table.hash() != self.meta.table_hash {
            return Err(validation("checkpoint embedding table differs from the pipeline's"));
        }
        copy_into(&mut pipe.adapter, &self.adapter, "adapter")?;
        copy_into(&mut pipe.model.params, &self.model_params, "decoder")?;
        for (name, m) in &self.moments {
            let known = pipe.adapter.get(name).or_else(|| pipe.model.params.get(name));
            match known {
                Some(p) if p.value.dim() == m.m.dim() && m.m.dim() == m.v.dim() => {}
                _ => return Err(validation(format!("optimiser state for unknown or mismatched `{name}`"))),
            }
        }
        opt.state = self.moments.clone();
        Ok(())
    }

    /// Rebuild a ready-to-use pipeline from this checkpoint alone.
    pub fn into_pipeline(self) -> Result<Pipeline> {
        let mut pipe = Pipeline::new(self.meta.model.clone(), self.meta.vocab.clone())?;
        if pipe.model.table.weights.dim() != self.table.dim() {
            return Err(validation("checkpoint embedding table has the wrong shape"));
        }
        pipe.model.table.weights = self.table.clone();
        if pipe.model.table.hash() != self.meta.table_hash {
            return Err(validation("checkpoint embedding table hash mismatch"));
        }
        let mut opt = AdamW::new(self.meta.train.adamw());
        self.restore(&mut pipe, &mut opt)?;
        Ok(pipe)
    }
}

fn copy_into(dst: &mut ParamStore, src: &ParamStore, what: &str) -> Result<()> {
    let a: Vec<&String> = dst.names().collect();
    let b: Vec<&String> = src.names().collect();
    if a != b {
        return Err(validation(format!("checkpoint {what} tensors do not match the model")));
    }
    for (name, p) in src.iter() {
        let d = dst.get_mut(name).expect("names checked");
        if d.value.dim() != p.value.dim() {
            return Err(validation(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                p.value.dim(),
                d.value.dim()
            )));
        }
        d.value = p.value.clone();
    }
    Ok(())
}
