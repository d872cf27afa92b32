use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::AdamW;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Tensor, TensorArchive};

const KIND: &str = "segmoe-checkpoint";

/// Parameters, optimizer moments and bookkeeping of the best epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub adam_t: u64,
    pub epoch: usize,
    pub best_val_loss: f64,
    /// JSON echo of the model and training configuration.
    pub config: String,
}

impl Checkpoint {
    pub fn new(store: &ParamStore, opt: &AdamW, epoch: usize, best_val_loss: f64, config: String) -> Self {
        Checkpoint {
            params: store.to_named(),
            adam_m: opt.m.clone(),
            adam_v: opt.v.clone(),
            adam_t: opt.t,
            epoch,
            best_val_loss,
            config,
        }
    }

    pub fn to_archive(&self) -> TensorArchive {
        let meta = vec![
            ("kind".to_string(), KIND.to_string()),
            ("epoch".to_string(), self.epoch.to_string()),
            // exact bits first, readable value second
            ("best_val_loss".to_string(), format!("{:016x} {}", self.best_val_loss.to_bits(), self.best_val_loss)),
            ("adam_t".to_string(), self.adam_t.to_string()),
            ("config".to_string(), self.config.clone()),
        ];
        let mut tensors: Vec<(String, Tensor)> = self.params.iter().map(|(n, t)| (format!("param.{n}"), t.clone())).collect();
        for (prefix, moments) in [("adam.m", &self.adam_m), ("adam.v", &self.adam_v)] {
            for ((n, _), t) in self.params.iter().zip(moments) {
                tensors.push((format!("{prefix}.{n}"), t.clone()));
            }
        }
        TensorArchive { meta, tensors }
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        if a.meta("kind") != Some(KIND) {
            return Err(Error::Format("not a segmoe checkpoint".into()));
        }
        let field = |k: &str| a.meta(k).ok_or_else(|| Error::Format(format!("checkpoint lacks `{k}`")));
        let num = |k: &str| {
            field(k)?
                .parse::<u64>()
                .map_err(|_| Error::Format(format!("bad `{k}` in checkpoint")))
        };
        let bits = field("best_val_loss")?.split_whitespace().next().unwrap_or("");
        let best_val_loss = u64::from_str_radix(bits, 16)
            .map(f64::from_bits)
            .map_err(|_| Error::Format("bad `best_val_loss` in checkpoint".into()))?;
        let mut params = Vec::new();
        let (mut adam_m, mut adam_v) = (Vec::new(), Vec::new());
        for (name, t) in &a.tensors {
            if let Some(n) = name.strip_prefix("param.") {
                params.push((n.to_string(), t.clone()));
            } else if name.starts_with("adam.m.") {
                adam_m.push(t.clone());
            } else if name.starts_with("adam.v.") {
                adam_v.push(t.clone());
            }
        }
        if adam_m.len() != params.len() || adam_v.len() != params.len() {
            return Err(Error::Format("optimizer moments do not match parameters".into()));
        }
        Ok(Checkpoint {
            params,
            adam_m,
            adam_v,
            adam_t: num("adam_t")?,
            epoch: num("epoch")? as usize,
            best_val_loss,
            config: field("config")?.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.to_archive().write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        Self::from_archive(&TensorArchive::read_from(r)?)
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            m: self.adam_m.clone(),
            v: self.adam_v.clone(),
            t: self.adam_t,
        }
    }
}
