//! Checkpoints: parameters in the named-array container, metadata in a JSON
//! file next to it (`<path>.meta.json`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Precision};
use crate::container::{self, DType};
use crate::error::{Error, Result};
use crate::ontology::{FrameSpace, SpaceSummary};
use crate::tensor::{RngState, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub space: SpaceSummary,
    pub step: u64,
    pub epoch: u64,
    /// Training stream position, so a run can be resumed.
    #[serde(default)]
    pub rng: Option<RngState>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

impl Model {
    pub fn save(&self, path: &Path, step: u64, epoch: u64, rng: Option<RngState>) -> Result<()> {
        let arrays: Vec<(String, Tensor)> = self.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let dtype = match self.config.precision {
            Precision::F64 => DType::F64,
            Precision::F32 => DType::F32,
        };
        container::write(path, &arrays, dtype)?;
        let meta = CheckpointMeta { config: self.config.clone(), space: self.space.clone(), step, epoch, rng };
        let mp = meta_path(path);
        let json = serde_json::to_string_pretty(&meta).expect("serializable metadata");
        fs::write(&mp, json).map_err(|e| Error::io(&mp, e))
    }

    pub fn load(path: &Path, space: &FrameSpace) -> Result<(Model, CheckpointMeta)> {
        let mp = meta_path(path);
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|source| Error::Json { location: mp.display().to_string(), source })?;
        let mut model = Model::new(meta.config.clone(), space, 0)?;
        if model.space != meta.space {
            return Err(Error::validation(
                mp.display().to_string(),
                format!("checkpoint was trained on {:?}, space has {:?}", meta.space, model.space),
            ));
        }
        let arrays = container::read(path)?;
        model.store.load_values(&arrays)?;
        Ok((model, meta))
    }
}
