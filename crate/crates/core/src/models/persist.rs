use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainedModel;
use crate::error::{Error, Result};
use crate::models::Classifier;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    model: TrainedModel,
}

/// Writes the model as JSON. Parameters are stored bit-exactly.
pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let env = Envelope {
        format_version: MODEL_FORMAT_VERSION,
        model: model.clone(),
    };
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec(&env)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a model and checks that its stored id matches its configuration.
pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path)?;
    let env: Envelope = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: e.column() as u64,
        msg: e.to_string(),
    })?;
    if env.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("unsupported model format version {}", env.format_version),
        });
    }
    let expected = env.model.config().model_id();
    if env.model.id() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("model id {} does not match its configuration ({expected})", env.model.id()),
        });
    }
    Ok(env.model)
}
