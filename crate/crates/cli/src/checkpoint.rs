//! Checkpoints are directories: one `.xmrt` file per named parameter tensor
//! plus `checkpoint.toml` listing them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xmrt_core::encoders::ModelParams;

use crate::error::{CliError, CliResult};
use crate::tensor::{load_tensor, save_tensor, Tensor};

pub const INDEX: &str = "checkpoint.toml";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    rng_seed: u64,
    tensors: Vec<String>,
}

pub fn save_checkpoint(dir: &Path, params: &ModelParams) -> CliResult<()> {
    params.validate()?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut names = Vec::new();
    for (name, dims, values) in params.tensors() {
        save_tensor(&dir.join(format!("{name}.xmrt")), &Tensor { dims, data: values.to_vec() })?;
        names.push(name);
    }
    let index = Index { rng_seed: params.rng_seed, tensors: names };
    let text = toml::to_string(&index).expect("index serializes");
    fs::write(dir.join(INDEX), text).map_err(|e| CliError::io(dir.join(INDEX), e))
}

pub fn load_checkpoint(dir: &Path) -> CliResult<ModelParams> {
    let path = dir.join(INDEX);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let index: Index = toml::from_str(&text).map_err(|e| CliError::format(&path, 0, e.to_string()))?;
    let tensors = index
        .tensors
        .iter()
        .map(|name| load_tensor(&dir.join(format!("{name}.xmrt"))).map(|t| (name.as_str(), t)))
        .collect::<CliResult<Vec<_>>>()?;
    let params = ModelParams::from_tensors(
        tensors.iter().map(|(n, t)| (*n, t.dims.as_slice(), t.data.as_slice())),
        index.rng_seed,
    )?;
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use xmrt_core::encoders::init_params;

    #[test]
    fn round_trip_with_and_without_heads() {
        let dir = tempfile::tempdir().unwrap();
        for (i, k) in [None, Some(4)].into_iter().enumerate() {
            let p = init_params(5, 6, 3, k, 11).unwrap();
            let d = dir.path().join(i.to_string());
            save_checkpoint(&d, &p).unwrap();
            assert_eq!(load_checkpoint(&d).unwrap(), p);
        }
    }

    #[test]
    fn missing_tensor_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &init_params(2, 2, 2, None, 0).unwrap()).unwrap();
        fs::remove_file(dir.path().join("text_encoder.bias.xmrt")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(CliError::Io { .. })));
    }
}
