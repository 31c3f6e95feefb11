//! Checkpoints: one grid file per parameter and a `manifest.cfg` holding the
//! model configuration and `param.<name> = <file>` entries.

use std::path::Path;

use super::config::Config;
use super::model::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::transform::{read_grid, write_grid};

pub const MANIFEST: &str = "manifest.cfg";

pub fn save_checkpoint(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = model.config.to_config();
    for (name, p) in model.named_params() {
        let file = format!("{name}.grid");
        write_grid(dir.join(&file), &p.value)?;
        manifest.set(&format!("param.{name}"), file);
    }
    std::fs::write(dir.join(MANIFEST), manifest.to_text())?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let manifest = Config::load(dir.join(MANIFEST))?;
    let mut model = Model::new(ModelConfig::from_config(&manifest)?);
    let files = manifest.section("param");
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(model.params_mut()) {
        let file = files
            .raw(name)
            .ok_or_else(|| Error::Config(format!("checkpoint manifest lacks parameter {name}")))?;
        let grid = read_grid(dir.join(file))?;
        if grid.shape() != p.value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                grid.shape(),
                p.value.shape()
            )));
        }
        p.set(grid.to_vec())?;
    }
    Ok(model)
}
