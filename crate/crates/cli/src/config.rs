//! Config files, dotted-key overrides and input loading shared by the commands.

use std::path::{Path, PathBuf};

use toml::{Table, Value};
use vidpred_core::datagen::split;
use vidpred_core::{Checkpoint, RunConfig, VideoDataset};

use crate::error::{runtime, usage, CliError};

/// Parses `key.path=value`; the value is read as a TOML literal, falling back to a bare string.
pub fn parse_override(raw: &str) -> Result<(String, Value), CliError> {
    let Some((key, value)) = raw.split_once('=') else {
        return Err(usage(format!("override `{raw}` is not of the form key=value")));
    };
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(usage(format!("override `{raw}` has an empty key")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

fn set_path(root: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap();
    let mut table = root;
    for part in parts {
        let entry = table.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => return Err(usage(format!("cannot set `{key}`: `{part}` is not a section"))),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Reads an optional TOML config, applies overrides in order and validates the result.
pub fn load_run_config(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<Table>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for (key, value) in overrides {
        set_path(&mut table, key, value.clone())?;
    }
    let config: RunConfig = Value::Table(table).try_into().map_err(|e| usage(format!("invalid config: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn to_toml(config: &RunConfig) -> Result<String, CliError> {
    toml::to_string(config).map_err(runtime)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

pub fn load_dataset(path: &Path) -> Result<VideoDataset, CliError> {
    if !path.is_file() {
        return Err(usage(format!("dataset {} does not exist", path.display())));
    }
    Ok(VideoDataset::load(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    /// The whole dataset, unsplit.
    All,
}

/// Selects one part of `data` using the run's split ratios.
pub fn select_split(data: &VideoDataset, config: &RunConfig, which: SplitName) -> Result<VideoDataset, CliError> {
    let part = match which {
        SplitName::All => data.clone(),
        _ => {
            let (train, val, test) = split(data, config.data.split)?;
            match which {
                SplitName::Train => train,
                SplitName::Val => val,
                _ => test,
            }
        }
    };
    if part.is_empty() {
        let name = format!("{which:?}").to_lowercase();
        return Err(usage(format!("the {name} split of the dataset is empty (ratios {:?})", config.data.split)));
    }
    Ok(part)
}

/// Rejects datasets whose frames do not match the model.
pub fn check_frames(data: &VideoDataset, config: &RunConfig) -> Result<(), CliError> {
    let fs = data.frame_shape();
    let m = &config.model;
    if fs.channels != m.channels || fs.height != m.image_size || fs.width != m.image_size {
        return Err(usage(format!(
            "dataset frames are {}x{}x{}, the model expects {}x{}x{}",
            fs.channels, fs.height, fs.width, m.channels, m.image_size, m.image_size
        )));
    }
    Ok(())
}

/// Resolves a run directory under the output root.
pub fn run_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

/// Relative input paths are looked up under the output root first, then the working directory.
pub fn resolve_input(root: &Path, path: &Path) -> PathBuf {
    if path.is_relative() {
        let under_root = root.join(path);
        if under_root.exists() {
            return under_root;
        }
    }
    path.to_path_buf()
}
