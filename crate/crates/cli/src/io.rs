use std::fmt::Display;
use std::path::Path;

use eqtreat_core::data::{ingest, read_group_file, Dataset, GroupAssignment, InputFormat};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::CliError;

pub fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("no such file: {}", path.display())))
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    require_file(path)?;
    std::fs::read_to_string(path).map_err(|source| {
        CliError::Data(eqtreat_core::data::DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    require_file(path)?;
    Ok(ingest(path, InputFormat::from_path(path))?)
}

/// The named dimension, or the only one in the file.
pub fn load_groups(path: &Path, dimension: Option<&str>) -> Result<GroupAssignment, CliError> {
    require_file(path)?;
    let mut all = read_group_file(path)?;
    match dimension {
        Some(d) => {
            let found: Vec<String> = all.iter().map(|g| g.dimension().to_string()).collect();
            all.into_iter()
                .find(|g| g.dimension() == d)
                .ok_or_else(|| CliError::Usage(format!("dimension `{d}` not in {} (found {found:?})", path.display())))
        }
        None if all.len() == 1 => Ok(all.remove(0)),
        None => Err(CliError::Usage(format!(
            "{} holds {} dimensions; pick one with --dimension",
            path.display(),
            all.len()
        ))),
    }
}

/// Settings file by extension: `.json` is JSON, anything else TOML.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = read_text(path)?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

/// JSON goes to `out` with the text summary on stdout, or to stdout alone.
pub fn emit<T: Serialize>(value: &T, out: Option<&Path>, summary: impl Display) -> Result<(), CliError> {
    match out {
        Some(p) => {
            write_file(p, &to_json(value))?;
            print!("{summary}");
            println!("wrote {}", p.display());
        }
        None => print!("{}", to_json(value)),
    }
    Ok(())
}
