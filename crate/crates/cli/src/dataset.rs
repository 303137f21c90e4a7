//! Turning a `--dataset` argument into a loadable source.

use std::path::{Path, PathBuf};

use dgp_core::data::{CsvSchema, SyntheticKind};
use dgp_core::{Dataset, DatasetSource, Manifest};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Overrides the default data directory (`./data`).
pub const DATA_DIR_ENV: &str = "DGP_DATA_DIR";
/// Manifest picked up from the data directory when `--manifest` is absent.
pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// A dataset name together with everything needed to load it again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub name: String,
    pub source: DatasetSource,
}

impl DatasetRef {
    pub fn load(&self) -> CliResult<Dataset> {
        Ok(self.source.load(&self.name)?)
    }
}

/// Builtin generated datasets.
pub fn builtin(name: &str) -> Option<DatasetSource> {
    if let Ok(kind) = name.parse::<SyntheticKind>() {
        return Some(DatasetSource::Synthetic {
            kind,
            n: 200,
            noise_std: 0.1,
            seed: 0,
        });
    }
    match name {
        "kin8nm-sim" => Some(DatasetSource::Kinematic { n: 8192, seed: 0 }),
        "molecules-sim" => Some(DatasetSource::Binary {
            n: 60_000,
            d: 512,
            seed: 0,
        }),
        _ => None,
    }
}

/// Lookup order: the explicit manifest, `manifest.txt` in the data
/// directory, builtin names, then a CSV file (as given, or inside the data
/// directory, with or without a `.csv` suffix).
pub fn resolve(reference: &str, manifest: Option<&Path>, data_dir: &Path) -> CliResult<DatasetRef> {
    let found = |source: DatasetSource| DatasetRef {
        name: reference.to_string(),
        source,
    };
    if let Some(path) = manifest {
        let m = Manifest::load(path)?;
        return m
            .get(reference)
            .cloned()
            .map(found)
            .ok_or_else(|| CliError::config(format!("dataset `{reference}` is not in manifest {}", path.display())));
    }
    let implicit = data_dir.join(MANIFEST_FILE);
    if implicit.is_file() {
        if let Some(src) = Manifest::load(&implicit)?.get(reference) {
            return Ok(found(src.clone()));
        }
    }
    if let Some(src) = builtin(reference) {
        return Ok(found(src));
    }
    let candidates = [
        PathBuf::from(reference),
        data_dir.join(reference),
        data_dir.join(format!("{reference}.csv")),
    ];
    if let Some(path) = candidates.iter().find(|p| p.is_file()) {
        let path = path.canonicalize().unwrap_or_else(|_| path.clone());
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| reference.to_string());
        return Ok(DatasetRef {
            name,
            source: DatasetSource::Csv {
                schema: schema_for(&path),
                path,
            },
        });
    }
    Err(CliError::config(format!(
        "unknown dataset `{reference}`: not in a manifest, not a builtin, and no such file under {}",
        data_dir.display()
    )))
}

/// Comma for `.csv`, tab for `.tsv`, whitespace otherwise. Header detection
/// is left to the manifest.
fn schema_for(path: &Path) -> CsvSchema {
    let delimiter = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => b',',
        Some("tsv") => b'\t',
        _ => b' ',
    };
    CsvSchema {
        delimiter,
        ..CsvSchema::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_names() {
        assert!(matches!(builtin("sinusoid"), Some(DatasetSource::Synthetic { n: 200, .. })));
        assert!(matches!(builtin("kin8nm-sim"), Some(DatasetSource::Kinematic { .. })));
        assert!(builtin("nope").is_none());
    }

    #[test]
    fn manifest_takes_precedence() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(MANIFEST_FILE), "sinusoid.synthetic = linear\nsinusoid.n = 30\n").unwrap();
        let r = resolve("sinusoid", None, dir.path()).unwrap();
        assert!(matches!(
            r.source,
            DatasetSource::Synthetic {
                kind: SyntheticKind::Linear,
                n: 30,
                ..
            }
        ));
        let explicit = dir.path().join("other.txt");
        std::fs::write(&explicit, "toy.synthetic = step\n").unwrap();
        assert!(resolve("toy", Some(&explicit), dir.path()).is_ok());
        let e = resolve("sinusoid", Some(&explicit), dir.path()).unwrap_err();
        assert_eq!(e.kind, crate::error::FailureKind::Config);
    }

    #[test]
    fn csv_in_data_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.csv"), "1,2\n3,4\n5,7\n").unwrap();
        let r = resolve("tiny", None, dir.path()).unwrap();
        assert_eq!(r.name, "tiny");
        let ds = r.load().unwrap();
        assert_eq!(ds.len(), 3);
        assert!(resolve("absent", None, dir.path()).is_err());
    }

    #[test]
    fn broken_manifest_is_ingestion_failure() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.txt");
        std::fs::write(&m, "no equals sign\n").unwrap();
        let e = resolve("x", Some(&m), dir.path()).unwrap_err();
        assert_eq!(e.kind, crate::error::FailureKind::Ingestion);
    }
}
