//! Output directories, manifests, checksums and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use l2d_core::data::{load_dataset_with, write_dataset, CsvOptions, Dataset};
use l2d_core::deferral::Method;
use l2d_core::simulation::{ExpertModel, GaussianMixtureSpec};
use l2d_core::training::ModelParams;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataSource, ExperimentConfig};
use crate::failure::{Failure, ResultExt};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";
pub const SPLIT_FILES: [&str; 3] = ["train.csv", "validation.csv", "test.csv"];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// What a generated dataset directory contains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub source: DataSource,
    pub num_classes: usize,
    pub dim: usize,
    pub header: bool,
    pub rows: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<GaussianMixtureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert: Option<ExpertModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetInfo>,
    /// SHA-256 of each input, keyed by role.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each file written next to the manifest.
    pub files: BTreeMap<String, String>,
}

/// A directory being filled with outputs. Every file is checksummed and
/// listed in the manifest written by [`OutputDir::finish`].
pub struct OutputDir {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(root)
            .map_err(|e| Failure::runtime(format!("{}: cannot create directory: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let path = self.root.join(name);
        fs::write(&path, bytes).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value).runtime()?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn finish(
        mut self,
        command: &str,
        config: &ExperimentConfig,
        dataset: Option<DatasetInfo>,
        inputs: BTreeMap<String, String>,
    ) -> Result<(), Failure> {
        self.write(EFFECTIVE_CONFIG, config.to_toml().as_bytes())?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            command: command.to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            dataset,
            inputs,
            files: std::mem::take(&mut self.files),
        };
        let mut text = serde_json::to_string_pretty(&manifest).runtime()?;
        text.push('\n');
        let path = self.root.join(MANIFEST);
        fs::write(&path, text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
    }
}

/// An input file whose checksum has been checked against the manifest in
/// its directory, if there is one.
pub struct VerifiedInput {
    pub bytes: Vec<u8>,
    pub sha256: String,
    pub manifest: Option<Manifest>,
}

pub fn read_verified(path: &Path) -> Result<VerifiedInput, Failure> {
    if !path.is_file() {
        return Err(Failure::usage(format!("{}: no such file", path.display())));
    }
    let bytes = fs::read(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let sha256 = sha256_hex(&bytes);
    let dir = path.parent().unwrap_or(Path::new("."));
    let manifest_path = dir.join(MANIFEST);
    let manifest = if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Failure::usage(format!("{}: {e}", manifest_path.display())))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("{}: {e}", manifest_path.display())))?;
        Some(m)
    } else {
        None
    };
    if let (Some(m), Some(name)) = (&manifest, path.file_name().and_then(|n| n.to_str())) {
        if let Some(expected) = m.files.get(name) {
            if *expected != sha256 {
                return Err(Failure::usage(format!(
                    "{}: checksum mismatch with {} (expected {expected}, found {sha256})",
                    path.display(),
                    manifest_path.display()
                )));
            }
        }
    }
    Ok(VerifiedInput { bytes, sha256, manifest })
}

/// Reads a dataset CSV. `K` and the header flag come from the directory's
/// manifest when it has one; a manifest `K` that differs from
/// `expected_classes` is an error.
pub fn read_dataset(
    path: &Path,
    expected_classes: Option<usize>,
    fallback_classes: usize,
    header: bool,
) -> Result<(Dataset, String), Failure> {
    let input = read_verified(path)?;
    let info = input.manifest.as_ref().and_then(|m| m.dataset.as_ref());
    let num_classes = info.map_or(expected_classes.unwrap_or(fallback_classes), |i| i.num_classes);
    if let Some(k) = expected_classes.filter(|k| *k != num_classes) {
        return Err(Failure::usage(format!(
            "{}: dataset has K={num_classes} classes, checkpoint expects K={k}",
            path.display()
        )));
    }
    let header = info.map_or(header, |i| i.header);
    let dataset = load_dataset_with(path, num_classes, CsvOptions { header })?;
    Ok((dataset, input.sha256))
}

pub fn dataset_csv(dataset: &Dataset, header: bool) -> Vec<u8> {
    let mut out = Vec::new();
    if header {
        let mut cols: Vec<String> = (0..dataset.dim()).map(|j| format!("x{j}")).collect();
        cols.extend(["y".to_string(), "m".to_string()]);
        out.extend_from_slice(cols.join(",").as_bytes());
        out.push(b'\n');
    }
    write_dataset(dataset, &mut out).expect("writing to memory");
    out
}

/// A trained model together with how to turn it into a deferral system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub method: Method,
    pub num_classes: usize,
    pub model: ModelParams,
}

pub fn read_checkpoint(path: &Path) -> Result<(Checkpoint, String), Failure> {
    let input = read_verified(path)?;
    let ck: Checkpoint = parse_json(path, &input.bytes)?;
    if ck.format_version != FORMAT_VERSION {
        return Err(Failure::usage(format!(
            "{}: unsupported checkpoint format version {}",
            path.display(),
            ck.format_version
        )));
    }
    ck.model.validate()?;
    if ck.model.output_dim != ck.method.output_dim(ck.num_classes) {
        return Err(Failure::usage(format!(
            "{}: model has {} outputs, {} with K={} needs {}",
            path.display(),
            ck.model.output_dim,
            ck.method.name(),
            ck.num_classes,
            ck.method.output_dim(ck.num_classes)
        )));
    }
    Ok((ck, input.sha256))
}

fn parse_json<T: DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<T, Failure> {
    serde_json::from_slice(bytes).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use l2d_core::data::Instance;

    fn tiny() -> Dataset {
        Dataset::new(
            vec![Instance::new(vec![0.5, -1.0], 1, 0), Instance::new(vec![2.0, 0.25], 0, 0)],
            2,
            2,
        )
        .unwrap()
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn header_csv_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, dataset_csv(&tiny(), true)).unwrap();
        let (back, _) = read_dataset(&path, None, 2, true).unwrap();
        assert_eq!(back, tiny());
        assert!(read_dataset(&path, None, 2, false).is_err());
    }

    #[test]
    fn manifest_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        out.write("test.csv", &dataset_csv(&tiny(), false)).unwrap();
        out.finish("generate", &ExperimentConfig::default(), None, BTreeMap::new()).unwrap();
        let path = dir.path().join("test.csv");
        assert!(read_verified(&path).is_ok());
        fs::write(&path, "0.5,-1,1,1\n2,0.25,0,0\n").unwrap();
        let err = read_verified(&path).err().unwrap();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("checksum mismatch"));
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = read_verified(Path::new("/nonexistent/x.csv")).err().unwrap();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("/nonexistent/x.csv"));
    }
}
