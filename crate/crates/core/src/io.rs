//! On-disk formats: cohort and labeled-embedding JSON lines, per-patient
//! tensor blobs, and checkpoints. Binary sections are little-endian `f32`,
//! row-major, described by a JSON manifest.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::clinical::Observation;
use crate::error::{Error, Result};
use crate::trajectory::CxrEvent;

pub const SCHEMA_VERSION: u32 = 1;

/// One line of the cohort file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecord {
    pub patient_id: String,
    pub stay_hours: usize,
    pub observations: Vec<Observation>,
    pub cxr_events: Vec<CxrEvent>,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_cohort(path: &Path) -> Result<Vec<PatientRecord>> {
    read_jsonl(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
}

fn pack(arrays: &[(&str, Vec<usize>, &[f32])]) -> Result<(Vec<ArrayEntry>, Vec<u8>)> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut bytes = Vec::new();
    for (name, shape, data) in arrays {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension {
                op: "pack",
                lhs: shape.clone(),
                rhs: vec![data.len()],
            });
        }
        entries.push(ArrayEntry {
            name: name.to_string(),
            shape: shape.clone(),
            byte_offset: bytes.len(),
        });
        for v in data.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok((entries, bytes))
}

fn unpack(entries: &[ArrayEntry], bytes: &[u8], what: &Path) -> Result<Vec<Tensor<f32>>> {
    entries
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let end = e.byte_offset + 4 * n;
            let raw = bytes.get(e.byte_offset..end).ok_or_else(|| {
                Error::Schema(format!(
                    "{}: array {} needs bytes {}..{end}, file has {}",
                    what.display(),
                    e.name,
                    e.byte_offset,
                    bytes.len()
                ))
            })?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::new(e.shape.clone(), data)
        })
        .collect()
}

fn check_version(found: u32) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::Version {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

/// Sidecar manifest of a per-patient blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobManifest {
    pub patient_id: String,
    pub window: [usize; 2],
    pub arrays: Vec<ArrayEntry>,
    pub schema_version: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub manifest: BlobManifest,
    pub arrays: Vec<Tensor<f32>>,
}

impl Blob {
    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.manifest
            .arrays
            .iter()
            .position(|a| a.name == name)
            .map(|i| &self.arrays[i])
            .ok_or_else(|| Error::Schema(format!("blob for {} has no array '{name}'", self.manifest.patient_id)))
    }
}

/// File stem for a patient id, keeping only filename-safe characters.
pub fn blob_stem(patient_id: &str) -> String {
    patient_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Write `<stem>.bin` and `<stem>.json` under `dir`; returns both paths.
pub fn write_blob(
    dir: &Path,
    patient_id: &str,
    window: (usize, usize),
    arrays: &[(&str, Vec<usize>, &[f32])],
) -> Result<[PathBuf; 2]> {
    let (entries, bytes) = pack(arrays)?;
    let stem = blob_stem(patient_id);
    let bin = dir.join(format!("{stem}.bin"));
    let json = dir.join(format!("{stem}.json"));
    write_bytes(&bin, &bytes)?;
    write_json(
        &json,
        &BlobManifest {
            patient_id: patient_id.to_string(),
            window: [window.0, window.1],
            arrays: entries,
            schema_version: SCHEMA_VERSION,
        },
    )?;
    Ok([bin, json])
}

/// Read a blob given its sidecar path.
pub fn read_blob(sidecar: &Path) -> Result<Blob> {
    let manifest: BlobManifest = read_json(sidecar)?;
    check_version(manifest.schema_version)?;
    let bin = sidecar.with_extension("bin");
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let arrays = unpack(&manifest.arrays, &bytes, &bin)?;
    Ok(Blob { manifest, arrays })
}

/// Checkpoint manifest; tensors live in the sibling `.bin` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
    pub tensors: Vec<ArrayEntry>,
    pub rng_state: serde_json::Value,
    pub schema_version: u32,
}

/// Write `<path>` (manifest) and `<path>.bin`-style sibling with the tensors.
pub fn write_checkpoint(
    path: &Path,
    config: serde_json::Value,
    classes: Option<Vec<String>>,
    tensors: &[(String, &Tensor<f32>)],
    rng_state: serde_json::Value,
) -> Result<[PathBuf; 2]> {
    let arrays: Vec<(&str, Vec<usize>, &[f32])> = tensors
        .iter()
        .map(|(n, t)| (n.as_str(), t.shape().to_vec(), t.data()))
        .collect();
    let (entries, bytes) = pack(&arrays)?;
    let bin = path.with_extension("bin");
    write_bytes(&bin, &bytes)?;
    write_json(
        path,
        &CheckpointManifest {
            config,
            classes,
            tensors: entries,
            rng_state,
            schema_version: SCHEMA_VERSION,
        },
    )?;
    Ok([path.to_path_buf(), bin])
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointManifest, Vec<Tensor<f32>>)> {
    let raw: serde_json::Value = read_json(path)?;
    let version = raw
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Schema(format!("{}: missing schema_version", path.display())))?;
    check_version(version as u32)?;
    let manifest: CheckpointManifest =
        serde_json::from_value(raw).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let bin = path.with_extension("bin");
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let tensors = unpack(&manifest.tensors, &bytes, &bin)?;
    Ok((manifest, tensors))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = [1.0f32, -2.5, 3.25, 0.0, 1e-30, f32::MAX];
        let b = [7.0f32];
        write_blob(dir.path(), "pt/01", (3, 5), &[("a", vec![2, 3], &a), ("b", vec![1], &b)]).unwrap();
        let blob = read_blob(&dir.path().join("pt_01.json")).unwrap();
        assert_eq!(blob.manifest.patient_id, "pt/01");
        assert_eq!(blob.manifest.window, [3, 5]);
        assert_eq!(blob.get("a").unwrap().data(), &a);
        assert_eq!(blob.get("b").unwrap().shape(), &[1]);
        assert_eq!(blob.manifest.arrays[1].byte_offset, 24);
        assert!(blob.get("c").is_err());
    }

    #[test]
    fn checkpoint_version_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let t = Tensor::new([2], vec![1.0f32, 2.0]).unwrap();
        write_checkpoint(&path, serde_json::json!({"k": 1}), None, &[("t".into(), &t)], serde_json::Value::Null)
            .unwrap();
        let (m, ts) = read_checkpoint(&path).unwrap();
        assert_eq!(ts[0], t);
        assert_eq!(m.config["k"], 1);

        let text = fs::read_to_string(&path).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 7");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(Error::Version { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn cohort_line_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"patient_id\":\"a\",\"stay_hours\":2,\"observations\":[],\"cxr_events\":[]}\n{oops}\n",
        )
        .unwrap();
        let err = read_cohort(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
