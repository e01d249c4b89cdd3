//! Checkpoint files.
//!
//! Layout: the line `POINTCSP-CKPT 1`, one line of JSON manifest, then the
//! tensor data as little-endian `f64`. The manifest lists every tensor with
//! its group, name, shape and element offset, plus the resolved config text,
//! its hash and the architecture hash.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainingError;
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &str = "POINTCSP-CKPT 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub step: usize,
    pub config_text: String,
    pub config_hash: String,
    pub arch_hash: String,
    pub student: ParamStore,
    pub teacher: ParamStore,
    /// Non-parameter training state, e.g. the distillation center.
    pub state: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: CheckpointKind,
    step: usize,
    config_hash: String,
    arch_hash: String,
    config: String,
    tensors: Vec<Entry>,
}

/// Hex SHA-256 over the sorted names and shapes of the `backbone.`
/// parameters.
pub fn arch_hash(params: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter().filter(|(n, _)| n.starts_with("backbone.")) {
        h.update(format!("{name}:{:?};", t.shape()).as_bytes());
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    fn groups(&self) -> [(&'static str, &ParamStore); 3] {
        [
            ("student", &self.student),
            ("teacher", &self.teacher),
            ("state", &self.state),
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut offset = 0;
        for (group, store) in self.groups() {
            for (name, t) in store.iter() {
                tensors.push(Entry {
                    group: group.into(),
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.len();
                for v in t.data() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            kind: self.kind,
            step: self.step,
            config_hash: self.config_hash.clone(),
            arch_hash: self.arch_hash.clone(),
            config: self.config_text.clone(),
            tensors,
        };
        let mut out = format!("{MAGIC}\n").into_bytes();
        out.extend(serde_json::to_vec(&manifest).expect("manifest serializes"));
        out.push(b'\n');
        out.extend(data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainingError> {
        let bad = |m: &str| TrainingError::Checkpoint(m.to_string());
        let rest = bytes
            .strip_prefix(format!("{MAGIC}\n").as_bytes())
            .ok_or_else(|| bad("missing checkpoint header"))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(&rest[..nl]).map_err(|e| bad(&format!("bad manifest: {e}")))?;
        let data = &rest[nl + 1..];
        if data.len() % 8 != 0 {
            return Err(bad("data length is not a multiple of 8"));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut ckpt = Checkpoint {
            kind: manifest.kind,
            step: manifest.step,
            config_text: manifest.config,
            config_hash: manifest.config_hash,
            arch_hash: manifest.arch_hash,
            student: ParamStore::new(),
            teacher: ParamStore::new(),
            state: ParamStore::new(),
        };
        let mut expected = 0;
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + n > values.len() {
                return Err(bad(&format!(
                    "tensor {} lies outside the data block",
                    e.name
                )));
            }
            expected += n;
            let t = Tensor::new(e.shape, values[e.offset..e.offset + n].to_vec())?;
            match e.group.as_str() {
                "student" => ckpt.student.insert(e.name, t),
                "teacher" => ckpt.teacher.insert(e.name, t),
                "state" => ckpt.state.insert(e.name, t),
                other => return Err(bad(&format!("unknown group `{other}`"))),
            }
        }
        if expected != values.len() {
            return Err(bad("trailing data after the last tensor"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainingError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainingError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
