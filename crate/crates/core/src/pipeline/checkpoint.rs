//! `eralab-ckpt-v1`: one JSON document per model.
//!
//! Keys are written in sorted order and floats in shortest round-trip form,
//! so `load ∘ save` is exact and equal models give equal bytes. A
//! checkpoint's id is the SHA-256 of those bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::diffusion::{ConditionalDenoiser, DenoiserSpec, ScheduleSpec};
use crate::error::{Error, Result};
use crate::numerics::{Layer, Matrix, Mlp};

pub const CHECKPOINT_VERSION: &str = "eralab-ckpt-v1";

/// A rare token bound to a concept by personalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub token: usize,
    pub concept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `train`, `erase`, `probe-gg` or `probe-ip`.
    pub stage: String,
    pub seed: u64,
    pub rng: String,
    pub config_hash: String,
    pub parent: Option<String>,
    /// Ids from the training run down to the parent, oldest first.
    pub lineage: Vec<String>,
    pub bindings: Vec<Binding>,
}

impl Provenance {
    pub fn root(stage: &str, seed: u64, config_hash: String) -> Self {
        Self {
            stage: stage.into(),
            seed,
            rng: crate::rng::GENERATOR.into(),
            config_hash,
            parent: None,
            lineage: vec![],
            bindings: vec![],
        }
    }

    /// Provenance of a model derived from `parent`.
    pub fn child(parent: &Checkpoint, stage: &str, seed: u64, config_hash: String) -> Result<Self> {
        let parent_id = parent.id()?;
        let mut lineage = parent.provenance.lineage.clone();
        lineage.push(parent_id.clone());
        Ok(Self {
            stage: stage.into(),
            seed,
            rng: crate::rng::GENERATOR.into(),
            config_hash,
            parent: Some(parent_id),
            lineage,
            bindings: parent.provenance.bindings.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ConditionalDenoiser,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Dims {
    data_dim: usize,
    concept_dim: usize,
    time_dim: usize,
    hidden: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    version: String,
    dims: Dims,
    #[serde(rename = "K")]
    k: usize,
    schedule: ScheduleSpec,
    embeddings: Vec<Vec<f64>>,
    layers: Vec<LayerRecord>,
    provenance: Provenance,
}

/// Serializes with object keys in sorted order.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Config(format!("unserializable value: {e}")))?;
    Ok(v.to_string())
}

pub fn canonical_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Config(format!("unserializable value: {e}")))?;
    let mut s = serde_json::to_string_pretty(&v).expect("a JSON value always serializes");
    s.push('\n');
    Ok(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(canonical_json(value)?.as_bytes()))
}

impl Checkpoint {
    pub fn new(model: ConditionalDenoiser, provenance: Provenance) -> Self {
        Self { model, provenance }
    }

    fn record(&self) -> Record {
        let spec = self.model.spec();
        Record {
            version: CHECKPOINT_VERSION.into(),
            dims: Dims {
                data_dim: spec.data_dim,
                concept_dim: spec.concept_dim,
                time_dim: spec.time_dim,
                hidden: spec.hidden.clone(),
            },
            k: spec.num_concepts,
            schedule: spec.schedule,
            embeddings: self.model.embeddings().to_rows(),
            layers: self
                .model
                .mlp()
                .layers()
                .iter()
                .map(|l| LayerRecord {
                    weight: l.weight.to_rows(),
                    bias: l.bias.clone(),
                })
                .collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        canonical_json(&self.record())
    }

    pub fn id(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }

    /// Writes the checkpoint and returns its id.
    pub fn save(&self, path: &Path) -> Result<String> {
        let json = self.to_json()?;
        write_file(path, json.as_bytes())?;
        Ok(sha256_hex(json.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        match value.get("version").and_then(Value::as_str) {
            Some(CHECKPOINT_VERSION) => {}
            Some(other) => {
                return Err(Error::Version {
                    found: other.into(),
                    expected: CHECKPOINT_VERSION,
                })
            }
            None => {
                return Err(Error::Version {
                    found: "<missing>".into(),
                    expected: CHECKPOINT_VERSION,
                })
            }
        }
        let record: Record = serde_json::from_value(value).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        Self::from_record(record)
    }

    fn from_record(r: Record) -> Result<Self> {
        let spec = DenoiserSpec {
            data_dim: r.dims.data_dim,
            concept_dim: r.dims.concept_dim,
            time_dim: r.dims.time_dim,
            hidden: r.dims.hidden,
            num_concepts: r.k,
            schedule: r.schedule,
        };
        let sizes = spec.mlp_sizes();
        if r.layers.len() != sizes.len() - 1 {
            return Err(field_err(
                "layers",
                format!("{} layers for {} hidden widths", r.layers.len(), spec.hidden.len()),
            ));
        }
        let mut layers = Vec::with_capacity(r.layers.len());
        for (i, layer) in r.layers.into_iter().enumerate() {
            let (n_in, n_out) = (sizes[i], sizes[i + 1]);
            let weight = matrix_field(&layer.weight, n_out, n_in, &format!("layers[{i}].weight"))?;
            if layer.bias.len() != n_out {
                return Err(field_err(
                    &format!("layers[{i}].bias"),
                    format!("expected {n_out} entries, found {}", layer.bias.len()),
                ));
            }
            layers.push(Layer {
                weight,
                bias: layer.bias,
            });
        }
        if r.embeddings.len() < spec.num_concepts + 1 {
            return Err(field_err(
                "embeddings",
                format!(
                    "{} rows cannot hold K = {} concepts plus null",
                    r.embeddings.len(),
                    spec.num_concepts
                ),
            ));
        }
        let embeddings = matrix_field(&r.embeddings, r.embeddings.len(), spec.concept_dim, "embeddings")?;
        for b in &r.provenance.bindings {
            if b.token <= spec.num_concepts || b.token >= embeddings.rows() || b.concept >= spec.num_concepts {
                return Err(field_err(
                    "provenance.bindings",
                    format!("token {} → concept {} is not a rare-token binding", b.token, b.concept),
                ));
            }
        }
        let mlp = Mlp::new(layers).map_err(|e| field_err("layers", e.to_string()))?;
        let model =
            ConditionalDenoiser::from_parts(spec, mlp, embeddings).map_err(|e| field_err("dims", e.to_string()))?;
        Ok(Self {
            model,
            provenance: r.provenance,
        })
    }

    /// Token to sample for `concept`: its rare-token binding when one exists.
    pub fn token_for(&self, concept: usize) -> usize {
        self.provenance
            .bindings
            .iter()
            .rev()
            .find(|b| b.concept == concept)
            .map_or(concept, |b| b.token)
    }
}

fn field_err(field: &str, reason: impl Into<String>) -> Error {
    Error::CheckpointField {
        field: field.into(),
        reason: reason.into(),
    }
}

fn matrix_field(rows: &[Vec<f64>], n_rows: usize, n_cols: usize, field: &str) -> Result<Matrix> {
    if rows.len() != n_rows {
        return Err(field_err(
            field,
            format!("expected {n_rows} rows, found {}", rows.len()),
        ));
    }
    if let Some((r, row)) = rows.iter().enumerate().find(|(_, row)| row.len() != n_cols) {
        return Err(field_err(
            &format!("{field}[{r}]"),
            format!("expected {n_cols} columns, found {}", row.len()),
        ));
    }
    Matrix::from_rows(rows).map_err(|e| field_err(field, e.to_string()))
}

/// Creates parent directories as needed.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let spec = DenoiserSpec {
            hidden: vec![5],
            ..DenoiserSpec::reference()
        };
        let model = ConditionalDenoiser::random(spec, 3).unwrap();
        Checkpoint::new(model, Provenance::root("train", 3, "abc".into()))
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let id = ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let (a, b) = (ck.model.params(), back.model.params());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(back, ck);
        assert_eq!(back.id().unwrap(), id);
    }

    #[test]
    fn version_is_checked() {
        let text = small().to_json().unwrap().replace(CHECKPOINT_VERSION, "eralab-ckpt-v0");
        let err = Checkpoint::from_json(&text, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Version { ref found, .. } if found == "eralab-ckpt-v0"));
    }

    #[test]
    fn layer_dims_are_checked() {
        let mut v: Value = serde_json::from_str(&small().to_json().unwrap()).unwrap();
        v["layers"][1]["weight"].as_array_mut().unwrap().pop();
        let err = Checkpoint::from_json(&v.to_string(), Path::new("x")).unwrap_err();
        match err {
            Error::CheckpointField { field, .. } => assert_eq!(field, "layers[1].weight"),
            other => panic!("{other}"),
        }
        let mut v: Value = serde_json::from_str(&small().to_json().unwrap()).unwrap();
        v["layers"][0]["bias"].as_array_mut().unwrap().push(0.0.into());
        assert!(matches!(
            Checkpoint::from_json(&v.to_string(), Path::new("x")),
            Err(Error::CheckpointField { field, .. }) if field == "layers[0].bias"
        ));
    }

    #[test]
    fn malformed_json() {
        assert!(matches!(
            Checkpoint::from_json("{", Path::new("x")),
            Err(Error::Json { .. })
        ));
    }

    #[test]
    fn lineage_accumulates() {
        let root = small();
        let child = Checkpoint::new(
            root.model.clone(),
            Provenance::child(&root, "erase", 1, "h".into()).unwrap(),
        );
        let grandchild = Checkpoint::new(
            root.model.clone(),
            Provenance::child(&child, "probe-gg", 1, "h".into()).unwrap(),
        );
        assert_eq!(
            grandchild.provenance.lineage,
            vec![root.id().unwrap(), child.id().unwrap()]
        );
        assert_eq!(grandchild.provenance.parent, Some(child.id().unwrap()));
    }

    #[test]
    fn bindings_route_tokens() {
        let mut ck = small();
        ck.model.push_embedding(&[0.0; 8]).unwrap();
        ck.provenance.bindings.push(Binding { token: 5, concept: 0 });
        assert_eq!(ck.token_for(0), 5);
        assert_eq!(ck.token_for(1), 1);
        let back = Checkpoint::from_json(&ck.to_json().unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, ck);
        ck.provenance.bindings[0].token = 2;
        assert!(Checkpoint::from_json(&ck.to_json().unwrap(), Path::new("x")).is_err());
    }
}
