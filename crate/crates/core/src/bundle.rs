//! Model persistence.
//!
//! Each model lives in its own file inside a bundle directory:
//!
//! ```text
//! b"KGCM" | u32 version | u32 manifest length | manifest JSON | f64 payload | sha256
//! ```
//!
//! Integers and floats are little-endian. The manifest names the model kind,
//! the graph fingerprint, the training config and the shape of every array;
//! the payload holds the arrays back to back in manifest order. The trailing
//! digest covers every preceding byte and is checked before anything is parsed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::actor::ActorModel;
use crate::decision::DecisionModel;
use crate::diagnosis::DiagnosisModel;
use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph};
use crate::tensor::{Head, Matrix, Mlp3, Vector};
use crate::transe::EmbeddingTable;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"KGCM";
const DIGEST_LEN: usize = 32;

pub const EMBEDDINGS_FILE: &str = "embeddings.kgm";
pub const DIAGNOSIS_FILE: &str = "diagnosis.kgm";
pub const DECISION_FILE: &str = "decision.kgm";
pub const ACTOR_FILE: &str = "actor.kgm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    graph_fingerprint: String,
    arrays: Vec<ArraySpec>,
    #[serde(default)]
    meta: Value,
    #[serde(default)]
    config: Value,
    payload_sha256: String,
}

/// One named array of a model file.
pub struct Array {
    name: &'static str,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn matrix(name: &'static str, m: &Matrix) -> Array {
    Array {
        name,
        shape: m.shape().to_vec(),
        data: m.iter().copied().collect(),
    }
}

fn vector(name: &'static str, v: &Vector) -> Array {
    Array {
        name,
        shape: vec![v.len()],
        data: v.to_vec(),
    }
}

fn encode(
    kind: &str,
    fingerprint: &str,
    meta: Value,
    config: Value,
    arrays: &[Array],
) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(arrays.iter().map(|a| a.data.len() * 8).sum());
    for a in arrays {
        for v in &a.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        graph_fingerprint: fingerprint.to_string(),
        arrays: arrays
            .iter()
            .map(|a| ArraySpec {
                name: a.name.to_string(),
                shape: a.shape.clone(),
            })
            .collect(),
        meta,
        config,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let json =
        serde_json::to_vec_pretty(&manifest).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// A parsed model file.
pub struct Decoded {
    manifest: Manifest,
    arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

fn decode(path: &Path, bytes: &[u8], kind: &str) -> Result<Decoded> {
    let corrupt = |message: String| Error::CorruptModel {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 12 + DIGEST_LEN {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
        });
    }
    if &body[0..4] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let json_len = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
    let json = body
        .get(12..12 + json_len)
        .ok_or_else(|| corrupt("truncated manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.kind != kind {
        return Err(corrupt(format!(
            "expected a {kind} model, found {}",
            manifest.kind
        )));
    }
    let payload = &body[12 + json_len..];
    let mut arrays = BTreeMap::new();
    let mut at = 0usize;
    for spec in &manifest.arrays {
        let n: usize = spec.shape.iter().product();
        let chunk = payload
            .get(at..at + n * 8)
            .ok_or_else(|| corrupt(format!("payload too short for {}", spec.name)))?;
        let data = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.insert(spec.name.clone(), (spec.shape.clone(), data));
        at += n * 8;
    }
    if at != payload.len() {
        return Err(corrupt(format!(
            "{} trailing payload bytes",
            payload.len() - at
        )));
    }
    Ok(Decoded { manifest, arrays })
}

impl Decoded {
    fn take(&mut self, path: &Path, name: &str, dims: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let (shape, data) = self
            .arrays
            .remove(name)
            .ok_or_else(|| Error::CorruptModel {
                path: path.to_path_buf(),
                message: format!("missing array {name}"),
            })?;
        if shape.len() != dims {
            return Err(Error::CorruptModel {
                path: path.to_path_buf(),
                message: format!(
                    "array {name} has {} dimensions, expected {dims}",
                    shape.len()
                ),
            });
        }
        Ok((shape, data))
    }

    fn matrix(&mut self, path: &Path, name: &str) -> Result<Matrix> {
        let (shape, data) = self.take(path, name, 2)?;
        Matrix::from_shape_vec((shape[0], shape[1]), data).map_err(|e| Error::CorruptModel {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn vector(&mut self, path: &Path, name: &str) -> Result<Vector> {
        Ok(Vector::from(self.take(path, name, 1)?.1))
    }

    fn net(&mut self, path: &Path) -> Result<Mlp3> {
        let head: Head = meta_field(path, &self.manifest.meta, "head")?;
        let w1 = self.matrix(path, "w1")?;
        let b1 = self.vector(path, "b1")?;
        let w2 = self.matrix(path, "w2")?;
        let b2 = self.vector(path, "b2")?;
        Mlp3::from_parts(w1, b1, w2, b2, head)
    }
}

fn meta_field<T: for<'de> Deserialize<'de>>(path: &Path, meta: &Value, key: &str) -> Result<T> {
    let v = meta.get(key).ok_or_else(|| Error::CorruptModel {
        path: path.to_path_buf(),
        message: format!("manifest meta lacks {key}"),
    })?;
    serde_json::from_value(v.clone()).map_err(|e| Error::CorruptModel {
        path: path.to_path_buf(),
        message: format!("meta {key}: {e}"),
    })
}

fn net_arrays(net: &Mlp3) -> Vec<Array> {
    vec![
        matrix("w1", &net.w1),
        vector("b1", &net.b1),
        matrix("w2", &net.w2),
        vector("b2", &net.b2),
    ]
}

/// A model as stored on disk: parameters, the graph it was trained on and its config.
#[derive(Clone, Debug, PartialEq)]
pub struct Stored<T> {
    pub model: T,
    pub fingerprint: String,
    pub config: Value,
}

/// A model type with an on-disk form.
pub trait Persist: Sized {
    const KIND: &'static str;
    const FILE: &'static str;
    fn meta(&self) -> Value;
    fn arrays(&self) -> Vec<Array>;
    fn rebuild(path: &Path, decoded: &mut Decoded) -> Result<Self>;
}

impl Persist for EmbeddingTable {
    const KIND: &'static str = "embeddings";
    const FILE: &'static str = EMBEDDINGS_FILE;
    fn meta(&self) -> Value {
        serde_json::json!({ "k": self.k() })
    }
    fn arrays(&self) -> Vec<Array> {
        vec![
            matrix("entities", &self.entity_vecs),
            matrix("relations", &self.relation_vecs),
        ]
    }
    fn rebuild(path: &Path, d: &mut Decoded) -> Result<Self> {
        EmbeddingTable::new(d.matrix(path, "entities")?, d.matrix(path, "relations")?)
    }
}

impl Persist for DiagnosisModel {
    const KIND: &'static str = "diagnosis";
    const FILE: &'static str = DIAGNOSIS_FILE;
    fn meta(&self) -> Value {
        serde_json::json!({ "head": self.net.head, "diseases": self.diseases, "evidence_depth": self.evidence_depth })
    }
    fn arrays(&self) -> Vec<Array> {
        net_arrays(&self.net)
    }
    fn rebuild(path: &Path, d: &mut Decoded) -> Result<Self> {
        let diseases: Vec<EntityId> = meta_field(path, &d.manifest.meta, "diseases")?;
        let evidence_depth = meta_field(path, &d.manifest.meta, "evidence_depth")?;
        let net = d.net(path)?;
        if net.d_out() != diseases.len() {
            return Err(Error::shape(
                format!("{} disease outputs", diseases.len()),
                net.d_out(),
            ));
        }
        Ok(Self {
            net,
            diseases,
            evidence_depth,
        })
    }
}

impl Persist for DecisionModel {
    const KIND: &'static str = "decision";
    const FILE: &'static str = DECISION_FILE;
    fn meta(&self) -> Value {
        serde_json::json!({ "head": self.net.head, "threshold": self.threshold })
    }
    fn arrays(&self) -> Vec<Array> {
        net_arrays(&self.net)
    }
    fn rebuild(path: &Path, d: &mut Decoded) -> Result<Self> {
        let threshold = meta_field(path, &d.manifest.meta, "threshold")?;
        Ok(Self {
            net: d.net(path)?,
            threshold,
        })
    }
}

impl Persist for ActorModel {
    const KIND: &'static str = "actor";
    const FILE: &'static str = ACTOR_FILE;
    fn meta(&self) -> Value {
        serde_json::json!({ "head": self.net.head, "symptoms": self.symptoms })
    }
    fn arrays(&self) -> Vec<Array> {
        net_arrays(&self.net)
    }
    fn rebuild(path: &Path, d: &mut Decoded) -> Result<Self> {
        let symptoms: Vec<EntityId> = meta_field(path, &d.manifest.meta, "symptoms")?;
        let net = d.net(path)?;
        if net.d_out() != symptoms.len() {
            return Err(Error::shape(
                format!("{} symptom outputs", symptoms.len()),
                net.d_out(),
            ));
        }
        Ok(Self { net, symptoms })
    }
}

/// Writes one model file into `dir`, creating the directory if needed.
pub fn save_model<T: Persist>(
    dir: &Path,
    model: &T,
    fingerprint: &str,
    config: &impl Serialize,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config =
        serde_json::to_value(config).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let bytes = encode(T::KIND, fingerprint, model.meta(), config, &model.arrays())?;
    let path = dir.join(T::FILE);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads one model file from `dir`.
pub fn load_model<T: Persist>(dir: &Path) -> Result<Stored<T>> {
    let path = dir.join(T::FILE);
    if !path.exists() {
        return Err(Error::MissingModel(T::KIND));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut decoded = decode(&path, &bytes, T::KIND)?;
    let model = T::rebuild(&path, &mut decoded)?;
    Ok(Stored {
        model,
        fingerprint: decoded.manifest.graph_fingerprint,
        config: decoded.manifest.config,
    })
}

/// All four trained models for one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub fingerprint: String,
    pub table: EmbeddingTable,
    pub diagnosis: DiagnosisModel,
    pub decision: DecisionModel,
    pub actor: ActorModel,
    /// Training configs keyed by model kind.
    pub configs: BTreeMap<String, Value>,
}

impl ModelBundle {
    /// Checks the shape relations between the models.
    pub fn validate(&self) -> Result<()> {
        let k = self.table.k();
        if self.diagnosis.net.d_in() != k {
            return Err(Error::shape(
                format!("diagnosis input {k}"),
                self.diagnosis.net.d_in(),
            ));
        }
        if self.decision.net.d_in() != k || self.decision.net.d_out() != 1 {
            return Err(Error::shape(
                format!("decision {k} -> 1"),
                format!(
                    "{} -> {}",
                    self.decision.net.d_in(),
                    self.decision.net.d_out()
                ),
            ));
        }
        if self.actor.net.d_in() != 3 * k {
            return Err(Error::shape(
                format!("actor input {}", 3 * k),
                self.actor.net.d_in(),
            ));
        }
        Ok(())
    }

    pub fn check_graph(&self, graph: &KnowledgeGraph) -> Result<()> {
        let fp = graph.fingerprint();
        if fp != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                bundle: self.fingerprint.clone(),
                graph: fp,
            });
        }
        if self.table.n_entities() != graph.n_entities()
            || self.diagnosis.diseases != graph.diseases()
            || self.actor.symptoms != graph.symptoms()
        {
            return Err(Error::shape(
                "models sized for this graph",
                "different entity tables",
            ));
        }
        Ok(())
    }
}

pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    let cfg = |kind: &str| bundle.configs.get(kind).cloned().unwrap_or(Value::Null);
    save_model(
        dir,
        &bundle.table,
        &bundle.fingerprint,
        &cfg(EmbeddingTable::KIND),
    )?;
    save_model(
        dir,
        &bundle.diagnosis,
        &bundle.fingerprint,
        &cfg(DiagnosisModel::KIND),
    )?;
    save_model(
        dir,
        &bundle.decision,
        &bundle.fingerprint,
        &cfg(DecisionModel::KIND),
    )?;
    save_model(
        dir,
        &bundle.actor,
        &bundle.fingerprint,
        &cfg(ActorModel::KIND),
    )?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let table = load_model::<EmbeddingTable>(dir)?;
    let diagnosis = load_model::<DiagnosisModel>(dir)?;
    let decision = load_model::<DecisionModel>(dir)?;
    let actor = load_model::<ActorModel>(dir)?;
    for other in [
        &diagnosis.fingerprint,
        &decision.fingerprint,
        &actor.fingerprint,
    ] {
        if *other != table.fingerprint {
            return Err(Error::FingerprintMismatch {
                bundle: table.fingerprint.clone(),
                graph: other.clone(),
            });
        }
    }
    let configs = BTreeMap::from([
        (EmbeddingTable::KIND.to_string(), table.config),
        (DiagnosisModel::KIND.to_string(), diagnosis.config),
        (DecisionModel::KIND.to_string(), decision.config),
        (ActorModel::KIND.to_string(), actor.config),
    ]);
    let bundle = ModelBundle {
        fingerprint: table.fingerprint,
        table: table.model,
        diagnosis: diagnosis.model,
        decision: decision.model,
        actor: actor.model,
        configs,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Loads a bundle and checks it against `graph`.
pub fn load_bundle_for(dir: &Path, graph: &KnowledgeGraph) -> Result<ModelBundle> {
    let b = load_bundle(dir)?;
    b.check_graph(graph)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::triangle;
    use crate::transe::{init_embeddings, TranseConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle() -> (KnowledgeGraph, ModelBundle) {
        let g = triangle();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = TranseConfig {
            k: 6,
            ..Default::default()
        };
        let table = init_embeddings(g.n_entities(), g.n_relations(), &cfg, &mut rng).unwrap();
        let b = ModelBundle {
            fingerprint: g.fingerprint(),
            diagnosis: DiagnosisModel::new(&g, 6, 5, 2, &mut rng),
            decision: DecisionModel::new(6, 5, &mut rng),
            actor: ActorModel::new(&g, 6, 5, &mut rng),
            table,
            configs: BTreeMap::from([(
                "embeddings".to_string(),
                serde_json::to_value(&cfg).unwrap(),
            )]),
        };
        (g, b)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (g, b) = bundle();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let back = load_bundle_for(dir.path(), &g).unwrap();
        assert_eq!(back.table, b.table);
        assert_eq!(back.diagnosis, b.diagnosis);
        assert_eq!(back.decision, b.decision);
        assert_eq!(back.actor, b.actor);
        assert_eq!(back.configs["embeddings"], b.configs["embeddings"]);
        assert_eq!(back.configs["actor"], Value::Null);
    }

    #[test]
    fn any_flipped_byte_is_caught() {
        let (_, b) = bundle();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let path = dir.path().join(DECISION_FILE);
        let clean = fs::read(&path).unwrap();
        for i in (0..clean.len()).step_by(7) {
            let mut bytes = clean.clone();
            bytes[i] ^= 0x01;
            fs::write(&path, &bytes).unwrap();
            assert!(
                matches!(load_bundle(dir.path()), Err(Error::Checksum { .. })),
                "byte {i}"
            );
        }
    }

    #[test]
    fn missing_model_is_named() {
        let (_, b) = bundle();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        fs::remove_file(dir.path().join(ACTOR_FILE)).unwrap();
        let err = load_bundle(dir.path()).unwrap_err();
        assert!(matches!(err, Error::MissingModel("actor")));
        assert!(err.to_string().contains("actor"));
    }

    #[test]
    fn other_graph_is_rejected() {
        let (_, b) = bundle();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let other = crate::graph::fixtures::minimal();
        assert!(matches!(
            load_bundle_for(dir.path(), &other),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn future_version_is_rejected() {
        let (_, b) = bundle();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let path = dir.path().join(EMBEDDINGS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - DIGEST_LEN);
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(Error::Version { found: 2, .. })
        ));
    }
}
