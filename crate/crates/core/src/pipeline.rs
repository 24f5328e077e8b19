//! Trains the four models in dependency order and packs them into a bundle.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actor::{train_actor, ActorConfig, ActorRun};
use crate::bundle::ModelBundle;
use crate::consult::{ConsultationEngine, DEFAULT_MAX_QUESTIONS};
use crate::decision::{train_decision, DecisionConfig, DecisionRun};
use crate::diagnosis::{train_diagnosis, DiagnosisConfig, DiagnosisRun};
use crate::env::Environment;
use crate::error::Result;
use crate::graph::KnowledgeGraph;
use crate::transe::{train_transe, TranseConfig, TranseRun};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub transe: TranseConfig,
    pub diagnosis: DiagnosisConfig,
    pub decision: DecisionConfig,
    pub actor: ActorConfig,
}

impl PipelineConfig {
    /// Defaults with every stage seeded from `seed`.
    pub fn seeded(seed: u64) -> Self {
        let mut c = Self::default();
        c.reseed(seed);
        c
    }

    pub fn reseed(&mut self, seed: u64) {
        self.transe.seed = seed;
        self.diagnosis.seed = seed.wrapping_add(1);
        self.decision.seed = seed.wrapping_add(2);
        self.actor.seed = seed.wrapping_add(3);
    }
}

#[derive(Clone, Debug, Default)]
pub struct StageTimes {
    pub transe: Duration,
    pub diagnosis: Duration,
    pub decision: Duration,
    pub actor: Duration,
}

pub struct PipelineRun {
    pub bundle: ModelBundle,
    pub transe: TranseRun,
    pub diagnosis: DiagnosisRun,
    pub decision: DecisionRun,
    pub actor: ActorRun,
    pub times: StageTimes,
}

pub fn train_pipeline(graph: &KnowledgeGraph, cfg: &PipelineConfig) -> Result<PipelineRun> {
    let mut times = StageTimes::default();

    let t = Instant::now();
    let transe = train_transe(
        graph,
        &cfg.transe,
        &mut ChaCha8Rng::seed_from_u64(cfg.transe.seed),
    )?;
    times.transe = t.elapsed();
    log::info!("embeddings trained in {:.1?}", times.transe);

    let t = Instant::now();
    let diagnosis = train_diagnosis(graph, &transe.table, &cfg.diagnosis)?;
    times.diagnosis = t.elapsed();
    log::info!("diagnosis network trained in {:.1?}", times.diagnosis);
    let table = diagnosis
        .table
        .clone()
        .unwrap_or_else(|| transe.table.clone());

    let t = Instant::now();
    let decision = train_decision(graph, &table, &diagnosis.model, &cfg.decision)?;
    times.decision = t.elapsed();
    log::info!("decision network trained in {:.1?}", times.decision);

    let t = Instant::now();
    let env = Environment {
        graph,
        tab: &table,
        diagnoser: &diagnosis.model,
        stop: &decision.model,
        evidence_depth: diagnosis.model.evidence_depth,
        cfg: &cfg.actor.env,
    };
    let actor = train_actor(env, &cfg.actor)?;
    times.actor = t.elapsed();
    log::info!("actor trained in {:.1?}", times.actor);

    let configs = BTreeMap::from([
        ("embeddings".to_string(), config_value(&cfg.transe)),
        ("diagnosis".to_string(), config_value(&cfg.diagnosis)),
        ("decision".to_string(), config_value(&cfg.decision)),
        ("actor".to_string(), config_value(&cfg.actor)),
    ]);
    let bundle = ModelBundle {
        fingerprint: graph.fingerprint(),
        table,
        diagnosis: diagnosis.model.clone(),
        decision: decision.model.clone(),
        actor: actor.model.clone(),
        configs,
    };
    bundle.validate()?;
    Ok(PipelineRun {
        bundle,
        transe,
        diagnosis,
        decision,
        actor,
        times,
    })
}

fn config_value<T: Serialize>(cfg: &T) -> serde_json::Value {
    serde_json::to_value(cfg).expect("configs serialize")
}

impl ConsultationEngine {
    /// Engine backed by a trained bundle.
    pub fn from_bundle(graph: Arc<KnowledgeGraph>, bundle: &ModelBundle) -> Self {
        Self {
            graph,
            table: Arc::new(bundle.table.clone()),
            diagnoser: Arc::new(bundle.diagnosis.clone()),
            stop: Arc::new(bundle.decision.clone()),
            actor: Arc::new(bundle.actor.clone()),
            evidence_depth: bundle.diagnosis.evidence_depth,
            max_questions: DEFAULT_MAX_QUESTIONS,
        }
    }
}
