#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use kgconsult::config;
use kgconsult_core::consult::ConsultationEngine;
use kgconsult_core::graph::{generate_synthetic_graph, KnowledgeGraph, SynthParams};
use kgconsult_core::pipeline::{train_pipeline, PipelineConfig};

/// Small enough to train in a couple of seconds.
pub const TINY_CONFIG: &str = "\
transe.k = 16
transe.rounds = 40
transe.batch = 100
diagnosis.epochs = 40
diagnosis.batch = 100
diagnosis.hidden = 32
decision.epochs = 30
decision.batch = 100
decision.hidden = 32
actor.hidden = 32
actor.min_fill = 20
actor.schedule.total_episodes = 300
actor.schedule.decay_every = 1
";

pub fn tiny_config(dir: &Path, seed: u64) -> PipelineConfig {
    let path = dir.join("tiny.conf");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    config::resolve(Some(&path), Some(seed)).unwrap()
}

pub fn desk_graph() -> KnowledgeGraph {
    generate_synthetic_graph(&SynthParams::desk()).unwrap()
}

pub fn tiny_engine(seed: u64) -> ConsultationEngine {
    let dir = tempfile::tempdir().unwrap();
    let g = desk_graph();
    let run = train_pipeline(&g, &tiny_config(dir.path(), seed)).unwrap();
    ConsultationEngine::from_bundle(Arc::new(g), &run.bundle)
}
