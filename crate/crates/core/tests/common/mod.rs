#![allow(dead_code)]

use std::sync::Arc;

use kgconsult_core::actor::ActorModel;
use kgconsult_core::consult::ConsultationEngine;
use kgconsult_core::env::{ConstantStop, OverlapDiagnoser};
use kgconsult_core::graph::{
    generate_synthetic_graph, Entity, EntityId, EntityKind, KnowledgeGraph, RelationId,
    SynthParams, Triple,
};
use kgconsult_core::transe::{init_embeddings, EmbeddingTable, TranseConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn desk() -> KnowledgeGraph {
    generate_synthetic_graph(&SynthParams::desk()).unwrap()
}

pub fn random_table(g: &KnowledgeGraph, k: usize, seed: u64) -> EmbeddingTable {
    let cfg = TranseConfig {
        k,
        ..Default::default()
    };
    init_embeddings(
        g.n_entities(),
        g.n_relations(),
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

/// `n` diseases, each owning `m` symptoms no other disease has.
pub fn disjoint_stars(n: u32, m: u32) -> KnowledgeGraph {
    let mut entities: Vec<Entity> = (0..n)
        .map(|d| Entity {
            id: EntityId(d),
            name: format!("D{d}"),
            kind: EntityKind::Disease,
        })
        .collect();
    let mut triples = Vec::new();
    for d in 0..n {
        for j in 0..m {
            let s = n + d * m + j;
            entities.push(Entity {
                id: EntityId(s),
                name: format!("S{s}"),
                kind: EntityKind::Symptom,
            });
            triples.push(Triple {
                head: EntityId(s),
                relation: RelationId(0),
                tail: EntityId(d),
            });
        }
    }
    KnowledgeGraph::new(entities, vec!["has".into()], triples).unwrap()
}

/// Untrained actor over an overlap diagnoser.
pub fn stub_engine(graph: KnowledgeGraph, stop: ConstantStop, seed: u64) -> ConsultationEngine {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = random_table(&graph, 8, seed);
    let actor = ActorModel::new(&graph, 8, 16, &mut rng);
    ConsultationEngine {
        diagnoser: Arc::new(OverlapDiagnoser::new(&graph).unwrap()),
        graph: Arc::new(graph),
        table: Arc::new(table),
        stop: Arc::new(stop),
        actor: Arc::new(actor),
        evidence_depth: 2,
        max_questions: 30,
    }
}
