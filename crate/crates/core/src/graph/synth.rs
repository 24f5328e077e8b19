use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Entity, EntityId, EntityKind, KnowledgeGraph, RelationId, Triple};
use crate::error::{Error, Result};

pub const DEFAULT_RELATION: &str = "has";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_diseases: usize,
    pub n_symptoms: usize,
    pub per_disease: RangeInclusive<usize>,
    /// Probability that a symptom slot reuses a symptom another disease already has.
    pub overlap: f64,
    pub seed: u64,
}

impl SynthParams {
    /// The 50 × 120 graph used throughout the tests and desk-scale runs.
    pub fn desk() -> Self {
        Self {
            n_diseases: 50,
            n_symptoms: 120,
            per_disease: 4..=8,
            overlap: 0.25,
            seed: 42,
        }
    }
}

/// Generates a random symptom → disease graph.
///
/// Diseases occupy ids `0..n_diseases`, symptoms follow. Each disease draws its
/// degree uniformly from `per_disease`; each slot reuses an already-attached
/// symptom with probability `overlap`, otherwise takes a fresh one. Symptoms
/// left unattached at the end are hung on random diseases with spare degree.
pub fn generate_synthetic_graph(p: &SynthParams) -> Result<KnowledgeGraph> {
    let (lo, hi) = (*p.per_disease.start(), *p.per_disease.end());
    if p.n_diseases == 0 {
        return Err(Error::Infeasible("need at least one disease".into()));
    }
    if lo == 0 || lo > hi {
        return Err(Error::Infeasible(format!(
            "bad per-disease range {lo}..{hi}"
        )));
    }
    if p.n_symptoms < hi {
        return Err(Error::Infeasible(format!(
            "{} symptoms cannot give a disease {hi} distinct symptoms",
            p.n_symptoms
        )));
    }
    if p.n_diseases * hi < p.n_symptoms {
        return Err(Error::Infeasible(format!(
            "{} diseases with at most {hi} symptoms each cannot cover {} symptoms",
            p.n_diseases, p.n_symptoms
        )));
    }
    if !(0.0..=1.0).contains(&p.overlap) {
        return Err(Error::Infeasible(format!(
            "overlap {} outside [0, 1]",
            p.overlap
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut fresh: Vec<usize> = (0..p.n_symptoms).collect();
    fresh.shuffle(&mut rng);
    let mut used: Vec<usize> = Vec::new();
    let mut is_used = vec![false; p.n_symptoms];
    let mut per_disease: Vec<BTreeSet<usize>> = Vec::with_capacity(p.n_diseases);

    for _ in 0..p.n_diseases {
        let degree = rng.random_range(lo..=hi);
        let mut chosen = BTreeSet::new();
        while chosen.len() < degree {
            let share = !used.is_empty() && (fresh.is_empty() || rng.random::<f64>() < p.overlap);
            let pick = if share {
                let pool: Vec<usize> = used
                    .iter()
                    .copied()
                    .filter(|s| !chosen.contains(s))
                    .collect();
                pool.choose(&mut rng).copied()
            } else {
                None
            };
            let s = match pick {
                Some(s) => s,
                None => match fresh.pop() {
                    Some(s) => s,
                    None => {
                        let pool: Vec<usize> =
                            (0..p.n_symptoms).filter(|s| !chosen.contains(s)).collect();
                        *pool.choose(&mut rng).expect("n_symptoms >= hi")
                    }
                },
            };
            if !is_used[s] {
                is_used[s] = true;
                used.push(s);
            }
            chosen.insert(s);
        }
        per_disease.push(chosen);
    }

    // leftovers
    fresh.sort_unstable();
    for s in fresh {
        let open: Vec<usize> = (0..p.n_diseases)
            .filter(|&d| per_disease[d].len() < hi)
            .collect();
        let d = *open.choose(&mut rng).ok_or_else(|| {
            Error::Infeasible("no disease has spare degree for a leftover symptom".into())
        })?;
        per_disease[d].insert(s);
    }

    let mut entities = Vec::with_capacity(p.n_diseases + p.n_symptoms);
    for d in 0..p.n_diseases {
        entities.push(Entity {
            id: EntityId(d as u32),
            name: format!("disease_{d}"),
            kind: EntityKind::Disease,
        });
    }
    for s in 0..p.n_symptoms {
        entities.push(Entity {
            id: EntityId((p.n_diseases + s) as u32),
            name: format!("symptom_{s}"),
            kind: EntityKind::Symptom,
        });
    }
    let triples = per_disease
        .iter()
        .enumerate()
        .flat_map(|(d, syms)| {
            syms.iter().map(move |&s| Triple {
                head: EntityId((p.n_diseases + s) as u32),
                relation: RelationId(0),
                tail: EntityId(d as u32),
            })
        })
        .collect();
    KnowledgeGraph::new(entities, vec![DEFAULT_RELATION.to_string()], triples)
}
