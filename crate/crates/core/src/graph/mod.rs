//! The symptom → disease knowledge graph.
//!
//! Entities carry dense ids assigned in file order. Every triple points from a
//! symptom (head) to a disease (tail); adjacency lists expose each edge from
//! both endpoints so traversal can walk the graph in either direction.

mod io;
mod synth;

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_graph, load_graph_dir, save_graph, ENTITIES_FILE, TRIPLES_FILE};
pub use synth::{generate_synthetic_graph, SynthParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

impl EntityId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl RelationId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Disease,
    Symptom,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Disease => "disease",
            EntityKind::Symptom => "symptom",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub id: EntityId,
    pub name: String,
    pub kind: EntityKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// Orientation of a traversed edge relative to the node the walk leaves.
///
/// `Outgoing` follows the stored head → tail direction, `Incoming` walks it
/// backwards (the edge points into the node being left).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Outgoing,
    Incoming,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub relation: RelationId,
    pub neighbor: EntityId,
    pub direction: Direction,
}

/// An entity reached by traversal together with the (shortest) path used.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reached {
    pub entity: EntityId,
    pub path: Vec<(RelationId, Direction)>,
}

impl Reached {
    pub fn depth(&self) -> usize {
        self.path.len()
    }
}

/// A simulated patient: a disease and the symptoms that survived dropout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientCase {
    pub disease: EntityId,
    pub present_symptoms: BTreeSet<EntityId>,
    pub full_symptoms: BTreeSet<EntityId>,
}

#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    relations: Vec<String>,
    triples: Vec<Triple>,
    triple_set: HashSet<Triple>,
    adjacency: Vec<Vec<Edge>>,
    diseases: Vec<EntityId>,
    symptoms: Vec<EntityId>,
    // entity index -> position within `diseases` / `symptoms`
    class_pos: Vec<usize>,
}

impl KnowledgeGraph {
    /// Builds and validates a graph. Entity ids must equal their position.
    pub fn new(
        entities: Vec<Entity>,
        relations: Vec<String>,
        triples: Vec<Triple>,
    ) -> Result<Self> {
        for (i, e) in entities.iter().enumerate() {
            if e.id.index() != i {
                return Err(Error::InvalidParameter(format!(
                    "entity ids must be dense and in order: position {i} holds id {}",
                    e.id
                )));
            }
        }
        let n = entities.len();
        let mut triple_set = HashSet::with_capacity(triples.len());
        let mut adjacency = vec![Vec::new(); n];
        for t in &triples {
            for id in [t.head, t.tail] {
                if id.index() >= n {
                    return Err(Error::UnknownEntity(id));
                }
            }
            if t.relation.index() >= relations.len() {
                return Err(Error::InvalidParameter(format!(
                    "unknown relation id {}",
                    t.relation.0
                )));
            }
            let (hk, tk) = (entities[t.head.index()].kind, entities[t.tail.index()].kind);
            if hk != EntityKind::Symptom || tk != EntityKind::Disease {
                return Err(Error::EdgeDirection {
                    file: "<memory>".into(),
                    line: 0,
                    head_kind: hk,
                    tail_kind: tk,
                });
            }
            if !triple_set.insert(*t) {
                return Err(Error::DuplicateTriple {
                    file: "<memory>".into(),
                    line: 0,
                    head: t.head.0 as u64,
                    relation: relations[t.relation.index()].clone(),
                    tail: t.tail.0 as u64,
                });
            }
            adjacency[t.head.index()].push(Edge {
                relation: t.relation,
                neighbor: t.tail,
                direction: Direction::Outgoing,
            });
            adjacency[t.tail.index()].push(Edge {
                relation: t.relation,
                neighbor: t.head,
                direction: Direction::Incoming,
            });
        }

        let mut diseases = Vec::new();
        let mut symptoms = Vec::new();
        let mut class_pos = Vec::with_capacity(n);
        for e in &entities {
            match e.kind {
                EntityKind::Disease => {
                    class_pos.push(diseases.len());
                    diseases.push(e.id);
                }
                EntityKind::Symptom => {
                    class_pos.push(symptoms.len());
                    symptoms.push(e.id);
                }
            }
        }
        for &d in &diseases {
            if adjacency[d.index()].is_empty() {
                return Err(Error::IsolatedDisease(d));
            }
        }

        Ok(Self {
            entities,
            relations,
            triples,
            triple_set,
            adjacency,
            diseases,
            symptoms,
            class_pos,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn n_diseases(&self) -> usize {
        self.diseases.len()
    }

    pub fn n_symptoms(&self) -> usize {
        self.symptoms.len()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, id: EntityId) -> Result<&Entity> {
        self.entities
            .get(id.index())
            .ok_or(Error::UnknownEntity(id))
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triple_set.contains(t)
    }

    /// Disease ids in ascending order.
    pub fn diseases(&self) -> &[EntityId] {
        &self.diseases
    }

    /// Symptom ids in ascending order.
    pub fn symptoms(&self) -> &[EntityId] {
        &self.symptoms
    }

    pub fn edges(&self, id: EntityId) -> Result<&[Edge]> {
        self.adjacency
            .get(id.index())
            .map(Vec::as_slice)
            .ok_or(Error::UnknownEntity(id))
    }

    pub fn kind(&self, id: EntityId) -> Result<EntityKind> {
        Ok(self.entity(id)?.kind)
    }

    pub fn is_symptom(&self, id: EntityId) -> bool {
        matches!(self.entities.get(id.index()), Some(e) if e.kind == EntityKind::Symptom)
    }

    pub fn is_disease(&self, id: EntityId) -> bool {
        matches!(self.entities.get(id.index()), Some(e) if e.kind == EntityKind::Disease)
    }

    /// Position of a disease among `diseases()`.
    pub fn disease_position(&self, id: EntityId) -> Result<usize> {
        if self.is_disease(id) {
            Ok(self.class_pos[id.index()])
        } else {
            Err(Error::NotADisease(id))
        }
    }

    /// Position of a symptom among `symptoms()`.
    pub fn symptom_position(&self, id: EntityId) -> Result<usize> {
        if self.is_symptom(id) {
            Ok(self.class_pos[id.index()])
        } else {
            Err(Error::NotASymptom(id))
        }
    }

    /// Symptoms attached to a disease, ascending.
    pub fn symptoms_of(&self, disease: EntityId) -> Result<BTreeSet<EntityId>> {
        if !self.is_disease(disease) {
            return Err(Error::NotADisease(disease));
        }
        Ok(self.adjacency[disease.index()]
            .iter()
            .map(|e| e.neighbor)
            .collect())
    }

    /// Diseases a symptom points to, ascending.
    pub fn diseases_of(&self, symptom: EntityId) -> Result<BTreeSet<EntityId>> {
        if !self.is_symptom(symptom) {
            return Err(Error::NotASymptom(symptom));
        }
        Ok(self.adjacency[symptom.index()]
            .iter()
            .map(|e| e.neighbor)
            .collect())
    }

    /// Content hash over the canonical TSV serialization.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(io::render_entities(self).as_bytes());
        hasher.update(io::render_triples(self).as_bytes());
        hex::encode(hasher.finalize())
    }
}

/// Breadth-first walk from `start`, treating edges as undirected.
///
/// Returns every entity within `depth` hops (start excluded), each with the
/// first shortest path found in adjacency order.
pub fn neighbors_within_depth(
    graph: &KnowledgeGraph,
    start: EntityId,
    depth: usize,
) -> Result<Vec<Reached>> {
    neighbors_within_depth_from(graph, &[start], depth)
}

/// Multi-source variant: all `starts` sit at depth 0 and are excluded.
pub fn neighbors_within_depth_from(
    graph: &KnowledgeGraph,
    starts: &[EntityId],
    depth: usize,
) -> Result<Vec<Reached>> {
    if !(1..=2).contains(&depth) {
        return Err(Error::InvalidDepth(depth));
    }
    bfs(graph, starts, depth)
}

pub(crate) fn bfs(
    graph: &KnowledgeGraph,
    starts: &[EntityId],
    depth: usize,
) -> Result<Vec<Reached>> {
    let n = graph.n_entities();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::new();
    for &s in starts {
        if s.index() >= n {
            return Err(Error::UnknownEntity(s));
        }
        if !seen[s.index()] {
            seen[s.index()] = true;
            queue.push_back((s, Vec::new()));
        }
    }
    let mut out = Vec::new();
    while let Some((node, path)) = queue.pop_front() {
        if path.len() == depth {
            continue;
        }
        for edge in &graph.adjacency[node.index()] {
            let next = edge.neighbor;
            if seen[next.index()] {
                continue;
            }
            seen[next.index()] = true;
            let mut p: Vec<(RelationId, Direction)> = path.clone();
            p.push((edge.relation, edge.direction));
            out.push(Reached {
                entity: next,
                path: p.clone(),
            });
            queue.push_back((next, p));
        }
    }
    Ok(out)
}

/// Draws a disease uniformly and drops each of its symptoms with `drop_prob`.
///
/// At least one symptom always survives.
pub fn sample_patient_case<R: Rng + ?Sized>(
    graph: &KnowledgeGraph,
    rng: &mut R,
    drop_prob: f64,
) -> Result<PatientCase> {
    let disease = *graph
        .diseases()
        .choose(rng)
        .ok_or(Error::Empty("graph has no diseases"))?;
    case_for_disease(graph, disease, rng, drop_prob)
}

/// Same as [`sample_patient_case`] with the disease fixed.
pub fn case_for_disease<R: Rng + ?Sized>(
    graph: &KnowledgeGraph,
    disease: EntityId,
    rng: &mut R,
    drop_prob: f64,
) -> Result<PatientCase> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::InvalidParameter(format!(
            "drop probability must be in [0, 1), got {drop_prob}"
        )));
    }
    let full = graph.symptoms_of(disease)?;
    if full.is_empty() {
        return Err(Error::IsolatedDisease(disease));
    }
    let mut present: BTreeSet<EntityId> = full
        .iter()
        .copied()
        .filter(|_| drop_prob == 0.0 || rng.random::<f64>() >= drop_prob)
        .collect();
    if present.is_empty() {
        let keep = *full
            .iter()
            .collect::<Vec<_>>()
            .choose(rng)
            .expect("non-empty");
        present.insert(*keep);
    }
    Ok(PatientCase {
        disease,
        present_symptoms: present,
        full_symptoms: full,
    })
}

/// Replaces the tail with a uniformly drawn different entity such that the
/// result is not a true triple.
pub fn corrupt_triple<R: Rng + ?Sized>(
    graph: &KnowledgeGraph,
    triple: &Triple,
    rng: &mut R,
) -> Result<Triple> {
    let n = graph.n_entities();
    let candidate = |tail: usize| Triple {
        tail: EntityId(tail as u32),
        ..*triple
    };
    // rejection sampling first; the graph is sparse so this almost always hits
    if n > 1 {
        for _ in 0..64 {
            let mut t = rng.random_range(0..n - 1);
            if t >= triple.tail.index() {
                t += 1;
            }
            let c = candidate(t);
            if !graph.contains(&c) {
                return Ok(c);
            }
        }
    }
    let pool: Vec<usize> = (0..n)
        .filter(|&t| t != triple.tail.index() && !graph.contains(&candidate(t)))
        .collect();
    match pool.choose(rng) {
        Some(&t) => Ok(candidate(t)),
        None => Err(Error::NoCorruption {
            head: triple.head,
            relation: triple.relation.index(),
            tail: triple.tail,
        }),
    }
}
