//! Evidence vectors and the disease classifier.
//!
//! An evidence vector sums embedding vectors. Entities handed in directly
//! contribute their own vector. Entities reached by walking the graph
//! contribute a *virtual* vector: the reached entity translated back along
//! the walked path, `e − Σ ±r`, where an edge walked head → tail counts `+r`
//! and one walked tail → head counts `−r`. With `h + r ≈ t` this maps a
//! reached tail back onto its head and vice versa.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Diagnoser;
use crate::error::{Error, Result};
use crate::graph::{bfs, case_for_disease, Direction, EntityId, KnowledgeGraph, RelationId};
use crate::tensor::{cross_entropy_softmax, Head, Matrix, Mlp3, Vector};
use crate::transe::EmbeddingTable;

pub const DEFAULT_EVIDENCE_DEPTH: usize = 2;
pub const HIDDEN: usize = 256;

/// One summand of an evidence vector: `entity − Σ sign·relation`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceTerm {
    pub entity: EntityId,
    pub translation: Vec<(RelationId, f64)>,
}

fn path_translation(path: &[(RelationId, Direction)]) -> Vec<(RelationId, f64)> {
    path.iter()
        .map(|&(r, d)| match d {
            Direction::Outgoing => (r, 1.0),
            Direction::Incoming => (r, -1.0),
        })
        .collect()
}

/// Terms of the evidence vector for a seed set expanded `depth` hops (0..=2).
pub fn evidence_terms(
    graph: &KnowledgeGraph,
    seeds: &[EntityId],
    depth: usize,
) -> Result<Vec<EvidenceTerm>> {
    if seeds.is_empty() {
        return Err(Error::Empty("evidence"));
    }
    if depth > 2 {
        return Err(Error::InvalidDepth(depth));
    }
    let seeds: BTreeSet<EntityId> = seeds.iter().copied().collect();
    for &s in &seeds {
        graph.entity(s)?;
    }
    let mut terms: Vec<EvidenceTerm> = seeds
        .iter()
        .map(|&e| EvidenceTerm {
            entity: e,
            translation: Vec::new(),
        })
        .collect();
    if depth > 0 {
        let starts: Vec<EntityId> = seeds.iter().copied().collect();
        let mut reached = bfs(graph, &starts, depth)?;
        reached.sort_by_key(|r| r.entity);
        terms.extend(reached.into_iter().map(|r| EvidenceTerm {
            entity: r.entity,
            translation: path_translation(&r.path),
        }));
    }
    Ok(terms)
}

/// Terms of the disease-centred neighbourhood: depth-1 entities unchanged,
/// depth-2 entities virtual, the centre itself excluded. `keep` filters nodes.
pub fn neighborhood_terms(
    graph: &KnowledgeGraph,
    disease: EntityId,
    keep: impl Fn(EntityId) -> bool,
) -> Result<Vec<EvidenceTerm>> {
    if !graph.is_disease(disease) {
        return Err(Error::NotADisease(disease));
    }
    let mut reached = bfs(graph, &[disease], 2)?;
    reached.sort_by_key(|r| r.entity);
    let terms: Vec<EvidenceTerm> = reached
        .into_iter()
        .filter(|r| keep(r.entity))
        .map(|r| EvidenceTerm {
            entity: r.entity,
            translation: if r.depth() == 1 {
                Vec::new()
            } else {
                path_translation(&r.path)
            },
        })
        .collect();
    if terms.is_empty() {
        return Err(Error::Empty("neighbourhood after dropout"));
    }
    Ok(terms)
}

pub fn sum_terms(tab: &EmbeddingTable, terms: &[EvidenceTerm]) -> Result<Vector> {
    if terms.is_empty() {
        return Err(Error::Empty("evidence"));
    }
    let mut out = Vector::zeros(tab.k());
    for t in terms {
        let mut v = tab.entity(t.entity)?.to_owned();
        for &(r, sign) in &t.translation {
            v.scaled_add(-sign, &tab.relation(r)?);
        }
        out += &v;
    }
    Ok(out)
}

/// Evidence vector of a seed set; see the module docs for the summation rule.
pub fn evidence_vector(
    tab: &EmbeddingTable,
    graph: &KnowledgeGraph,
    seeds: &[EntityId],
    depth: usize,
) -> Result<Vector> {
    sum_terms(tab, &evidence_terms(graph, seeds, depth)?)
}

/// Disease-centred depth-2 neighbourhood vector.
pub fn neighborhood_vector(
    tab: &EmbeddingTable,
    graph: &KnowledgeGraph,
    disease: EntityId,
    keep: impl Fn(EntityId) -> bool,
) -> Result<Vector> {
    sum_terms(tab, &neighborhood_terms(graph, disease, keep)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedDisease {
    pub disease: EntityId,
    pub probability: f64,
}

/// How training inputs are built for a sampled disease.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagnosisInput {
    /// Expand the disease's retained symptoms exactly as live evidence is expanded.
    SymptomEvidence,
    /// Sum the disease-centred depth-2 neighbourhood.
    DiseaseNeighborhood,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisConfig {
    pub epochs: usize,
    pub batch: usize,
    pub minibatch: usize,
    pub drop_prob: f64,
    pub lr: f64,
    pub seed: u64,
    pub hidden: usize,
    pub evidence_depth: usize,
    pub input: DiagnosisInput,
    pub fine_tune_embeddings: bool,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch: 500,
            minibatch: 20,
            drop_prob: 0.1,
            lr: 0.005,
            seed: 0,
            hidden: HIDDEN,
            evidence_depth: DEFAULT_EVIDENCE_DEPTH,
            input: DiagnosisInput::SymptomEvidence,
            fine_tune_embeddings: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosisModel {
    pub net: Mlp3,
    /// Output position → disease id, ascending.
    pub diseases: Vec<EntityId>,
    /// Hops used when expanding evidence into a vector.
    pub evidence_depth: usize,
}

impl DiagnosisModel {
    pub fn new<R: Rng + ?Sized>(
        graph: &KnowledgeGraph,
        k: usize,
        hidden: usize,
        evidence_depth: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            net: Mlp3::new(k, hidden, graph.n_diseases(), Head::Softmax, rng),
            diseases: graph.diseases().to_vec(),
            evidence_depth,
        }
    }

    /// Ranked diagnosis for an evidence vector.
    pub fn diagnose(&self, x: &Vector) -> Result<Vec<RankedDisease>> {
        let (probs, _) = self.net.forward(x)?;
        Ok(rank(&self.diseases, &probs))
    }

    /// Convenience: expand the evidence set and diagnose.
    pub fn diagnose_evidence(
        &self,
        tab: &EmbeddingTable,
        graph: &KnowledgeGraph,
        evidence: &[EntityId],
    ) -> Result<Vec<RankedDisease>> {
        self.diagnose(&evidence_vector(tab, graph, evidence, self.evidence_depth)?)
    }
}

/// Sorts descending by probability, ties by ascending id.
pub fn rank(ids: &[EntityId], probs: &Vector) -> Vec<RankedDisease> {
    let mut out: Vec<RankedDisease> = ids
        .iter()
        .zip(probs.iter())
        .map(|(&disease, &probability)| RankedDisease {
            disease,
            probability,
        })
        .collect();
    out.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then(a.disease.cmp(&b.disease))
    });
    out
}

impl Diagnoser for DiagnosisModel {
    fn diagnose(&self, _evidence: &[EntityId], x: &Vector) -> Result<Vec<RankedDisease>> {
        DiagnosisModel::diagnose(self, x)
    }
}

/// Builds one training input for `disease` under the configured scheme.
pub(crate) fn training_terms<R: Rng + ?Sized>(
    graph: &KnowledgeGraph,
    disease: EntityId,
    input: DiagnosisInput,
    depth: usize,
    drop_prob: f64,
    rng: &mut R,
) -> Result<Vec<EvidenceTerm>> {
    match input {
        DiagnosisInput::SymptomEvidence => {
            let case = case_for_disease(graph, disease, rng, drop_prob)?;
            let seeds: Vec<EntityId> = case.present_symptoms.into_iter().collect();
            evidence_terms(graph, &seeds, depth)
        }
        DiagnosisInput::DiseaseNeighborhood => {
            let all = neighborhood_terms(graph, disease, |_| true)?;
            let mut kept: Vec<EvidenceTerm> = all
                .iter()
                .filter(|_| drop_prob == 0.0 || rng.random::<f64>() >= drop_prob)
                .cloned()
                .collect();
            if kept.is_empty() {
                kept.push(all.choose(rng).expect("non-empty").clone());
            }
            Ok(kept)
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiagnosisRun {
    pub model: DiagnosisModel,
    /// Mean cross-entropy per epoch.
    pub loss_trace: Vec<f64>,
    /// Present only when embeddings were fine-tuned.
    pub table: Option<EmbeddingTable>,
}

/// Trains the classifier on sampled diseases with node dropout.
pub fn train_diagnosis(
    graph: &KnowledgeGraph,
    tab: &EmbeddingTable,
    cfg: &DiagnosisConfig,
) -> Result<DiagnosisRun> {
    if tab.n_entities() != graph.n_entities() || tab.n_relations() != graph.n_relations() {
        return Err(Error::shape(
            format!("embedding table for {} entities", graph.n_entities()),
            tab.n_entities(),
        ));
    }
    if cfg.minibatch == 0 {
        return Err(Error::InvalidParameter("minibatch must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DiagnosisModel::new(graph, tab.k(), cfg.hidden, cfg.evidence_depth, &mut rng);
    let mut table = tab.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut samples = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let d = *graph
                .diseases()
                .choose(&mut rng)
                .expect("graph has diseases");
            let terms = training_terms(
                graph,
                d,
                cfg.input,
                cfg.evidence_depth,
                cfg.drop_prob,
                &mut rng,
            )?;
            samples.push((terms, graph.disease_position(d)?));
        }
        samples.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for chunk in samples.chunks(cfg.minibatch) {
            let mut xs = Matrix::zeros((chunk.len(), table.k()));
            for (i, (terms, _)) in chunk.iter().enumerate() {
                xs.row_mut(i).assign(&sum_terms(&table, terms)?);
            }
            let (probs, cache) = model.net.forward_batch(&xs)?;
            let mut d_logits = probs.clone();
            for (i, (_, target)) in chunk.iter().enumerate() {
                epoch_loss += cross_entropy_softmax(&probs.row(i).to_owned(), *target)?;
                d_logits[[i, *target]] -= 1.0;
            }
            d_logits /= chunk.len() as f64;
            let grads = model.net.backward_batch(&cache, &d_logits)?;
            if cfg.fine_tune_embeddings {
                let d_x = input_gradient(&model.net, &cache, &d_logits);
                for (i, (terms, _)) in chunk.iter().enumerate() {
                    apply_term_gradient(&mut table, terms, &d_x.row(i).to_owned(), cfg.lr)?;
                }
            }
            model.net.apply_sgd(&grads, cfg.lr)?;
        }
        let mean = epoch_loss / cfg.batch.max(1) as f64;
        if epoch % 100 == 0 {
            log::debug!("diagnosis epoch {epoch}: mean CE {mean:.4}");
        }
        trace.push(mean);
    }

    Ok(DiagnosisRun {
        model,
        loss_trace: trace,
        table: cfg.fine_tune_embeddings.then_some(table),
    })
}

/// Gradient of the loss with respect to each batch input row.
pub(crate) fn input_gradient(
    net: &Mlp3,
    cache: &crate::tensor::BatchCache,
    d_logits: &Matrix,
) -> Matrix {
    let mut d_hidden = d_logits.dot(&net.w2.t());
    d_hidden.zip_mut_with(&cache.pre_hidden, |g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    d_hidden.dot(&net.w1.t())
}

fn apply_term_gradient(
    tab: &mut EmbeddingTable,
    terms: &[EvidenceTerm],
    d_x: &Vector,
    lr: f64,
) -> Result<()> {
    for t in terms {
        tab.entity_vecs
            .row_mut(t.entity.index())
            .scaled_add(-lr, d_x);
        for &(r, sign) in &t.translation {
            tab.relation_vecs
                .row_mut(r.index())
                .scaled_add(lr * sign, d_x);
        }
    }
    if !tab.entity_vecs.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("fine-tuned embeddings"));
    }
    Ok(())
}

/// Fraction of diseases ranked first given their full symptom set.
pub fn full_evidence_accuracy(
    model: &DiagnosisModel,
    tab: &EmbeddingTable,
    graph: &KnowledgeGraph,
) -> Result<f64> {
    let mut hits = 0usize;
    for &d in graph.diseases() {
        let seeds: Vec<EntityId> = graph.symptoms_of(d)?.into_iter().collect();
        let ranked = model.diagnose_evidence(tab, graph, &seeds)?;
        if ranked[0].disease == d {
            hits += 1;
        }
    }
    Ok(hits as f64 / graph.n_diseases() as f64)
}
