//! Sufficiency judge: given an evidence vector, the probability that the
//! diagnosis network would already name the right disease.
//!
//! Labels come from the trained diagnosis model: a sample is positive iff its
//! top-1 diagnosis equals the sampled disease.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnosis::{evidence_vector, rank, DiagnosisModel, HIDDEN};
use crate::env::StopRule;
use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph, PatientCase};
use crate::tensor::{binary_cross_entropy, binary_cross_entropy_grad, Head, Matrix, Mlp3, Vector};
use crate::transe::EmbeddingTable;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const MAX_DEGENERATE_EPOCHS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionModel {
    pub net: Mlp3,
    pub threshold: f64,
}

impl DecisionModel {
    pub fn new<R: Rng + ?Sized>(k: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            net: Mlp3::new(k, hidden, 1, Head::Sigmoid, rng),
            threshold: DEFAULT_THRESHOLD,
        }
    }

    /// Sigmoid output in (0, 1); compare against `threshold`.
    pub fn sufficiency(&self, x: &Vector) -> Result<f64> {
        let (y, _) = self.net.forward(x)?;
        Ok(y[0])
    }
}

impl StopRule for DecisionModel {
    fn sufficiency(&self, _evidence: &[EntityId], x: &Vector) -> Result<f64> {
        DecisionModel::sufficiency(self, x)
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }
}

/// 1 iff the diagnosis model ranks `case.disease` first on `evidence`.
pub fn label_sample(
    diag: &DiagnosisModel,
    case: &PatientCase,
    evidence: &[EntityId],
    tab: &EmbeddingTable,
    graph: &KnowledgeGraph,
) -> Result<bool> {
    if evidence.is_empty() {
        return Err(Error::Empty("evidence"));
    }
    let ranked = diag.diagnose_evidence(tab, graph, evidence)?;
    Ok(ranked[0].disease == case.disease)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionConfig {
    pub epochs: usize,
    pub batch: usize,
    pub minibatch: usize,
    /// Bounds of the per-case symptom retention fraction.
    pub retention: (f64, f64),
    pub lr: f64,
    pub seed: u64,
    pub hidden: usize,
    pub threshold: f64,
    /// Multiplies the loss of positive samples when set.
    pub positive_weight: Option<f64>,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch: 500,
            minibatch: 20,
            retention: (0.1, 1.0),
            lr: 0.005,
            seed: 0,
            hidden: HIDDEN,
            threshold: DEFAULT_THRESHOLD,
            positive_weight: None,
        }
    }
}

/// A disease with a random subset of its symptoms, retention fraction drawn
/// uniformly from `retention`. At least one symptom survives.
pub fn sample_partial_case<R: Rng + ?Sized>(
    graph: &KnowledgeGraph,
    retention: (f64, f64),
    rng: &mut R,
) -> Result<PatientCase> {
    let (lo, hi) = retention;
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "bad retention range ({lo}, {hi})"
        )));
    }
    let disease = *graph
        .diseases()
        .choose(rng)
        .ok_or(Error::Empty("graph has no diseases"))?;
    let full = graph.symptoms_of(disease)?;
    let keep = if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    };
    let mut present: BTreeSet<EntityId> = full
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < keep)
        .collect();
    if present.is_empty() {
        let all: Vec<EntityId> = full.iter().copied().collect();
        present.insert(*all.choose(rng).expect("non-empty"));
    }
    Ok(PatientCase {
        disease,
        present_symptoms: present,
        full_symptoms: full,
    })
}

#[derive(Clone, Debug)]
pub struct DecisionRun {
    pub model: DecisionModel,
    /// Mean BCE per trained epoch.
    pub loss_trace: Vec<f64>,
    /// Positive-label rate per epoch, including skipped ones.
    pub positive_rates: Vec<f64>,
    pub skipped_epochs: usize,
}

pub fn train_decision(
    graph: &KnowledgeGraph,
    tab: &EmbeddingTable,
    diag: &DiagnosisModel,
    cfg: &DecisionConfig,
) -> Result<DecisionRun> {
    if !(0.0 < cfg.threshold && cfg.threshold < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold must lie in (0, 1), got {}",
            cfg.threshold
        )));
    }
    if cfg.minibatch == 0 || cfg.batch == 0 {
        return Err(Error::InvalidParameter(
            "batch sizes must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DecisionModel::new(tab.k(), cfg.hidden, &mut rng);
    model.threshold = cfg.threshold;
    let pos_w = cfg.positive_weight.unwrap_or(1.0);

    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut rates = Vec::with_capacity(cfg.epochs);
    let mut skipped = 0;
    let mut degenerate_run = 0;

    for epoch in 0..cfg.epochs {
        let mut xs = Matrix::zeros((cfg.batch, tab.k()));
        let mut truth = Vec::with_capacity(cfg.batch);
        for i in 0..cfg.batch {
            let case = sample_partial_case(graph, cfg.retention, &mut rng)?;
            let evidence: Vec<EntityId> = case.present_symptoms.iter().copied().collect();
            xs.row_mut(i).assign(&evidence_vector(
                tab,
                graph,
                &evidence,
                diag.evidence_depth,
            )?);
            truth.push(case.disease);
        }
        let (probs, _) = diag.net.forward_batch(&xs)?;
        let mut samples: Vec<(Vector, bool)> = Vec::with_capacity(cfg.batch);
        for (i, (row, d)) in probs.rows().into_iter().zip(&truth).enumerate() {
            let y = rank(&diag.diseases, &row.to_owned())[0].disease == *d;
            samples.push((xs.row(i).to_owned(), y));
        }
        let positives = samples.iter().filter(|(_, y)| *y).count();
        let rate = positives as f64 / samples.len() as f64;
        rates.push(rate);
        if positives == 0 || positives == samples.len() {
            skipped += 1;
            degenerate_run += 1;
            log::warn!(
                "decision epoch {epoch}: all labels equal (positive rate {rate:.3}), skipped"
            );
            if degenerate_run >= MAX_DEGENERATE_EPOCHS {
                return Err(Error::DegenerateLabels {
                    epochs: degenerate_run,
                    positive_rate: rate,
                });
            }
            continue;
        }
        degenerate_run = 0;
        samples.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for chunk in samples.chunks(cfg.minibatch) {
            let mut xs = Matrix::zeros((chunk.len(), tab.k()));
            for (i, (x, _)) in chunk.iter().enumerate() {
                xs.row_mut(i).assign(x);
            }
            let (out, cache) = model.net.forward_batch(&xs)?;
            let mut d = Matrix::zeros((chunk.len(), 1));
            for (i, (_, y)) in chunk.iter().enumerate() {
                let w = if *y { pos_w } else { 1.0 };
                epoch_loss += w * binary_cross_entropy(out[[i, 0]], *y);
                d[[i, 0]] = w * binary_cross_entropy_grad(out[[i, 0]], *y) / chunk.len() as f64;
            }
            let grads = model.net.backward_batch(&cache, &d)?;
            model.net.apply_sgd(&grads, cfg.lr)?;
        }
        let mean = epoch_loss / samples.len() as f64;
        if epoch % 100 == 0 {
            log::debug!("decision epoch {epoch}: mean BCE {mean:.4}, positive rate {rate:.3}");
        }
        trace.push(mean);
    }

    Ok(DecisionRun {
        model,
        loss_trace: trace,
        positive_rates: rates,
        skipped_epochs: skipped,
    })
}
