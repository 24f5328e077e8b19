//! Simulated consultations scored by top-k hit rate and question count.
//!
//! Every episode draws a patient case, opens a session with one random present
//! symptom and answers truthfully. Cases come from the same graph the models
//! were trained on.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consult::ConsultationEngine;
use crate::diagnosis::{evidence_vector, RankedDisease};
use crate::error::{Error, Result};
use crate::graph::{sample_patient_case, EntityId, PatientCase};

/// Published full-scale figures, kept for comparison only.
pub const REFERENCE_TOP5: f64 = 0.97;
pub const REFERENCE_AVG_QUESTIONS: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub disease: EntityId,
    pub questions: usize,
    /// 1-based position of the true disease in the final ranking.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub policy: String,
    pub drop_prob: f64,
    pub seed: u64,
    /// Cases are drawn from the training graph, not a held-out set.
    pub samples_from_training_graph: bool,
    pub reference_top5: f64,
    pub reference_avg_questions: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub header: ReportHeader,
    pub n: usize,
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
    pub avg_questions: f64,
    pub episodes: Vec<EpisodeRecord>,
}

impl EvalReport {
    fn from_episodes(header: ReportHeader, episodes: Vec<EpisodeRecord>) -> Self {
        let n = episodes.len();
        let rate = |k: usize| {
            if n == 0 {
                0.0
            } else {
                episodes.iter().filter(|e| e.rank <= k).count() as f64 / n as f64
            }
        };
        let avg_questions = if n == 0 {
            0.0
        } else {
            episodes.iter().map(|e| e.questions as f64).sum::<f64>() / n as f64
        };
        Self {
            header,
            n,
            top1: rate(1),
            top3: rate(3),
            top5: rate(5),
            avg_questions,
            episodes,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// 1-based rank of `truth` in a ranking.
pub fn rank_of(ranked: &[RankedDisease], truth: EntityId) -> Result<usize> {
    ranked
        .iter()
        .position(|r| r.disease == truth)
        .map(|i| i + 1)
        .ok_or(Error::NotADisease(truth))
}

fn header(policy: &str, drop_prob: f64, seed: u64) -> ReportHeader {
    ReportHeader {
        policy: policy.to_string(),
        drop_prob,
        seed,
        samples_from_training_graph: true,
        reference_top5: REFERENCE_TOP5,
        reference_avg_questions: REFERENCE_AVG_QUESTIONS,
    }
}

/// Case plus the single symptom the patient volunteers.
fn draw<R: Rng + ?Sized>(
    engine: &ConsultationEngine,
    drop_prob: f64,
    rng: &mut R,
) -> Result<(PatientCase, EntityId)> {
    let case = sample_patient_case(&engine.graph, rng, drop_prob)?;
    let present: Vec<EntityId> = case.present_symptoms.iter().copied().collect();
    let first = *present.choose(rng).expect("cases are non-empty");
    Ok((case, first))
}

/// Runs `n_samples` consultations with the engine's actor and stop rule.
pub fn evaluate(
    engine: &ConsultationEngine,
    n_samples: usize,
    drop_prob: f64,
    seed: u64,
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let (case, first) = draw(engine, drop_prob, &mut rng)?;
        let session = engine.simulate(&case, &[first])?;
        let ranked = session
            .diagnosis
            .as_deref()
            .expect("simulated sessions conclude");
        episodes.push(EpisodeRecord {
            disease: case.disease,
            questions: session.question_count,
            rank: rank_of(ranked, case.disease)?,
        });
    }
    Ok(EvalReport::from_episodes(
        header("actor", drop_prob, seed),
        episodes,
    ))
}

/// Same cases as [`evaluate`] for the same seed, but questions are drawn
/// uniformly from the symptoms not yet asked and the stop rule is ignored.
/// A fractional `budget` is met on average: each episode asks `⌊budget⌋`
/// questions plus one more with probability `budget − ⌊budget⌋`.
pub fn random_policy_baseline(
    engine: &ConsultationEngine,
    n_samples: usize,
    budget: f64,
    drop_prob: f64,
    seed: u64,
) -> Result<EvalReport> {
    if !(budget >= 0.0 && budget.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "question budget must be non-negative, got {budget}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy_rng = ChaCha8Rng::seed_from_u64(seed);
    policy_rng.set_stream(1);
    let (whole, frac) = (budget.floor() as usize, budget.fract());
    let mut episodes = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let (case, first) = draw(engine, drop_prob, &mut rng)?;
        let quota = whole + usize::from(policy_rng.random::<f64>() < frac);
        let mut evidence = BTreeSet::from([first]);
        let mut asked = BTreeSet::from([first]);
        let mut questions = 0;
        while questions < quota {
            let open: Vec<EntityId> = engine
                .graph
                .symptoms()
                .iter()
                .copied()
                .filter(|s| !asked.contains(s))
                .collect();
            let Some(&q) = open.choose(&mut policy_rng) else {
                break;
            };
            asked.insert(q);
            if case.present_symptoms.contains(&q) {
                evidence.insert(q);
            }
            questions += 1;
        }
        let ev: Vec<EntityId> = evidence.into_iter().collect();
        let x = evidence_vector(&engine.table, &engine.graph, &ev, engine.evidence_depth)?;
        let ranked = engine.diagnoser.diagnose(&ev, &x)?;
        episodes.push(EpisodeRecord {
            disease: case.disease,
            questions,
            rank: rank_of(&ranked, case.disease)?,
        });
    }
    Ok(EvalReport::from_episodes(
        header("random", drop_prob, seed),
        episodes,
    ))
}
