//! Simulated-patient environment.
//!
//! The patient is a sampled [`PatientCase`]. Each step asks one symptom;
//! present and not yet asked earns +1, anything else −1. The episode ends when
//! the stop rule judges the confirmed evidence sufficient (with a terminal
//! bonus for a correct top-1 diagnosis) or after `max_steps` questions.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnosis::{evidence_vector, RankedDisease};
use crate::error::{Error, Result};
use crate::graph::{sample_patient_case, EntityId, KnowledgeGraph, PatientCase};
use crate::tensor::Vector;
use crate::transe::EmbeddingTable;

/// Ranks diseases given confirmed evidence and its vector.
pub trait Diagnoser: Send + Sync {
    fn diagnose(&self, evidence: &[EntityId], x: &Vector) -> Result<Vec<RankedDisease>>;
}

/// Decides when the evidence collected so far is enough.
pub trait StopRule: Send + Sync {
    fn sufficiency(&self, evidence: &[EntityId], x: &Vector) -> Result<f64>;
    fn threshold(&self) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub max_steps: usize,
    pub terminal_bonus: f64,
    pub drop_prob: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_steps: 30,
            terminal_bonus: 5.0,
            drop_prob: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeState {
    pub case: PatientCase,
    /// Asked symptoms in asking order, without repeats.
    pub asked: Vec<EntityId>,
    pub confirmed: BTreeSet<EntityId>,
    /// Number of `step` calls, repeats included.
    pub step: usize,
    pub done: bool,
    /// Sum of ±1 step rewards so far.
    pub step_return: f64,
    pub bonus: f64,
    /// True when the stop rule, not the step cap, ended the episode.
    pub stopped_by_decision: bool,
}

impl EpisodeState {
    pub fn new(case: PatientCase) -> Self {
        Self {
            case,
            asked: Vec::new(),
            confirmed: BTreeSet::new(),
            step: 0,
            done: false,
            step_return: 0.0,
            bonus: 0.0,
            stopped_by_decision: false,
        }
    }

    pub fn has_asked(&self, s: EntityId) -> bool {
        self.asked.contains(&s)
    }

    /// Present symptoms not asked yet, ascending.
    pub fn unasked_present(&self) -> Vec<EntityId> {
        self.case
            .present_symptoms
            .iter()
            .copied()
            .filter(|s| !self.has_asked(*s))
            .collect()
    }

    pub fn total_return(&self) -> f64 {
        self.step_return + self.bonus
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub vec: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    /// +1 or −1.
    pub reward: f64,
    /// Terminal bonus, zero except on a decision-ended correct episode.
    pub bonus: f64,
    pub done: bool,
}

impl StepResult {
    pub fn total(&self) -> f64 {
        self.reward + self.bonus
    }
}

/// Concatenates three k-vectors: asked symptoms, diseases adjacent to a
/// confirmed symptom, and the other symptoms of those diseases that were not
/// asked. Empty parts are zero.
pub fn build_observation(
    tab: &EmbeddingTable,
    graph: &KnowledgeGraph,
    asked: &BTreeSet<EntityId>,
    confirmed: &BTreeSet<EntityId>,
) -> Result<Observation> {
    let k = tab.k();
    let mut vec = Vector::zeros(3 * k);
    {
        let mut part1 = vec.slice_mut(ndarray::s![0..k]);
        for &s in asked {
            part1 += &tab.entity(s)?;
        }
    }
    let mut diseases = BTreeSet::new();
    for &s in confirmed {
        diseases.extend(graph.diseases_of(s)?);
    }
    let mut others = BTreeSet::new();
    {
        let mut part2 = vec.slice_mut(ndarray::s![k..2 * k]);
        for &d in &diseases {
            part2 += &tab.entity(d)?;
            others.extend(
                graph
                    .symptoms_of(d)?
                    .into_iter()
                    .filter(|s| !asked.contains(s)),
            );
        }
    }
    let mut part3 = vec.slice_mut(ndarray::s![2 * k..3 * k]);
    for &s in &others {
        part3 += &tab.entity(s)?;
    }
    Ok(Observation { vec })
}

/// Shared, immutable context for running episodes.
#[derive(Clone, Copy)]
pub struct Environment<'a> {
    pub graph: &'a KnowledgeGraph,
    pub tab: &'a EmbeddingTable,
    pub diagnoser: &'a dyn Diagnoser,
    pub stop: &'a dyn StopRule,
    /// Hops used to expand confirmed symptoms into an evidence vector.
    pub evidence_depth: usize,
    pub cfg: &'a EnvConfig,
}

impl<'a> Environment<'a> {
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(EpisodeState, Observation)> {
        let case = sample_patient_case(self.graph, rng, self.cfg.drop_prob)?;
        self.start(case)
    }

    /// Starts an episode for a given case.
    pub fn start(&self, case: PatientCase) -> Result<(EpisodeState, Observation)> {
        let state = EpisodeState::new(case);
        let obs = self.observe(&state)?;
        Ok((state, obs))
    }

    pub fn observe(&self, state: &EpisodeState) -> Result<Observation> {
        let asked: BTreeSet<EntityId> = state.asked.iter().copied().collect();
        build_observation(self.tab, self.graph, &asked, &state.confirmed)
    }

    pub fn evidence(&self, confirmed: &BTreeSet<EntityId>) -> Result<(Vec<EntityId>, Vector)> {
        let ev: Vec<EntityId> = confirmed.iter().copied().collect();
        let x = evidence_vector(self.tab, self.graph, &ev, self.evidence_depth)?;
        Ok((ev, x))
    }

    pub fn step(&self, state: &mut EpisodeState, action: EntityId) -> Result<StepResult> {
        if state.done {
            return Err(Error::EpisodeDone);
        }
        if !self.graph.is_symptom(action) {
            return Err(Error::NotASymptom(action));
        }
        let fresh = !state.has_asked(action);
        let reward = if fresh && state.case.present_symptoms.contains(&action) {
            state.confirmed.insert(action);
            1.0
        } else {
            -1.0
        };
        if fresh {
            state.asked.push(action);
        }
        state.step += 1;
        state.step_return += reward;

        let mut bonus = 0.0;
        if !state.confirmed.is_empty() {
            let (ev, x) = self.evidence(&state.confirmed)?;
            if self.stop.sufficiency(&ev, &x)? >= self.stop.threshold() {
                state.done = true;
                state.stopped_by_decision = true;
                let ranked = self.diagnoser.diagnose(&ev, &x)?;
                if ranked.first().map(|r| r.disease) == Some(state.case.disease) {
                    bonus = self.cfg.terminal_bonus;
                }
            }
        }
        if state.step >= self.cfg.max_steps {
            state.done = true;
        }
        state.bonus += bonus;
        Ok(StepResult {
            observation: self.observe(state)?,
            reward,
            bonus,
            done: state.done,
        })
    }
}

/// Fixed-output stop rule, handy for tests and ablations.
#[derive(Clone, Copy, Debug)]
pub struct ConstantStop(pub f64);

impl StopRule for ConstantStop {
    fn sufficiency(&self, _evidence: &[EntityId], _x: &Vector) -> Result<f64> {
        Ok(self.0)
    }
    fn threshold(&self) -> f64 {
        0.5
    }
}

impl ConstantStop {
    pub const ALWAYS: ConstantStop = ConstantStop(1.0);
    pub const NEVER: ConstantStop = ConstantStop(0.0);
}

/// Diagnoser that scores each disease by how many evidence symptoms it has,
/// normalised by its degree. Ties go to the lower id.
#[derive(Clone, Debug)]
pub struct OverlapDiagnoser {
    diseases: Vec<(EntityId, BTreeSet<EntityId>)>,
}

impl OverlapDiagnoser {
    pub fn new(graph: &KnowledgeGraph) -> Result<Self> {
        let diseases = graph
            .diseases()
            .iter()
            .map(|&d| Ok((d, graph.symptoms_of(d)?)))
            .collect::<Result<_>>()?;
        Ok(Self { diseases })
    }
}

impl Diagnoser for OverlapDiagnoser {
    fn diagnose(&self, evidence: &[EntityId], _x: &Vector) -> Result<Vec<RankedDisease>> {
        let scores: Vec<f64> = self
            .diseases
            .iter()
            .map(|(_, syms)| {
                let hit = evidence.iter().filter(|s| syms.contains(s)).count() as f64;
                hit * hit / syms.len() as f64
            })
            .collect();
        let total: f64 = scores.iter().sum();
        let n = scores.len() as f64;
        let probs =
            Vector::from_iter(
                scores
                    .iter()
                    .map(|s| if total > 0.0 { s / total } else { 1.0 / n }),
            );
        let ids: Vec<EntityId> = self.diseases.iter().map(|(d, _)| *d).collect();
        Ok(crate::diagnosis::rank(&ids, &probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::{minimal, triangle};
    use crate::transe::{init_embeddings, TranseConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(g: &KnowledgeGraph, k: usize) -> EmbeddingTable {
        let cfg = TranseConfig {
            k,
            ..Default::default()
        };
        init_embeddings(
            g.n_entities(),
            g.n_relations(),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap()
    }

    fn case(g: &KnowledgeGraph, d: u32) -> PatientCase {
        let full = g.symptoms_of(EntityId(d)).unwrap();
        PatientCase {
            disease: EntityId(d),
            present_symptoms: full.clone(),
            full_symptoms: full,
        }
    }

    #[test]
    fn empty_state_observation_is_zero() {
        let g = minimal();
        let tab = table(&g, 512);
        let obs = build_observation(&tab, &g, &BTreeSet::new(), &BTreeSet::new()).unwrap();
        assert_eq!(obs.vec.len(), 1536);
        assert!(obs.vec.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn minimal_after_asking_s0() {
        let g = minimal();
        let tab = table(&g, 8);
        let s = BTreeSet::from([EntityId(1)]);
        let obs = build_observation(&tab, &g, &s, &s).unwrap();
        assert_eq!(
            obs.vec.slice(ndarray::s![0..8]),
            tab.entity(EntityId(1)).unwrap()
        );
        assert_eq!(
            obs.vec.slice(ndarray::s![8..16]),
            tab.entity(EntityId(0)).unwrap()
        );
        assert!(obs.vec.slice(ndarray::s![16..24]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn denied_symptoms_only_reach_part_one() {
        let g = triangle();
        let tab = table(&g, 4);
        let asked = BTreeSet::from([EntityId(3)]);
        let obs = build_observation(&tab, &g, &asked, &BTreeSet::new()).unwrap();
        assert!(obs.vec.slice(ndarray::s![4..12]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rewards_and_stubbed_termination() {
        let g = minimal();
        let tab = table(&g, 8);
        let diag = OverlapDiagnoser::new(&g).unwrap();
        let cfg = EnvConfig::default();
        let env = Environment {
            graph: &g,
            tab: &tab,
            diagnoser: &diag,
            stop: &ConstantStop::ALWAYS,
            evidence_depth: 2,
            cfg: &cfg,
        };
        let (mut st, _) = env.start(case(&g, 0)).unwrap();
        assert_eq!((st.step, st.done), (0, false));
        let r = env.step(&mut st, EntityId(1)).unwrap();
        assert_eq!((r.reward, r.bonus, r.done), (1.0, 5.0, true));
        assert_eq!(st.total_return(), 6.0);
        assert!(matches!(
            env.step(&mut st, EntityId(1)),
            Err(Error::EpisodeDone)
        ));
    }

    #[test]
    fn repeat_and_absent_asks_cost_one() {
        let g = triangle();
        let tab = table(&g, 8);
        let diag = OverlapDiagnoser::new(&g).unwrap();
        let cfg = EnvConfig {
            max_steps: 4,
            ..Default::default()
        };
        let env = Environment {
            graph: &g,
            tab: &tab,
            diagnoser: &diag,
            stop: &ConstantStop::NEVER,
            evidence_depth: 2,
            cfg: &cfg,
        };
        let (mut st, _) = env.start(case(&g, 0)).unwrap();
        assert_eq!(env.step(&mut st, EntityId(2)).unwrap().reward, 1.0);
        assert_eq!(env.step(&mut st, EntityId(2)).unwrap().reward, -1.0);
        assert_eq!(env.step(&mut st, EntityId(3)).unwrap().reward, -1.0);
        assert!(matches!(
            env.step(&mut st, EntityId(0)),
            Err(Error::NotASymptom(_))
        ));
        let last = env.step(&mut st, EntityId(3)).unwrap();
        assert!(last.done);
        assert_eq!(st.step, 4);
        assert_eq!(st.step_return, -2.0);
        assert_eq!(st.asked, vec![EntityId(2), EntityId(3)]);
    }

    #[test]
    fn reset_is_deterministic() {
        let g = triangle();
        let tab = table(&g, 8);
        let diag = OverlapDiagnoser::new(&g).unwrap();
        let cfg = EnvConfig::default();
        let env = Environment {
            graph: &g,
            tab: &tab,
            diagnoser: &diag,
            stop: &ConstantStop::NEVER,
            evidence_depth: 2,
            cfg: &cfg,
        };
        let a = env.reset(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = env.reset(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.0.confirmed.is_empty());
    }
}
