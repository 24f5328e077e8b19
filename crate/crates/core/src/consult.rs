//! Live consultations: initial evidence, greedy questioning gated by the stop
//! rule, and a final ranked diagnosis.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::actor::ActorModel;
use crate::diagnosis::{evidence_vector, RankedDisease};
use crate::env::{build_observation, Diagnoser, StopRule};
use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph, PatientCase};
use crate::tensor::Vector;
use crate::transe::EmbeddingTable;

pub const DEFAULT_MAX_QUESTIONS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingInitial,
    Asking,
    Concluded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub initial: Vec<EntityId>,
    pub evidence: BTreeSet<EntityId>,
    pub denied: BTreeSet<EntityId>,
    pub pending_question: Option<EntityId>,
    pub history: Vec<(EntityId, Answer)>,
    pub status: SessionStatus,
    pub diagnosis: Option<Vec<RankedDisease>>,
    pub question_count: usize,
    pub max_questions: usize,
    /// Unix time in milliseconds.
    pub created_at: u64,
}

impl Session {
    pub fn new(max_questions: usize) -> Self {
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Self {
            id: uuid::Uuid::new_v4().to_string(),
            initial: Vec::new(),
            evidence: BTreeSet::new(),
            denied: BTreeSet::new(),
            pending_question: None,
            history: Vec::new(),
            status: SessionStatus::AwaitingInitial,
            diagnosis: None,
            question_count: 0,
            max_questions,
            created_at,
        }
    }

    pub fn asked(&self) -> BTreeSet<EntityId> {
        self.evidence.union(&self.denied).copied().collect()
    }

    /// Questions asked so far, in order.
    pub fn questions(&self) -> Vec<EntityId> {
        self.history.iter().map(|(q, _)| *q).collect()
    }
}

/// Everything a consultation needs, shared read-only across sessions.
#[derive(Clone)]
pub struct ConsultationEngine {
    pub graph: Arc<KnowledgeGraph>,
    pub table: Arc<EmbeddingTable>,
    pub diagnoser: Arc<dyn Diagnoser>,
    pub stop: Arc<dyn StopRule>,
    pub actor: Arc<ActorModel>,
    pub evidence_depth: usize,
    pub max_questions: usize,
}

impl ConsultationEngine {
    fn evidence(&self, session: &Session) -> Result<(Vec<EntityId>, Vector)> {
        let ev: Vec<EntityId> = session.evidence.iter().copied().collect();
        let x = evidence_vector(&self.table, &self.graph, &ev, self.evidence_depth)?;
        Ok((ev, x))
    }

    fn sufficient(&self, session: &Session) -> Result<bool> {
        let (ev, x) = self.evidence(session)?;
        Ok(self.stop.sufficiency(&ev, &x)? >= self.stop.threshold())
    }

    fn conclude(&self, session: &mut Session) -> Result<()> {
        let (ev, x) = self.evidence(session)?;
        session.diagnosis = Some(self.diagnoser.diagnose(&ev, &x)?);
        session.pending_question = None;
        session.status = SessionStatus::Concluded;
        Ok(())
    }

    /// Resolves a wire id to a symptom.
    pub fn symptom(&self, id: u64) -> Result<EntityId> {
        let e = u32::try_from(id)
            .map(EntityId)
            .map_err(|_| Error::InvalidSymptom(id))?;
        if self.graph.is_symptom(e) {
            Ok(e)
        } else {
            Err(Error::InvalidSymptom(id))
        }
    }

    pub fn start_session(&self, initial: &[EntityId]) -> Result<Session> {
        self.start_session_with(initial, self.max_questions)
    }

    pub fn start_session_with(
        &self,
        initial: &[EntityId],
        max_questions: usize,
    ) -> Result<Session> {
        if initial.is_empty() {
            return Err(Error::NoInitialSymptoms);
        }
        for &s in initial {
            self.symptom(s.0 as u64)?;
        }
        let mut session = Session::new(max_questions);
        session.initial = initial.to_vec();
        session.evidence = initial.iter().copied().collect();
        session.status = SessionStatus::Asking;
        if session.max_questions == 0 || self.sufficient(&session)? {
            self.conclude(&mut session)?;
        } else {
            self.next_question(&mut session)?;
        }
        Ok(session)
    }

    /// Picks the actor's best symptom not yet asked and makes it pending.
    /// Concludes the session when nothing is left to ask.
    pub fn next_question(&self, session: &mut Session) -> Result<Option<EntityId>> {
        if session.status != SessionStatus::Asking {
            return Err(Error::SessionConcluded(session.id.clone()));
        }
        let asked = session.asked();
        let obs = build_observation(&self.table, &self.graph, &asked, &session.evidence)?;
        match self.actor.greedy(&obs, &asked)? {
            Some(q) => {
                session.pending_question = Some(q);
                Ok(Some(q))
            }
            None => {
                self.conclude(session)?;
                Ok(None)
            }
        }
    }

    pub fn submit_answer(
        &self,
        session: &mut Session,
        symptom: EntityId,
        answer: Answer,
    ) -> Result<()> {
        if session.status == SessionStatus::Concluded {
            return Err(Error::SessionConcluded(session.id.clone()));
        }
        if session.pending_question != Some(symptom) {
            return Err(Error::NotPending {
                got: symptom,
                pending: session.pending_question,
            });
        }
        session.pending_question = None;
        match answer {
            Answer::Yes => session.evidence.insert(symptom),
            Answer::No => session.denied.insert(symptom),
        };
        session.history.push((symptom, answer));
        session.question_count += 1;
        if session.question_count >= session.max_questions || self.sufficient(session)? {
            self.conclude(session)
        } else {
            self.next_question(session).map(|_| ())
        }
    }

    /// Runs a session to completion against a truthful patient.
    pub fn simulate(&self, case: &PatientCase, initial: &[EntityId]) -> Result<Session> {
        let mut session = self.start_session(initial)?;
        while let Some(q) = session.pending_question {
            let answer = if case.present_symptoms.contains(&q) {
                Answer::Yes
            } else {
                Answer::No
            };
            self.submit_answer(&mut session, q, answer)?;
        }
        Ok(session)
    }
}
