//! Translation embedding of the knowledge graph (`h + r ≈ t`).
//!
//! Training samples positives uniformly with replacement, pairs each with a
//! tail-corrupted negative and descends the summed margin hinge. Relation
//! vectors are normalized once at init; entity renormalization is opt-in.

use std::collections::HashMap;

use ndarray::{ArrayView1, Axis};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{corrupt_triple, EntityId, KnowledgeGraph, RelationId, Triple};
use crate::tensor::{Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitBound {
    /// `±6/√k`
    SixOverSqrtK,
    /// `±√k/6`
    SqrtKOverSix,
}

impl InitBound {
    pub fn value(self, k: usize) -> f64 {
        let k = k as f64;
        match self {
            InitBound::SixOverSqrtK => 6.0 / k.sqrt(),
            InitBound::SqrtKOverSix => k.sqrt() / 6.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranseConfig {
    pub k: usize,
    pub gamma: f64,
    pub rounds: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub init_bound: InitBound,
    pub normalize_entities: bool,
}

impl Default for TranseConfig {
    fn default() -> Self {
        Self {
            k: 512,
            gamma: 1.0,
            rounds: 1000,
            batch: 500,
            lr: 0.01,
            seed: 0,
            init_bound: InitBound::SixOverSqrtK,
            normalize_entities: false,
        }
    }
}

impl TranseConfig {
    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be positive".into()));
        }
        if self.gamma.is_nan() || self.gamma <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "margin must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "bad learning rate {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub entity_vecs: Matrix,
    pub relation_vecs: Matrix,
}

impl EmbeddingTable {
    pub fn new(entity_vecs: Matrix, relation_vecs: Matrix) -> Result<Self> {
        if entity_vecs.ncols() != relation_vecs.ncols() || entity_vecs.ncols() == 0 {
            return Err(Error::shape(
                "entity and relation vectors of equal positive width",
                format!("{} vs {}", entity_vecs.ncols(), relation_vecs.ncols()),
            ));
        }
        if !entity_vecs
            .iter()
            .chain(relation_vecs.iter())
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite("embedding table"));
        }
        Ok(Self {
            entity_vecs,
            relation_vecs,
        })
    }

    pub fn k(&self) -> usize {
        self.entity_vecs.ncols()
    }

    pub fn n_entities(&self) -> usize {
        self.entity_vecs.nrows()
    }

    pub fn n_relations(&self) -> usize {
        self.relation_vecs.nrows()
    }

    pub fn entity(&self, id: EntityId) -> Result<ArrayView1<'_, f64>> {
        if id.index() >= self.n_entities() {
            return Err(Error::UnknownEntity(id));
        }
        Ok(self.entity_vecs.row(id.index()))
    }

    pub fn relation(&self, id: RelationId) -> Result<ArrayView1<'_, f64>> {
        if id.index() >= self.n_relations() {
            return Err(Error::OutOfRange {
                index: id.index(),
                len: self.n_relations(),
            });
        }
        Ok(self.relation_vecs.row(id.index()))
    }
}

/// Uniform init within the configured bound, then unit-normalized relations.
pub fn init_embeddings<R: Rng + ?Sized>(
    n_entities: usize,
    n_relations: usize,
    cfg: &TranseConfig,
    rng: &mut R,
) -> Result<EmbeddingTable> {
    cfg.validate()?;
    if n_entities == 0 || n_relations == 0 {
        return Err(Error::InvalidParameter(
            "need at least one entity and one relation".into(),
        ));
    }
    let b = cfg.init_bound.value(cfg.k);
    let entity_vecs = Matrix::from_shape_fn((n_entities, cfg.k), |_| rng.random_range(-b..=b));
    let mut relation_vecs = Matrix::zeros((n_relations, cfg.k));
    for mut row in relation_vecs.rows_mut() {
        loop {
            row.mapv_inplace(|_| rng.random_range(-b..=b));
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
                break;
            }
        }
    }
    EmbeddingTable::new(entity_vecs, relation_vecs)
}

/// `‖h + r − t‖₂`.
pub fn score_triple(tab: &EmbeddingTable, h: EntityId, r: RelationId, t: EntityId) -> Result<f64> {
    let (hv, rv, tv) = (tab.entity(h)?, tab.relation(r)?, tab.entity(t)?);
    Ok(hv
        .iter()
        .zip(rv.iter())
        .zip(tv.iter())
        .map(|((a, b), c)| {
            let d = a + b - c;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// `Σ max(0, pos_i + γ − neg_i)`.
pub fn margin_loss(pos: &[f64], neg: &[f64], gamma: f64) -> Result<f64> {
    if pos.len() != neg.len() {
        return Err(Error::shape(pos.len(), neg.len()));
    }
    Ok(pos
        .iter()
        .zip(neg)
        .map(|(p, n)| (p + gamma - n).max(0.0))
        .sum())
}

/// Sparse gradient rows keyed by table row.
pub type RowGrads = HashMap<usize, Vector>;

/// Gradient of the summed hinge over `(positive, negative)` pairs.
///
/// Returns sparse per-row gradients for entities and relations plus the loss.
pub fn margin_loss_grads(
    tab: &EmbeddingTable,
    pairs: &[(Triple, Triple)],
    gamma: f64,
) -> Result<(RowGrads, RowGrads, f64)> {
    let k = tab.k();
    let mut ent = RowGrads::new();
    let mut rel = RowGrads::new();
    let mut loss = 0.0;
    for (pos, neg) in pairs {
        let dp = translation_residual(tab, pos)?;
        let dn = translation_residual(tab, neg)?;
        let (sp, sn) = (dp.dot(&dp).sqrt(), dn.dot(&dn).sqrt());
        let l = sp + gamma - sn;
        if l <= 0.0 {
            continue;
        }
        loss += l;
        let up = if sp > 0.0 { &dp / sp } else { Vector::zeros(k) };
        let un = if sn > 0.0 { &dn / sn } else { Vector::zeros(k) };
        let add = |map: &mut HashMap<usize, Vector>, idx: usize, v: &Vector, sign: f64| {
            map.entry(idx)
                .or_insert_with(|| Vector::zeros(k))
                .scaled_add(sign, v);
        };
        // d/dh and d/dr of ‖h+r−t‖ is u, d/dt is −u
        add(&mut ent, pos.head.index(), &up, 1.0);
        add(&mut rel, pos.relation.index(), &up, 1.0);
        add(&mut ent, pos.tail.index(), &up, -1.0);
        add(&mut ent, neg.head.index(), &un, -1.0);
        add(&mut rel, neg.relation.index(), &un, -1.0);
        add(&mut ent, neg.tail.index(), &un, 1.0);
    }
    Ok((ent, rel, loss))
}

fn translation_residual(tab: &EmbeddingTable, t: &Triple) -> Result<Vector> {
    Ok(&tab.entity(t.head)? + &tab.relation(t.relation)? - tab.entity(t.tail)?)
}

#[derive(Clone, Debug)]
pub struct TranseRun {
    pub table: EmbeddingTable,
    /// Mean hinge per pair, one entry per round.
    pub loss_trace: Vec<f64>,
}

pub fn train_transe<R: Rng + ?Sized>(
    graph: &KnowledgeGraph,
    cfg: &TranseConfig,
    rng: &mut R,
) -> Result<TranseRun> {
    cfg.validate()?;
    if graph.triples().is_empty() {
        return Err(Error::Empty("graph has no triples"));
    }
    let mut table = init_embeddings(graph.n_entities(), graph.n_relations(), cfg, rng)?;
    let mut trace = Vec::with_capacity(cfg.rounds);
    let mut pairs = Vec::with_capacity(cfg.batch);
    for round in 0..cfg.rounds {
        pairs.clear();
        for _ in 0..cfg.batch {
            let pos = *graph.triples().choose(rng).expect("non-empty");
            let neg = corrupt_triple(graph, &pos, rng)?;
            pairs.push((pos, neg));
        }
        let (ent, rel, loss) = margin_loss_grads(&table, &pairs, cfg.gamma)?;
        for (idx, g) in ent {
            table.entity_vecs.row_mut(idx).scaled_add(-cfg.lr, &g);
        }
        for (idx, g) in rel {
            table.relation_vecs.row_mut(idx).scaled_add(-cfg.lr, &g);
        }
        if cfg.normalize_entities {
            for mut row in table.entity_vecs.rows_mut() {
                let n = row.dot(&row).sqrt();
                if n > 0.0 {
                    row /= n;
                }
            }
        }
        let mean = loss / cfg.batch.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("TransE loss"));
        }
        if round % 100 == 0 {
            log::debug!("transe round {round}: mean hinge {mean:.4}");
        }
        trace.push(mean);
    }
    Ok(TranseRun {
        table,
        loss_trace: trace,
    })
}

/// Filtered rank of each triple's true tail among all entities (1 = best),
/// averaged. Other true tails of the same `(h, r)` are skipped.
pub fn filtered_mean_rank(
    tab: &EmbeddingTable,
    graph: &KnowledgeGraph,
    triples: &[Triple],
) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::Empty("no triples to rank"));
    }
    let n = graph.n_entities();
    let mut total = 0.0;
    for t in triples {
        let hr = &tab.entity(t.head)? + &tab.relation(t.relation)?;
        let dist = |e: usize| {
            let d = &hr - &tab.entity_vecs.row(e);
            d.dot(&d).sqrt()
        };
        let truth = dist(t.tail.index());
        let mut rank = 1usize;
        for e in 0..n {
            if e == t.tail.index() {
                continue;
            }
            let cand = Triple {
                tail: EntityId(e as u32),
                ..*t
            };
            if graph.contains(&cand) {
                continue;
            }
            if dist(e) < truth {
                rank += 1;
            }
        }
        total += rank as f64;
    }
    Ok(total / triples.len() as f64)
}

/// L2 norms of each relation vector.
pub fn relation_norms(tab: &EmbeddingTable) -> Vec<f64> {
    tab.relation_vecs
        .axis_iter(Axis(0))
        .map(|r| r.dot(&r).sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::minimal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_normalizes_relations_and_respects_bound() {
        let cfg = TranseConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tab = init_embeddings(30, 3, &cfg, &mut rng).unwrap();
        for n in relation_norms(&tab) {
            assert!((n - 1.0).abs() < 1e-12);
        }
        // 6 / sqrt(512) = 0.26516504...
        let bound = 6.0 / 512f64.sqrt();
        assert!((bound - 0.2651650429).abs() < 1e-9);
        assert!(tab.entity_vecs.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn sqrt_k_over_six_bound() {
        let cfg = TranseConfig {
            init_bound: InitBound::SqrtKOverSix,
            ..TranseConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tab = init_embeddings(10, 1, &cfg, &mut rng).unwrap();
        let bound = 512f64.sqrt() / 6.0;
        assert!(tab.entity_vecs.iter().all(|v| v.abs() <= bound));
        assert!(tab.entity_vecs.iter().any(|v| v.abs() > 1.0));
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = TranseConfig::default();
        let a = init_embeddings(5, 1, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = init_embeddings(5, 1, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn score_examples() {
        let ent = ndarray::array![[1.0, 2.0], [0.5, 2.5], [0.0, 0.0], [1.0, 0.0]];
        let rel = ndarray::array![[-0.5, 0.5], [0.0, 0.0]];
        let tab = EmbeddingTable::new(ent, rel).unwrap();
        assert_eq!(
            score_triple(&tab, EntityId(0), RelationId(0), EntityId(1)).unwrap(),
            0.0
        );
        assert_eq!(
            score_triple(&tab, EntityId(2), RelationId(1), EntityId(3)).unwrap(),
            1.0
        );
        assert!(score_triple(&tab, EntityId(9), RelationId(0), EntityId(1)).is_err());
    }

    #[test]
    fn score_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = TranseConfig {
            k: 16,
            ..TranseConfig::default()
        };
        let tab = init_embeddings(6, 2, &cfg, &mut rng).unwrap();
        let (h, r, t) = (2usize, 1usize, 5usize);
        let mut acc = 0.0;
        for i in 0..16 {
            let d = tab.entity_vecs[[h, i]] + tab.relation_vecs[[r, i]] - tab.entity_vecs[[t, i]];
            acc += d * d;
        }
        let got = score_triple(
            &tab,
            EntityId(h as u32),
            RelationId(r as u32),
            EntityId(t as u32),
        )
        .unwrap();
        assert!((got - acc.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin_loss(&[0.1], &[5.0], 1.0).unwrap(), 0.0);
        assert_eq!(margin_loss(&[1.0], &[1.0], 1.0).unwrap(), 1.0);
        assert!((margin_loss(&[0.5, 2.0], &[1.0, 2.2], 1.0).unwrap() - 1.3).abs() < 1e-12);
        assert!(margin_loss(&[0.5], &[1.0, 2.2], 1.0).is_err());
    }

    #[test]
    fn zero_rounds_returns_init() {
        let g = minimal();
        let cfg = TranseConfig {
            rounds: 0,
            k: 8,
            ..TranseConfig::default()
        };
        let run = train_transe(&g, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let init = init_embeddings(2, 1, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(run.table, init);
        assert!(run.loss_trace.is_empty());
    }

    #[test]
    fn rejects_non_positive_margin() {
        let cfg = TranseConfig {
            gamma: 0.0,
            ..TranseConfig::default()
        };
        assert!(init_embeddings(2, 1, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
