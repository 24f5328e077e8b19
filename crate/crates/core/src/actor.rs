//! Question-asking policy trained with REINFORCE.
//!
//! A collector plays episodes with a frozen snapshot of the actor and pushes
//! `(observation, action, episode return)` transitions into a FIFO replay
//! buffer. A trainer samples batches from the buffer, takes one gradient step
//! on the live actor and publishes it as the new snapshot. Early episodes
//! follow the patient's true symptoms (reward shaping) with a probability that
//! decays geometrically.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Condvar, Mutex, RwLock};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnosis::HIDDEN;
use crate::env::{EnvConfig, Environment, EpisodeState, Observation};
use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph};
use crate::tensor::{softmax, Head, Matrix, Mlp3, Mlp3Grads, Vector, LOG_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct ActorModel {
    pub net: Mlp3,
    /// Output position → symptom id, ascending.
    pub symptoms: Vec<EntityId>,
}

impl ActorModel {
    pub fn new<R: Rng + ?Sized>(
        graph: &KnowledgeGraph,
        k: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            net: Mlp3::new(3 * k, hidden, graph.n_symptoms(), Head::Softmax, rng),
            symptoms: graph.symptoms().to_vec(),
        }
    }

    pub fn probabilities(&self, obs: &Observation) -> Result<Vector> {
        Ok(self.net.forward(&obs.vec)?.0)
    }

    /// Boltzmann sample from `softmax(logits / temperature)`.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &Observation,
        temperature: f64,
        rng: &mut R,
    ) -> Result<EntityId> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let logits = self.net.logits(&obs.vec)? / temperature;
        let p = softmax(&logits)?;
        let dist =
            WeightedIndex::new(p.iter()).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Ok(self.symptoms[dist.sample(rng)])
    }

    /// Boltzmann sample restricted to symptoms outside `exclude`. Falls back
    /// to [`ActorModel::act`] when everything is excluded.
    pub fn act_excluding<R: Rng + ?Sized>(
        &self,
        obs: &Observation,
        temperature: f64,
        exclude: &BTreeSet<EntityId>,
        rng: &mut R,
    ) -> Result<EntityId> {
        if exclude.is_empty() || self.symptoms.iter().all(|s| exclude.contains(s)) {
            return self.act(obs, temperature, rng);
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let mut logits = self.net.logits(&obs.vec)? / temperature;
        for (z, s) in logits.iter_mut().zip(&self.symptoms) {
            if exclude.contains(s) {
                *z = f64::NEG_INFINITY;
            }
        }
        let max = logits.fold(f64::NEG_INFINITY, |m, &z| m.max(z));
        let w: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let dist = WeightedIndex::new(&w).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Ok(self.symptoms[dist.sample(rng)])
    }

    /// Highest-probability symptom outside `exclude`, ties to the lower id.
    pub fn greedy(
        &self,
        obs: &Observation,
        exclude: &BTreeSet<EntityId>,
    ) -> Result<Option<EntityId>> {
        let logits = self.net.logits(&obs.vec)?;
        let mut best: Option<(usize, f64)> = None;
        for (i, &z) in logits.iter().enumerate() {
            if exclude.contains(&self.symptoms[i]) {
                continue;
            }
            if best.is_none_or(|(_, b)| z > b) {
                best = Some((i, z));
            }
        }
        Ok(best.map(|(i, _)| self.symptoms[i]))
    }

    pub fn position(&self, symptom: EntityId) -> Result<usize> {
        self.symptoms
            .binary_search(&symptom)
            .map_err(|_| Error::NotASymptom(symptom))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapingSchedule {
    pub decay: f64,
    pub decay_every: u64,
    pub total_episodes: u64,
}

impl Default for ShapingSchedule {
    fn default() -> Self {
        Self {
            decay: 0.9995,
            decay_every: 50,
            total_episodes: 250_000,
        }
    }
}

impl ShapingSchedule {
    /// Keeps the full-length run's 5000 decays for a shorter run.
    pub fn scaled(total_episodes: u64) -> Self {
        let full = Self::default();
        let decays = full.total_episodes / full.decay_every;
        Self {
            decay_every: (total_episodes / decays).max(1),
            total_episodes,
            ..full
        }
    }

    /// 20000 episodes, one decay every 4.
    pub fn desk() -> Self {
        Self::scaled(20_000)
    }
}

/// Probability of a teacher action at `episode`: `decay^⌊episode / decay_every⌋`.
pub fn shaping_rate_at(sched: &ShapingSchedule, episode: i64) -> Result<f64> {
    if episode < 0 {
        return Err(Error::InvalidParameter(format!(
            "negative episode number {episode}"
        )));
    }
    if sched.decay_every == 0 {
        return Err(Error::InvalidParameter(
            "decay_every must be positive".into(),
        ));
    }
    let decays = episode as u64 / sched.decay_every;
    Ok(sched.decay.powf(decays as f64))
}

/// Chance that the actor picks its own action after `decays` decays.
pub fn own_action_probability(sched: &ShapingSchedule, decays: u64) -> f64 {
    1.0 - sched.decay.powf(decays as f64)
}

/// With probability `rate`, a uniformly random present symptom not yet asked;
/// otherwise the actor's Boltzmann choice.
pub fn shaped_act<R: Rng + ?Sized>(
    actor: &ActorModel,
    state: &EpisodeState,
    obs: &Observation,
    rate: f64,
    temperature: f64,
    rng: &mut R,
) -> Result<EntityId> {
    shaped_act_masked(actor, state, obs, rate, temperature, false, rng)
}

/// [`shaped_act`], optionally keeping the actor's own choice off symptoms
/// already asked this episode.
pub fn shaped_act_masked<R: Rng + ?Sized>(
    actor: &ActorModel,
    state: &EpisodeState,
    obs: &Observation,
    rate: f64,
    temperature: f64,
    mask_asked: bool,
    rng: &mut R,
) -> Result<EntityId> {
    let u: f64 = rng.random();
    if u < rate {
        let teacher = state.unasked_present();
        if let Some(&s) = teacher.choose(rng) {
            return Ok(s);
        }
    }
    if mask_asked {
        let asked: BTreeSet<EntityId> = state.asked.iter().copied().collect();
        actor.act_excluding(obs, temperature, &asked, rng)
    } else {
        actor.act(obs, temperature, rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vector,
    pub action: EntityId,
    /// Return of the whole episode this transition came from.
    pub ret: f64,
    /// Symptoms the policy could not pick at this step. Empty unless the
    /// actor was trained with asked-symptom masking.
    pub excluded: Vec<EntityId>,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    entries: VecDeque<Transition>,
    pub capacity: usize,
    pub min_fill: usize,
    pub batch_size: usize,
    inserted: u64,
    evicted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, min_fill: usize, batch_size: usize) -> Result<Self> {
        if capacity == 0 || batch_size == 0 || min_fill < batch_size || min_fill > capacity {
            return Err(Error::InvalidParameter(format!(
                "replay buffer needs 0 < batch ({batch_size}) <= min_fill ({min_fill}) <= capacity ({capacity})"
            )));
        }
        Ok(Self {
            entries: VecDeque::with_capacity(capacity),
            capacity,
            min_fill,
            batch_size,
            inserted: 0,
            evicted: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_ready(&self) -> bool {
        self.len() >= self.min_fill
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn evicted(&self) -> u64 {
        self.evicted
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.entries.iter()
    }

    /// Appends in order, evicting the oldest past capacity.
    pub fn insert(&mut self, items: impl IntoIterator<Item = Transition>) {
        for t in items {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
                self.evicted += 1;
            }
            self.entries.push_back(t);
            self.inserted += 1;
        }
    }

    /// `batch_size` distinct entries drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<Transition>> {
        if !self.is_ready() {
            return Err(Error::BufferUnderfilled {
                len: self.len(),
                min_fill: self.min_fill,
            });
        }
        Ok(rand::seq::index::sample(rng, self.len(), self.batch_size)
            .into_iter()
            .map(|i| self.entries[i].clone())
            .collect())
    }
}

/// Gradient of `−(1/B) Σ G_i log p(a_i | o_i)` with respect to the network
/// parameters, plus the loss value. Actions are output positions.
pub fn policy_gradient(
    net: &Mlp3,
    obs: &Matrix,
    actions: &[usize],
    returns: &[f64],
) -> Result<(Mlp3Grads, f64)> {
    policy_gradient_masked(net, obs, actions, returns, &vec![Vec::new(); actions.len()])
}

/// [`policy_gradient`] where row `i` uses the softmax restricted to outputs
/// not listed in `masks[i]`.
pub fn policy_gradient_masked(
    net: &Mlp3,
    obs: &Matrix,
    actions: &[usize],
    returns: &[f64],
    masks: &[Vec<usize>],
) -> Result<(Mlp3Grads, f64)> {
    let b = actions.len();
    if b == 0 {
        return Err(Error::Empty("policy-gradient batch"));
    }
    if obs.nrows() != b || returns.len() != b || masks.len() != b {
        return Err(Error::shape(
            format!("{b} rows, returns and masks"),
            format!(
                "{} rows, {} returns, {} masks",
                obs.nrows(),
                returns.len(),
                masks.len()
            ),
        ));
    }
    let (mut probs, cache) = net.forward_batch(obs)?;
    for (i, mask) in masks.iter().enumerate() {
        // An all-excluded row was sampled from the full softmax.
        if mask.is_empty() || mask.len() >= net.d_out() {
            continue;
        }
        let mut z = cache.logits.row(i).to_owned();
        for &j in mask {
            *z.get_mut(j).ok_or(Error::OutOfRange {
                index: j,
                len: net.d_out(),
            })? = f64::NEG_INFINITY;
        }
        let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        z.mapv_inplace(|v| (v - max).exp());
        let total = z.sum();
        probs.row_mut(i).assign(&(z / total));
    }
    let mut d = probs.clone();
    let mut loss = 0.0;
    for (i, (&a, &g)) in actions.iter().zip(returns).enumerate() {
        if a >= net.d_out() {
            return Err(Error::OutOfRange {
                index: a,
                len: net.d_out(),
            });
        }
        loss -= g * probs[[i, a]].max(LOG_EPS).ln();
        d[[i, a]] -= 1.0;
        d.row_mut(i).mapv_inplace(|v| v * g / b as f64);
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("policy-gradient loss"));
    }
    Ok((net.backward_batch(&cache, &d)?, loss))
}

struct Batch {
    xs: Matrix,
    actions: Vec<usize>,
    returns: Vec<f64>,
    masks: Vec<Vec<usize>>,
}

fn batch_arrays(actor: &ActorModel, batch: &[Transition]) -> Result<Batch> {
    let mut xs = Matrix::zeros((batch.len(), actor.net.d_in()));
    let mut actions = Vec::with_capacity(batch.len());
    let mut masks = Vec::with_capacity(batch.len());
    for (i, t) in batch.iter().enumerate() {
        if t.obs.len() != actor.net.d_in() {
            return Err(Error::shape(actor.net.d_in(), t.obs.len()));
        }
        xs.row_mut(i).assign(&t.obs);
        actions.push(actor.position(t.action)?);
        masks.push(
            t.excluded
                .iter()
                .map(|&s| actor.position(s))
                .collect::<Result<_>>()?,
        );
    }
    Ok(Batch {
        xs,
        actions,
        returns: batch.iter().map(|t| t.ret).collect(),
        masks,
    })
}

/// One ascent step on the REINFORCE objective; returns the batch loss.
pub fn reinforce_update(actor: &mut ActorModel, batch: &[Transition], lr: f64) -> Result<f64> {
    reinforce_update_with(actor, batch, lr, false, None)
}

fn reinforce_update_with(
    actor: &mut ActorModel,
    batch: &[Transition],
    lr: f64,
    baseline: bool,
    max_grad_norm: Option<f64>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("policy-gradient batch"));
    }
    let mut b = batch_arrays(actor, batch)?;
    if baseline {
        let mean = b.returns.iter().sum::<f64>() / b.returns.len() as f64;
        b.returns.iter_mut().for_each(|g| *g -= mean);
    }
    let (mut grads, loss) =
        policy_gradient_masked(&actor.net, &b.xs, &b.actions, &b.returns, &b.masks)?;
    if let Some(max) = max_grad_norm {
        grads.clip_norm(max);
    }
    actor.net.apply_sgd(&grads, lr)?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecutionMode {
    /// Collect one episode, then train once; single thread.
    Sequential,
    /// Collector and trainer on separate threads.
    Threaded,
}

/// One entry of the collector/trainer interleaving.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    /// An episode, played with the snapshot published after `snapshot` training steps, was inserted.
    Episode { snapshot: u64 },
    /// The trainer sampled a batch.
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatchdogConfig {
    /// Fraction of the run after which the check happens.
    pub at_fraction: f64,
    /// Episodes averaged on each side of the comparison.
    pub window: usize,
}

impl Default for WatchdogConfig {
    fn default() -> Self {
        Self {
            at_fraction: 0.5,
            window: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorConfig {
    pub schedule: ShapingSchedule,
    pub lr: f64,
    pub temperature: f64,
    pub capacity: usize,
    pub min_fill: usize,
    pub batch: usize,
    pub hidden: usize,
    pub seed: u64,
    pub env: EnvConfig,
    /// Train on each fresh episode instead of sampling the buffer.
    pub fresh_only: bool,
    /// Subtract the batch-mean return.
    pub baseline: bool,
    /// Never let the actor's own choice repeat a symptom within an episode.
    pub mask_asked: bool,
    /// Rescale each update's gradient to at most this Euclidean norm.
    pub max_grad_norm: Option<f64>,
    pub mode: ExecutionMode,
    pub watchdog: Option<WatchdogConfig>,
}

impl Default for ActorConfig {
    fn default() -> Self {
        Self {
            schedule: ShapingSchedule::desk(),
            lr: 1e-3,
            temperature: 1.0,
            capacity: 10_000,
            min_fill: 100,
            batch: 20,
            hidden: HIDDEN,
            seed: 0,
            env: EnvConfig::default(),
            fresh_only: false,
            baseline: false,
            mask_asked: true,
            max_grad_norm: Some(1.0),
            mode: ExecutionMode::Sequential,
            watchdog: Some(WatchdogConfig::default()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub shaping_rate: f64,
}

/// `episode,return,shaping_rate` CSV.
pub fn render_reward_curve(curve: &[CurvePoint]) -> String {
    let mut out = String::from("episode,return,shaping_rate\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.episode, p.ret, p.shaping_rate));
    }
    out
}

#[derive(Clone, Debug)]
pub struct ActorRun {
    pub model: ActorModel,
    pub curve: Vec<CurvePoint>,
    pub schedule: Vec<Event>,
    pub losses: Vec<f64>,
    /// Mean return of the uniform policy, measured when the watchdog is on.
    pub random_baseline: Option<f64>,
}

/// Plays one episode with a uniformly random policy over all symptoms.
pub fn random_episode<R: Rng + ?Sized>(env: &Environment<'_>, rng: &mut R) -> Result<EpisodeState> {
    let (mut state, _) = env.reset(rng)?;
    while !state.done {
        let a = *env
            .graph
            .symptoms()
            .choose(rng)
            .ok_or(Error::Empty("graph has no symptoms"))?;
        env.step(&mut state, a)?;
    }
    Ok(state)
}

struct Collector<'a> {
    env: Environment<'a>,
    cfg: &'a ActorConfig,
    rng: ChaCha8Rng,
    curve: Vec<CurvePoint>,
    baseline: Option<f64>,
}

impl Collector<'_> {
    fn collect(&mut self, actor: &ActorModel) -> Result<Vec<Transition>> {
        let episode = self.curve.len() as u64;
        let rate = shaping_rate_at(&self.cfg.schedule, episode as i64)?;
        let (mut state, mut obs) = self.env.reset(&mut self.rng)?;
        let mut steps = Vec::new();
        while !state.done {
            let a = shaped_act_masked(
                actor,
                &state,
                &obs,
                rate,
                self.cfg.temperature,
                self.cfg.mask_asked,
                &mut self.rng,
            )?;
            let excluded = if self.cfg.mask_asked {
                state.asked.clone()
            } else {
                Vec::new()
            };
            let r = self.env.step(&mut state, a)?;
            steps.push((std::mem::replace(&mut obs, r.observation).vec, a, excluded));
        }
        let ret = state.total_return();
        self.curve.push(CurvePoint {
            episode,
            ret,
            shaping_rate: rate,
        });
        self.check_watchdog()?;
        Ok(steps
            .into_iter()
            .map(|(obs, action, excluded)| Transition {
                obs,
                action,
                ret,
                excluded,
            })
            .collect())
    }

    fn check_watchdog(&self) -> Result<()> {
        let (Some(wd), Some(baseline)) = (&self.cfg.watchdog, self.baseline) else {
            return Ok(());
        };
        let at = (self.cfg.schedule.total_episodes as f64 * wd.at_fraction).ceil() as usize;
        if at == 0 || self.curve.len() != at {
            return Ok(());
        }
        let window = &self.curve[at.saturating_sub(wd.window)..];
        let mean = window.iter().map(|p| p.ret).sum::<f64>() / window.len() as f64;
        log::info!(
            "actor watchdog at episode {at}: mean return {mean:.3}, random baseline {baseline:.3}"
        );
        if mean <= baseline {
            return Err(Error::Watchdog {
                episodes: at,
                mean_return: mean,
                baseline,
            });
        }
        Ok(())
    }
}

struct Trainer {
    live: ActorModel,
    rng: ChaCha8Rng,
    lr: f64,
    baseline: bool,
    max_grad_norm: Option<f64>,
    losses: Vec<f64>,
}

impl Trainer {
    fn train(&mut self, batch: &[Transition]) -> Result<()> {
        let loss = reinforce_update_with(
            &mut self.live,
            batch,
            self.lr,
            self.baseline,
            self.max_grad_norm,
        )?;
        self.losses.push(loss);
        if self.losses.len().is_multiple_of(1000) {
            log::debug!("actor step {}: loss {loss:.4}", self.losses.len());
        }
        Ok(())
    }

    fn version(&self) -> u64 {
        self.losses.len() as u64
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Setup<'a> {
    collector: Collector<'a>,
    trainer: Trainer,
    buffer: ReplayBuffer,
}

fn setup<'a>(env: Environment<'a>, cfg: &'a ActorConfig) -> Result<Setup<'a>> {
    if cfg.lr.is_nan() || cfg.lr < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "learning rate must be non-negative, got {}",
            cfg.lr
        )));
    }
    if let Some(max) = cfg.max_grad_norm {
        if !(max > 0.0 && max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gradient norm cap must be positive, got {max}"
            )));
        }
    }
    let mut init_rng = stream_rng(cfg.seed, 0);
    let live = ActorModel::new(env.graph, env.tab.k(), cfg.hidden, &mut init_rng);
    let baseline = match &cfg.watchdog {
        Some(wd) if cfg.schedule.total_episodes > 0 => {
            let mut rng = stream_rng(cfg.seed, 3);
            let n = wd.window.max(1);
            let mut total = 0.0;
            for _ in 0..n {
                total += random_episode(&env, &mut rng)?.total_return();
            }
            Some(total / n as f64)
        }
        _ => None,
    };
    Ok(Setup {
        collector: Collector {
            env,
            cfg,
            rng: stream_rng(cfg.seed, 1),
            curve: Vec::with_capacity(cfg.schedule.total_episodes as usize),
            baseline,
        },
        trainer: Trainer {
            live,
            rng: stream_rng(cfg.seed, 2),
            lr: cfg.lr,
            baseline: cfg.baseline,
            max_grad_norm: cfg.max_grad_norm,
            losses: Vec::new(),
        },
        buffer: ReplayBuffer::new(cfg.capacity, cfg.min_fill, cfg.batch)?,
    })
}

fn finish(s: Setup<'_>, schedule: Vec<Event>) -> ActorRun {
    ActorRun {
        model: s.trainer.live,
        curve: s.collector.curve,
        schedule,
        losses: s.trainer.losses,
        random_baseline: s.collector.baseline,
    }
}

/// Trains the actor against `env`. Fresh-only runs are always sequential.
pub fn train_actor(env: Environment<'_>, cfg: &ActorConfig) -> Result<ActorRun> {
    match cfg.mode {
        ExecutionMode::Threaded if !cfg.fresh_only => train_threaded(env, cfg),
        _ => train_sequential(env, cfg),
    }
}

fn train_sequential(env: Environment<'_>, cfg: &ActorConfig) -> Result<ActorRun> {
    let mut s = setup(env, cfg)?;
    let mut schedule = Vec::new();
    for _ in 0..cfg.schedule.total_episodes {
        let v = s.trainer.version();
        let transitions = s.collector.collect(&s.trainer.live)?;
        schedule.push(Event::Episode { snapshot: v });
        if cfg.fresh_only {
            s.trainer.train(&transitions)?;
            schedule.push(Event::Train);
            continue;
        }
        s.buffer.insert(transitions);
        if s.buffer.is_ready() {
            let batch = s.buffer.sample(&mut s.trainer.rng)?;
            schedule.push(Event::Train);
            s.trainer.train(&batch)?;
        }
    }
    Ok(finish(s, schedule))
}

/// Re-runs a recorded interleaving on one thread. Given the schedule of a
/// threaded run with the same config, the result is identical.
pub fn replay_actor(
    env: Environment<'_>,
    cfg: &ActorConfig,
    schedule: &[Event],
) -> Result<ActorRun> {
    let mut s = setup(env, cfg)?;
    let mut last_use: BTreeMap<u64, usize> = BTreeMap::new();
    for (i, e) in schedule.iter().enumerate() {
        if let Event::Episode { snapshot } = e {
            last_use.insert(*snapshot, i);
        }
    }
    let mut snapshots: BTreeMap<u64, ActorModel> = BTreeMap::new();
    if last_use.contains_key(&0) {
        snapshots.insert(0, s.trainer.live.clone());
    }
    for (i, e) in schedule.iter().enumerate() {
        match *e {
            Event::Episode { snapshot } => {
                let actor = snapshots.get(&snapshot).ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "schedule uses snapshot {snapshot} before it exists"
                    ))
                })?;
                let transitions = s.collector.collect(actor)?;
                if cfg.fresh_only {
                    return Err(Error::InvalidParameter(
                        "replay does not support fresh-only runs".into(),
                    ));
                }
                s.buffer.insert(transitions);
                if last_use.get(&snapshot) == Some(&i) {
                    snapshots.remove(&snapshot);
                }
            }
            Event::Train => {
                let batch = s.buffer.sample(&mut s.trainer.rng)?;
                s.trainer.train(&batch)?;
                let v = s.trainer.version();
                if last_use.contains_key(&v) {
                    snapshots.insert(v, s.trainer.live.clone());
                }
            }
        }
    }
    Ok(finish(s, schedule.to_vec()))
}

struct SharedState {
    buffer: ReplayBuffer,
    log: Vec<Event>,
    credits: usize,
    collector_done: bool,
    trainer_failed: bool,
}

fn train_threaded(env: Environment<'_>, cfg: &ActorConfig) -> Result<ActorRun> {
    let Setup {
        mut collector,
        mut trainer,
        buffer,
    } = setup(env, cfg)?;
    let shared = Mutex::new(SharedState {
        buffer,
        log: Vec::new(),
        credits: 0,
        collector_done: false,
        trainer_failed: false,
    });
    let wake = Condvar::new();
    let snapshot = RwLock::new((0u64, Arc::new(trainer.live.clone())));
    let lock = || shared.lock().unwrap_or_else(|e| e.into_inner());

    let (collected, trained) = std::thread::scope(|scope| {
        let trainer_thread = scope.spawn(|| -> Result<Trainer> {
            loop {
                let batch = {
                    let mut g = lock();
                    while g.credits == 0 && !g.collector_done {
                        g = wake.wait(g).unwrap_or_else(|e| e.into_inner());
                    }
                    if g.credits == 0 {
                        break;
                    }
                    g.credits -= 1;
                    match g.buffer.sample(&mut trainer.rng) {
                        Ok(b) => {
                            g.log.push(Event::Train);
                            b
                        }
                        Err(e) => {
                            g.trainer_failed = true;
                            return Err(e);
                        }
                    }
                };
                if let Err(e) = trainer.train(&batch) {
                    lock().trainer_failed = true;
                    return Err(e);
                }
                let published = (trainer.version(), Arc::new(trainer.live.clone()));
                *snapshot.write().unwrap_or_else(|e| e.into_inner()) = published;
            }
            Ok(trainer)
        });

        let collected: Result<()> = (|| {
            for _ in 0..cfg.schedule.total_episodes {
                let (v, actor) = snapshot.read().unwrap_or_else(|e| e.into_inner()).clone();
                let transitions = collector.collect(&actor)?;
                let mut g = lock();
                if g.trainer_failed {
                    break;
                }
                g.buffer.insert(transitions);
                g.log.push(Event::Episode { snapshot: v });
                if g.buffer.is_ready() {
                    g.credits += 1;
                    wake.notify_one();
                }
            }
            Ok(())
        })();
        {
            let mut g = lock();
            g.collector_done = true;
            if collected.is_err() {
                g.credits = 0;
            }
        }
        wake.notify_all();
        let trained = trainer_thread.join().expect("trainer thread panicked");
        (collected, trained)
    });
    collected?;
    let trainer = trained?;
    let state = shared.into_inner().unwrap_or_else(|e| e.into_inner());
    Ok(finish(
        Setup {
            collector,
            trainer,
            buffer: state.buffer,
        },
        state.log,
    ))
}
