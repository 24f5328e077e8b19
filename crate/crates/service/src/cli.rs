//! Command-line interface.

use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kgconsult_core::actor::{render_reward_curve, train_actor, ShapingSchedule};
use kgconsult_core::bundle::{load_bundle_for, load_model, save_model, Persist};
use kgconsult_core::consult::{Answer, ConsultationEngine, SessionStatus};
use kgconsult_core::decision::{train_decision, DecisionModel};
use kgconsult_core::diagnosis::{train_diagnosis, DiagnosisModel};
use kgconsult_core::env::Environment;
use kgconsult_core::eval::{evaluate, random_policy_baseline};
use kgconsult_core::graph::{
    generate_synthetic_graph, load_graph_dir, save_graph, KnowledgeGraph, SynthParams,
};
use kgconsult_core::pipeline::PipelineConfig;
use kgconsult_core::transe::{train_transe, EmbeddingTable};
use kgconsult_core::Error as CoreError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::api::{self, AppState};
use crate::config;
use crate::store::DEFAULT_IDLE_TIMEOUT;

pub const REWARD_CURVE_FILE: &str = "reward_curve.csv";

#[derive(Debug, Parser)]
#[command(
    name = "kgconsult",
    version,
    about = "Train, evaluate and serve a knowledge-graph consultation engine"
)]
pub struct Cli {
    /// Training config: `key = value` lines such as `transe.k = 64`.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed; each training stage derives its own from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "info", value_name = "LEVEL")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Knowledge-graph utilities.
    Graph {
        #[command(subcommand)]
        cmd: GraphCmd,
    },
    /// Train one model and write it to a model directory.
    Train {
        #[command(subcommand)]
        stage: TrainCmd,
    },
    /// Score the trained models on simulated patients.
    Eval(EvalArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
    /// Consult interactively in the terminal.
    Consult(ConsultArgs),
}

#[derive(Debug, Subcommand)]
pub enum GraphCmd {
    /// Generate a synthetic symptom -> disease graph.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 50)]
    pub diseases: usize,
    #[arg(long, default_value_t = 120)]
    pub symptoms: usize,
    /// Symptoms per disease, `LO..HI` inclusive.
    #[arg(long, default_value = "4..8", value_parser = parse_range)]
    pub per_disease: RangeInclusive<usize>,
    #[arg(long, default_value_t = 0.25)]
    pub overlap: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let (lo, hi) = s
        .split_once("..")
        .ok_or_else(|| format!("expected LO..HI, got `{s}`"))?;
    let hi = hi.strip_prefix('=').unwrap_or(hi);
    let lo: usize = lo
        .trim()
        .parse()
        .map_err(|e| format!("bad lower bound: {e}"))?;
    let hi: usize = hi
        .trim()
        .parse()
        .map_err(|e| format!("bad upper bound: {e}"))?;
    if lo > hi {
        return Err(format!("empty range {lo}..{hi}"));
    }
    Ok(lo..=hi)
}

#[derive(Debug, Subcommand)]
pub enum TrainCmd {
    /// Translation embeddings of the graph.
    Transe(TranseArgs),
    /// Disease classifier over evidence vectors.
    Diagnosis(DiagnosisArgs),
    /// Stop-or-continue network.
    Decision(DecisionArgs),
    /// Question-asking policy.
    Actor(ActorArgs),
}

#[derive(Debug, Args)]
pub struct TranseArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value = "model")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnosisArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value = "model")]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub drop: Option<f64>,
    #[arg(long, default_value = "model")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecisionArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value = "model")]
    pub embeddings: PathBuf,
    #[arg(long, default_value = "model")]
    pub diagnosis: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value = "model")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ActorArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// Directory holding the embeddings, diagnosis and decision models.
    #[arg(long, default_value = "model")]
    pub models: PathBuf,
    #[arg(long)]
    pub episodes: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub temp: Option<f64>,
    #[arg(long)]
    pub capacity: Option<usize>,
    #[arg(long, default_value = "model")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value = "model")]
    pub models: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.1)]
    pub drop: f64,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Also score uniformly random questioning at the actor's average budget.
    #[arg(long, value_name = "FILE")]
    pub baseline_out: Option<PathBuf>,
    #[arg(long)]
    pub max_questions: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value = "model")]
    pub models: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Serve a built browser client from this directory.
    #[arg(long = "static", value_name = "DIR")]
    pub static_dir: Option<PathBuf>,
    /// Seconds of inactivity before a session is dropped.
    #[arg(long, default_value_t = DEFAULT_IDLE_TIMEOUT.as_secs())]
    pub idle_timeout: u64,
    #[arg(long)]
    pub max_questions: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ConsultArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value = "model")]
    pub models: PathBuf,
    /// Initial symptom ids, comma separated. Prompted for when omitted.
    #[arg(long, value_delimiter = ',')]
    pub symptoms: Vec<u64>,
    #[arg(long)]
    pub max_questions: Option<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = config::resolve(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Graph {
            cmd: GraphCmd::Gen(a),
        } => graph_gen(&a, cli.seed),
        Command::Train { stage } => match stage {
            TrainCmd::Transe(a) => train_transe_cmd(&a, cfg),
            TrainCmd::Diagnosis(a) => train_diagnosis_cmd(&a, cfg),
            TrainCmd::Decision(a) => train_decision_cmd(&a, cfg),
            TrainCmd::Actor(a) => train_actor_cmd(&a, cfg),
        },
        Command::Eval(a) => eval_cmd(&a, cli.seed.unwrap_or(0)),
        Command::Serve(a) => serve_cmd(&a),
        Command::Consult(a) => {
            let engine = load_engine(&a.graph, &a.models, a.max_questions)?;
            let stdin = std::io::stdin();
            consult_loop(&engine, &a.symptoms, stdin.lock(), std::io::stdout())
        }
    }
}

fn graph_gen(a: &GenArgs, seed: Option<u64>) -> Result<()> {
    let params = SynthParams {
        n_diseases: a.diseases,
        n_symptoms: a.symptoms,
        per_disease: a.per_disease.clone(),
        overlap: a.overlap,
        seed: seed.unwrap_or(SynthParams::desk().seed),
    };
    let g = generate_synthetic_graph(&params)?;
    save_graph(&g, &a.out)?;
    log::info!(
        "wrote {} diseases, {} symptoms, {} triples to {}",
        g.n_diseases(),
        g.n_symptoms(),
        g.triples().len(),
        a.out.display()
    );
    Ok(())
}

fn load_graph(dir: &Path) -> Result<KnowledgeGraph> {
    load_graph_dir(dir).with_context(|| format!("loading graph from {}", dir.display()))
}

/// Loads one model and checks it was trained on `graph`.
fn load_for<T: Persist>(dir: &Path, graph: &KnowledgeGraph) -> Result<T> {
    let stored = load_model::<T>(dir)
        .with_context(|| format!("loading {} model from {}", T::KIND, dir.display()))?;
    let fp = graph.fingerprint();
    if stored.fingerprint != fp {
        return Err(CoreError::FingerprintMismatch {
            bundle: stored.fingerprint,
            graph: fp,
        }
        .into());
    }
    Ok(stored.model)
}

fn train_transe_cmd(a: &TranseArgs, mut cfg: PipelineConfig) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let c = &mut cfg.transe;
    c.k = a.k.unwrap_or(c.k);
    c.rounds = a.rounds.unwrap_or(c.rounds);
    c.batch = a.batch.unwrap_or(c.batch);
    c.gamma = a.gamma.unwrap_or(c.gamma);
    c.lr = a.lr.unwrap_or(c.lr);
    let run = train_transe(&g, c, &mut ChaCha8Rng::seed_from_u64(c.seed))?;
    log::info!(
        "final margin loss {:.5}",
        run.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    let path = save_model(&a.out, &run.table, &g.fingerprint(), c)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn train_diagnosis_cmd(a: &DiagnosisArgs, mut cfg: PipelineConfig) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let table: EmbeddingTable = load_for(&a.embeddings, &g)?;
    let c = &mut cfg.diagnosis;
    c.epochs = a.epochs.unwrap_or(c.epochs);
    c.batch = a.batch.unwrap_or(c.batch);
    c.drop_prob = a.drop.unwrap_or(c.drop_prob);
    let run = train_diagnosis(&g, &table, c)?;
    log::info!(
        "final cross-entropy {:.5}",
        run.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    let fp = g.fingerprint();
    if let Some(tuned) = &run.table {
        save_model(&a.out, tuned, &fp, &cfg.transe)?;
        log::info!("fine-tuned embeddings written to {}", a.out.display());
    }
    let path = save_model(&a.out, &run.model, &fp, c)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn train_decision_cmd(a: &DecisionArgs, mut cfg: PipelineConfig) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let table: EmbeddingTable = load_for(&a.embeddings, &g)?;
    let diag: DiagnosisModel = load_for(&a.diagnosis, &g)?;
    let c = &mut cfg.decision;
    c.epochs = a.epochs.unwrap_or(c.epochs);
    let run = train_decision(&g, &table, &diag, c)?;
    log::info!(
        "final logistic loss {:.5}, {} degenerate epochs skipped",
        run.loss_trace.last().copied().unwrap_or(f64::NAN),
        run.skipped_epochs
    );
    let path = save_model(&a.out, &run.model, &g.fingerprint(), c)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn train_actor_cmd(a: &ActorArgs, mut cfg: PipelineConfig) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let table: EmbeddingTable = load_for(&a.models, &g)?;
    let diag: DiagnosisModel = load_for(&a.models, &g)?;
    let decision: DecisionModel = load_for(&a.models, &g)?;
    let c = &mut cfg.actor;
    if let Some(n) = a.episodes {
        c.schedule = ShapingSchedule::scaled(n);
    }
    c.lr = a.lr.unwrap_or(c.lr);
    c.temperature = a.temp.unwrap_or(c.temperature);
    c.capacity = a.capacity.unwrap_or(c.capacity);
    let env = Environment {
        graph: &g,
        tab: &table,
        diagnoser: &diag,
        stop: &decision,
        evidence_depth: diag.evidence_depth,
        cfg: &c.env,
    };
    let run = train_actor(env, c)?;
    let path = save_model(&a.out, &run.model, &g.fingerprint(), c)?;
    let curve = a.out.join(REWARD_CURVE_FILE);
    std::fs::write(&curve, render_reward_curve(&run.curve))
        .with_context(|| format!("writing {}", curve.display()))?;
    log::info!("wrote {} and {}", path.display(), curve.display());
    Ok(())
}

pub fn load_engine(
    graph: &Path,
    models: &Path,
    max_questions: Option<usize>,
) -> Result<ConsultationEngine> {
    let g = load_graph(graph)?;
    let bundle = load_bundle_for(models, &g)
        .with_context(|| format!("loading models from {}", models.display()))?;
    let mut engine = ConsultationEngine::from_bundle(Arc::new(g), &bundle);
    if let Some(m) = max_questions {
        engine.max_questions = m;
    }
    Ok(engine)
}

fn eval_cmd(a: &EvalArgs, seed: u64) -> Result<()> {
    let engine = load_engine(&a.graph, &a.models, a.max_questions)?;
    let report = evaluate(&engine, a.samples, a.drop, seed)?;
    std::fs::write(&a.out, report.to_json())
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "actor:  top1 {:.3}  top3 {:.3}  top5 {:.3}  avg questions {:.2}",
        report.top1, report.top3, report.top5, report.avg_questions
    );
    if let Some(path) = &a.baseline_out {
        let base = random_policy_baseline(&engine, a.samples, report.avg_questions, a.drop, seed)?;
        std::fs::write(path, base.to_json())
            .with_context(|| format!("writing {}", path.display()))?;
        println!(
            "random: top1 {:.3}  top3 {:.3}  top5 {:.3}  avg questions {:.2}",
            base.top1, base.top3, base.top5, base.avg_questions
        );
    }
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let engine = load_engine(&a.graph, &a.models, a.max_questions)?;
    let state = Arc::new(AppState::new(engine, Duration::from_secs(a.idle_timeout)));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(api::serve(state, a.bind, a.static_dir.clone()))
}

/// Terminal consultation. Reads initial symptom ids (when `initial` is
/// empty) and then one y/n answer per line.
pub fn consult_loop(
    engine: &ConsultationEngine,
    initial: &[u64],
    mut input: impl BufRead,
    mut out: impl Write,
) -> Result<()> {
    let name = |id| {
        engine
            .graph
            .entity(id)
            .map(|e| e.name.clone())
            .unwrap_or_default()
    };
    let mut line = String::new();
    let ids: Vec<u64> = if initial.is_empty() {
        writeln!(out, "Known symptoms:")?;
        for &s in engine.graph.symptoms() {
            writeln!(out, "  {:>5}  {}", s.0, name(s))?;
        }
        write!(out, "Initial symptom ids (comma separated): ")?;
        out.flush()?;
        if input.read_line(&mut line)? == 0 {
            bail!("no initial symptoms given");
        }
        line.split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .with_context(|| format!("not a symptom id: `{}`", t.trim()))
            })
            .collect::<Result<_>>()?
    } else {
        initial.to_vec()
    };
    let initial = ids
        .iter()
        .map(|&id| engine.symptom(id))
        .collect::<Result<Vec<_>, _>>()?;
    let mut session = engine.start_session(&initial)?;
    while let Some(q) = session.pending_question {
        let answer = loop {
            write!(
                out,
                "Q{}: do you have {}? [y/n] ",
                session.question_count + 1,
                name(q)
            )?;
            out.flush()?;
            line.clear();
            if input.read_line(&mut line)? == 0 {
                bail!("input ended before the consultation concluded");
            }
            match line.trim().to_ascii_lowercase().as_str() {
                "y" | "yes" => break Answer::Yes,
                "n" | "no" => break Answer::No,
                _ => writeln!(out, "please answer y or n")?,
            }
        };
        engine.submit_answer(&mut session, q, answer)?;
    }
    debug_assert_eq!(session.status, SessionStatus::Concluded);
    writeln!(out, "Diagnosis after {} questions:", session.question_count)?;
    for (i, d) in session.diagnosis.iter().flatten().take(5).enumerate() {
        writeln!(
            out,
            "  {}. {:<24} {:>6.2}%",
            i + 1,
            name(d.disease),
            100.0 * d.probability
        )?;
    }
    Ok(())
}
