//! Command-line front end. Every subcommand reads its inputs, computes a
//! value and writes it to `--out` (or stdout); inputs are never rewritten.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::diagnose::{
    build_feature, em_fit, flag_topics, label_clusters, map_clusters_to_topics,
    misconception_posterior, update_with_wrong, MisconceptionPosterior, MixtureModel,
    NormalizationStats, StubLabeler, WrongResponseFeature,
};
use crate::edgescore::{
    calibrate_weights, compute_components, edge_score, Calibration, PaceStats, ScoreComponents,
};
use crate::error::{Error, Result};
use crate::generate::{
    fit_psychometric_predictor, generate_counterfactual, GenerationOutcome, PsychometricPredictor,
};
use crate::io::{self, ItemBankFile, LearnerStateFile, FORMAT_VERSION};
use crate::model::{laplace_update, Item, LearnerState, Observation};
use crate::schedule::{
    compose_session, select_topics, ScheduleDecision, SessionPlan, TopicScheduleState,
};
use crate::sim::{
    run_counterfactual_experiment, run_edgescore_experiment, run_scheduler_experiment,
    ExperimentReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "edge",
    version,
    about = "Misconception-aware adaptive learning engine"
)]
pub struct Cli {
    /// Engine configuration (JSON); missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Reseeds every random component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Applies one observed response to a learner state.
    Evaluate(EvaluateArgs),
    /// Fits misconception clusters to a response log.
    Diagnose(DiagnoseArgs),
    /// Searches for a counterfactual of a seed item against a rule.
    Generate(GenerateArgs),
    /// Picks topics and lays out the next practice session.
    Schedule(ScheduleArgs),
    /// Scores every topic of a learner.
    Score(ScoreArgs),
    /// Fits score weights to labelled examples.
    Calibrate(CalibrateArgs),
    /// Runs a simulation experiment.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub item: String,
    /// Index of the chosen distractor; omit for a correct answer.
    #[arg(long)]
    pub distractor: Option<usize>,
    /// Response time in seconds.
    #[arg(long)]
    pub tau: f64,
    #[arg(long)]
    pub confidence: f64,
    #[arg(long, default_value_t = 0.0)]
    pub now: f64,
    /// Diagnosis report whose mixture model updates the misconception posterior.
    #[arg(long)]
    pub diagnosis: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub log: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// Id of the seed item.
    #[arg(long)]
    pub item: String,
    /// Name of a rule declared in the bank.
    #[arg(long)]
    pub rule: String,
    /// Overrides the bank's required margin.
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub diagnosis: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub now: f64,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    /// Response log of the peer group for pace statistics.
    #[arg(long)]
    pub peers: Option<PathBuf>,
    #[arg(long)]
    pub diagnosis: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub now: f64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(value_enum)]
    pub name: ExperimentName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentName {
    Counterfactual,
    Scheduler,
    Edgescore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerDiagnosis {
    pub learner: String,
    pub wrong_responses: usize,
    pub posterior: Vec<f64>,
    pub flagged_topics: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub version: u32,
    pub model: MixtureModel,
    pub labels: Vec<String>,
    pub normalization: NormalizationStats,
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: f64,
    pub learners: Vec<LearnerDiagnosis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub decision: ScheduleDecision,
    pub counterfactuals: BTreeMap<usize, Vec<Item>>,
    pub session: SessionPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicScore {
    pub topic: usize,
    pub name: String,
    pub components: ScoreComponents,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationExample {
    pub components: ScoreComponents,
    /// Observed future success rate in [0, 1].
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDataFile {
    pub version: u32,
    pub examples: Vec<CalibrationExample>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Infeasible(_) | Error::DegenerateWeights(_) => EXIT_INFEASIBLE,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(cli: &Cli) -> Result<EngineConfig> {
    let cfg = match &cli.config {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn inputs(command: &Command) -> Vec<&Path> {
    let mut v: Vec<&Path> = Vec::new();
    match command {
        Command::Evaluate(a) => {
            v.extend([a.state.as_path(), a.bank.as_path()]);
            v.extend(a.diagnosis.as_deref());
        }
        Command::Diagnose(a) => v.extend([a.bank.as_path(), a.log.as_path()]),
        Command::Generate(a) => v.push(&a.bank),
        Command::Schedule(a) => {
            v.extend([a.state.as_path(), a.bank.as_path()]);
            v.extend(a.diagnosis.as_deref());
        }
        Command::Score(a) => {
            v.extend([a.state.as_path(), a.bank.as_path()]);
            v.extend(a.peers.as_deref());
            v.extend(a.diagnosis.as_deref());
        }
        Command::Calibrate(a) => v.push(&a.data),
        Command::Experiment(_) => {}
    }
    v
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    if let Some(out) = &cli.out {
        let mut ins = inputs(&cli.command);
        ins.extend(cli.config.as_deref());
        if ins.iter().any(|p| same_file(p, out)) {
            return Err(Error::Config(format!(
                "refusing to overwrite input file {}",
                out.display()
            )));
        }
    }
    if cli.format == Format::Csv && !matches!(cli.command, Command::Experiment(_)) {
        return Err(Error::Config(
            "csv output is only available for experiment records".into(),
        ));
    }
    let cfg = load_config(cli)?;
    cfg.validate()?;
    let (text, code) = match &cli.command {
        Command::Evaluate(a) => (io::to_json(&evaluate(a, &cfg)?)?, EXIT_OK),
        Command::Diagnose(a) => (io::to_json(&diagnose(a, &cfg)?)?, EXIT_OK),
        Command::Generate(a) => {
            let outcome = generate(a, &cfg)?;
            let code = if outcome.found().is_some() {
                EXIT_OK
            } else {
                EXIT_INFEASIBLE
            };
            (io::to_json(&outcome)?, code)
        }
        Command::Schedule(a) => (io::to_json(&schedule(a, &cfg)?)?, EXIT_OK),
        Command::Score(a) => (io::to_json(&score(a, &cfg)?)?, EXIT_OK),
        Command::Calibrate(a) => {
            let fit = calibrate(a, &cfg)?;
            let code = if fit.degenerate {
                EXIT_INFEASIBLE
            } else {
                EXIT_OK
            };
            (io::to_json(&fit)?, code)
        }
        Command::Experiment(a) => {
            let report = experiment(a.name, &cfg)?;
            for c in &report.checks {
                info!(
                    "{}: {} ({})",
                    c.name,
                    if c.passed { "pass" } else { "fail" },
                    c.detail
                );
            }
            let text = match cli.format {
                Format::Json => io::to_json(&report)?,
                Format::Csv => io::records_to_csv(&report.records)?,
            };
            (text, EXIT_OK)
        }
    };
    emit(cli.out.as_deref(), &text)?;
    Ok(code)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Data(format!("{}: {e}", p.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::Data(e.to_string()))
        }
    }
}

fn load_diagnosis(path: &Path) -> Result<DiagnosisReport> {
    io::load_versioned(path)
}

fn evaluate(a: &EvaluateArgs, cfg: &EngineConfig) -> Result<LearnerStateFile> {
    let state = io::load_state(&a.state)?;
    let bank = io::load_bank(&a.bank)?;
    let item = bank.item(&a.item)?;
    let obs = match a.distractor {
        Some(d) => Observation::wrong(d, a.tau, a.confidence),
        None => Observation::correct(a.tau, a.confidence),
    };
    let mut next = laplace_update(&state.learner, item, &obs, a.now, &cfg.response)?;
    if let (Some(path), false) = (&a.diagnosis, obs.y) {
        let report = load_diagnosis(path)?;
        let prior = if next.misconception_posterior.len() == report.model.k() {
            MisconceptionPosterior {
                pi: next.misconception_posterior.clone(),
            }
        } else {
            MisconceptionPosterior::prior(&report.model)
        };
        let x = build_feature(item, &obs, &report.normalization)?;
        next.misconception_posterior = update_with_wrong(&prior, &report.model, &x)?.pi;
    }
    Ok(LearnerStateFile::new(next))
}

fn diagnose(a: &DiagnoseArgs, cfg: &EngineConfig) -> Result<DiagnosisReport> {
    let bank = io::load_bank(&a.bank)?;
    let log = io::load_log(&a.log)?;
    let mut rows: Vec<(&str, &Item, &Observation)> = Vec::with_capacity(log.responses.len());
    for r in &log.responses {
        r.obs.validate()?;
        rows.push((&r.learner, bank.item(&r.item_id)?, &r.obs));
    }
    let norm = NormalizationStats::from_observations(rows.iter().map(|r| r.2));
    let mut wrong: Vec<(&str, &Item, WrongResponseFeature)> = Vec::new();
    for (learner, item, obs) in &rows {
        if !obs.y {
            wrong.push((learner, item, build_feature(item, obs, &norm)?));
        }
    }
    let features: Vec<WrongResponseFeature> = wrong.iter().map(|w| w.2.clone()).collect();
    let items: Vec<&Item> = wrong.iter().map(|w| w.1).collect();
    let fit = em_fit(&features, &cfg.em)?;
    let mut model = fit.model;
    model.topic_map = map_clusters_to_topics(&model, &items, &features, cfg.cluster_zeta)?;
    let labels = label_clusters(&model, &bank.items, &bank.topics, &StubLabeler)?;
    let log_likelihood = model.log_likelihood(&features)?;

    let mut by_learner: BTreeMap<&str, Vec<WrongResponseFeature>> = BTreeMap::new();
    for (learner, _, _) in &rows {
        by_learner.entry(learner).or_default();
    }
    for (learner, _, x) in &wrong {
        by_learner.entry(learner).or_default().push(x.clone());
    }
    let learners = by_learner
        .into_iter()
        .map(|(learner, xs)| {
            let post = misconception_posterior(&model, &xs)?;
            let flagged = flag_topics(&post, &model, cfg.flag_gamma)
                .into_iter()
                .collect();
            Ok(LearnerDiagnosis {
                learner: learner.to_string(),
                wrong_responses: xs.len(),
                posterior: post.pi,
                flagged_topics: flagged,
            })
        })
        .collect::<Result<_>>()?;
    info!(
        "diagnosis: {} wrong responses, {} iterations",
        features.len(),
        fit.iterations
    );
    Ok(DiagnosisReport {
        version: FORMAT_VERSION,
        model,
        labels,
        normalization: norm,
        iterations: fit.iterations,
        converged: fit.converged,
        log_likelihood,
        learners,
    })
}

fn predictor(
    bank: &ItemBankFile,
    seed: &Item,
    levels: &[u32],
    ridge: f64,
) -> Result<PsychometricPredictor> {
    match fit_psychometric_predictor(&bank.items, levels, ridge) {
        Ok(p) => Ok(p),
        Err(Error::InsufficientData(msg)) => {
            warn!("predictor falls back to the seed's parameters: {msg}");
            let v = seed
                .attributes
                .as_ref()
                .ok_or_else(|| Error::Data(format!("item {} has no attributes", seed.id)))?;
            Ok(PsychometricPredictor::constant(
                v.continuous.len(),
                levels.to_vec(),
                seed.a,
                seed.b,
            ))
        }
        Err(e) => Err(e),
    }
}

fn generate(a: &GenerateArgs, cfg: &EngineConfig) -> Result<GenerationOutcome> {
    let bank = io::load_bank(&a.bank)?;
    let seed = bank.item(&a.item)?;
    let rule = bank.rule(&a.rule)?;
    let mut gc = bank
        .constraints
        .clone()
        .ok_or_else(|| Error::Data("bank declares no generation constraints".into()))?;
    if let Some(d) = a.delta {
        gc.delta = d;
    }
    let pred = predictor(&bank, seed, &gc.levels, cfg.predictor_ridge)?;
    generate_counterfactual(seed, rule, &gc, &pred, &cfg.search)
}

fn schedule(a: &ScheduleArgs, cfg: &EngineConfig) -> Result<ScheduleReport> {
    let state = io::load_state(&a.state)?.learner;
    let bank = io::load_bank(&a.bank)?;
    let diagnosis = a.diagnosis.as_deref().map(load_diagnosis).transpose()?;
    let model = diagnosis.as_ref().map(|d| &d.model);
    let states: Vec<TopicScheduleState> = (0..state.topics.len())
        .map(|t| {
            TopicScheduleState::build(
                &state,
                t,
                &bank.items,
                model,
                a.now,
                cfg.fallback_time,
                &cfg.response,
                &cfg.scheduler,
            )
        })
        .collect::<Result<_>>()?;
    let decision = select_topics(&states, &cfg.scheduler, a.now)?;
    let counterfactuals = match model {
        Some(m) => counterfactuals_for(&state, &bank, m, &decision.selected, cfg)?,
        None => BTreeMap::new(),
    };
    let session = compose_session(
        &decision.selected,
        &bank.items,
        &state,
        &cfg.scheduler,
        &counterfactuals,
        a.now,
    )?;
    Ok(ScheduleReport {
        decision,
        counterfactuals,
        session,
    })
}

/// One counterfactual per selected flagged topic, seeded from the on-topic
/// items closest to the learner's level that carry a rule.
fn counterfactuals_for(
    state: &LearnerState,
    bank: &ItemBankFile,
    model: &MixtureModel,
    selected: &[usize],
    cfg: &EngineConfig,
) -> Result<BTreeMap<usize, Vec<Item>>> {
    let mut out = BTreeMap::new();
    let Some(gc) = &bank.constraints else {
        return Ok(out);
    };
    if state.misconception_posterior.len() != model.k() {
        return Ok(out);
    }
    let flagged = flag_topics(
        &MisconceptionPosterior {
            pi: state.misconception_posterior.clone(),
        },
        model,
        cfg.flag_gamma,
    );
    for &t in selected.iter().filter(|t| flagged.contains(t)) {
        let mu = state.topics[t].mu;
        let mut seeds: Vec<&Item> = bank
            .items
            .iter()
            .filter(|it| it.loads(t) && it.attributes.is_some() && !it.rules.is_empty())
            .collect();
        seeds.sort_by(|x, y| {
            (x.b - mu)
                .abs()
                .total_cmp(&(y.b - mu).abs())
                .then_with(|| x.id.cmp(&y.id))
        });
        for seed in seeds.into_iter().take(3) {
            let Ok(rule) = bank.rule(&seed.rules[0]) else {
                continue;
            };
            let pred = predictor(bank, seed, &gc.levels, cfg.predictor_ridge)?;
            if let GenerationOutcome::Found(c) =
                generate_counterfactual(seed, rule, gc, &pred, &cfg.search)?
            {
                out.insert(t, vec![c.item]);
                break;
            }
        }
    }
    Ok(out)
}

fn score(a: &ScoreArgs, cfg: &EngineConfig) -> Result<Vec<TopicScore>> {
    let state = io::load_state(&a.state)?.learner;
    let bank = io::load_bank(&a.bank)?;
    let diagnosis = a.diagnosis.as_deref().map(load_diagnosis).transpose()?;
    let records: Vec<(f64, f64)> = match &a.peers {
        Some(p) => io::load_log(p)?
            .responses
            .iter()
            .map(|r| Ok((bank.item(&r.item_id)?.b, r.obs.tau)))
            .collect::<Result<_>>()?,
        None => state.history.iter().map(|h| (h.b, h.obs.tau)).collect(),
    };
    let peers = PaceStats::from_records(&records, &cfg.pace_edges);
    (0..state.topics.len())
        .map(|t| {
            let components = compute_components(
                &state,
                t,
                &bank.items,
                &peers,
                cfg.score_window,
                a.now,
                diagnosis.as_ref().map(|d| &d.model),
            )?;
            Ok(TopicScore {
                topic: t,
                name: bank.topics.get(t).cloned().unwrap_or_default(),
                score: edge_score(&components, &cfg.score),
                components,
            })
        })
        .collect()
}

fn calibrate(a: &CalibrateArgs, cfg: &EngineConfig) -> Result<Calibration> {
    let data: CalibrationDataFile = io::load_versioned(&a.data)?;
    if let Some(e) = data
        .examples
        .iter()
        .find(|e| !(0.0..=1.0).contains(&e.target))
    {
        return Err(Error::Data(format!(
            "calibration target {} outside [0, 1]",
            e.target
        )));
    }
    let pairs: Vec<(ScoreComponents, f64)> = data
        .examples
        .iter()
        .map(|e| (e.components, e.target))
        .collect();
    calibrate_weights(&pairs, &cfg.calibration)
}

pub fn experiment(name: ExperimentName, cfg: &EngineConfig) -> Result<ExperimentReport> {
    match name {
        ExperimentName::Counterfactual => {
            run_counterfactual_experiment(&cfg.experiments.counterfactual)
        }
        ExperimentName::Scheduler => run_scheduler_experiment(&cfg.experiments.scheduler),
        ExperimentName::Edgescore => run_edgescore_experiment(&cfg.experiments.edgescore),
    }
}
