//! Experiment orchestration: configuration, GA runs over seed lists,
//! baselines, best-policy retraining, batch-size study and reports.
//!
//! Every file written here is deterministic in the configuration, so reruns
//! produce byte-identical outputs at any `jobs` setting.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Duration;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{check_unique, Gene, Operator};
use crate::data::{generate_minishapes, read_cifar10_batch, write_cifar10, DataError, Dataset, Split};
use crate::evolve::{FitnessRecord, GaConfig, GeneticAlgorithm, MutationGuard};
use crate::explain::{self, AnalysisLog, ExplainError, ReportRow};
use crate::fitness::{EvalContext, EvalError, Evaluator, ExternalEvaluator, SurrogateEvaluator};
use crate::landscape::{self, GridSpec, LandscapeError, LandscapeManifest, Scope};
use crate::policy::{Chromosome, Mode, SslAlgorithm};
use crate::rng::substream;
use crate::runlog::{read_runlog, write_generations_csv, RunLogError, RunLogWriter};
use crate::ssl::params::write_checkpoint;
use crate::ssl::{run_policy, run_supervised, DownstreamMode, PreparedData, SslConfig, SslError, SslEvaluator};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("evaluator failure: {0}")]
    Evaluator(String),
    #[error("no completed run logs in {0}")]
    EmptyLog(PathBuf),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    RunLog(#[from] RunLogError),
    #[error(transparent)]
    Landscape(#[from] LandscapeError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Training(#[from] SslError),
}

impl From<EvalError> for HarnessError {
    fn from(e: EvalError) -> Self {
        HarnessError::Evaluator(e.to_string())
    }
}

type Result<T> = std::result::Result<T, HarnessError>;

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HarnessError::Config(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Minishapes {
        #[serde(default)]
        seed: u64,
        n_train: usize,
        n_test: usize,
    },
    /// CIFAR-10 binary batch files; optional limits keep the first samples.
    Cifar10 {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        limit_train: Option<usize>,
        #[serde(default)]
        limit_test: Option<usize>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Minishapes {
            seed: 0,
            n_train: 1000,
            n_test: 500,
        }
    }
}

impl DatasetSpec {
    pub fn tag(&self) -> &'static str {
        match self {
            DatasetSpec::Minishapes { .. } => "minishapes",
            DatasetSpec::Cifar10 { .. } => "cifar10",
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Minishapes { seed, n_train, n_test } => Ok(generate_minishapes(*seed, *n_train, *n_test)?),
            DatasetSpec::Cifar10 {
                train,
                test,
                limit_train,
                limit_test,
            } => {
                let mut tr = read_cifar10_batch(train)?;
                let mut te = read_cifar10_batch(test)?;
                tr.split = Split::Train;
                te.split = Split::Test;
                if let Some(n) = limit_train {
                    tr = tr.truncated(*n);
                }
                if let Some(n) = limit_test {
                    te = te.truncated(*n);
                }
                Ok((tr, te))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EvaluatorSpec {
    #[default]
    Surrogate,
    BuiltinSsl,
    /// A worker process speaking the line protocol, started with `sh -c`.
    External {
        command: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_timeout() -> u64 {
    3600
}

/// GA settings; mode, algorithm and seed come from the experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaParams {
    pub population_size: usize,
    pub generations: usize,
    pub chromosome_length: usize,
    pub elitism: usize,
    pub mo_algorithm_swap_prob: f64,
    pub mutation_guard: MutationGuard,
}

impl Default for GaParams {
    fn default() -> Self {
        let g = GaConfig::default();
        Self {
            population_size: g.population_size,
            generations: g.generations,
            chromosome_length: g.chromosome_length,
            elitism: g.elitism,
            mo_algorithm_swap_prob: g.mo_algorithm_swap_prob,
            mutation_guard: g.mutation_guard,
        }
    }
}

/// Evaluation settings shared by every evaluation of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalDefaults {
    pub pretext_batch_size: usize,
    pub pretext_epochs: usize,
    pub downstream_epochs: usize,
}

impl Default for EvalDefaults {
    fn default() -> Self {
        let c = EvalContext::default();
        Self {
            pretext_batch_size: c.pretext_batch_size,
            pretext_epochs: c.pretext_epochs,
            downstream_epochs: c.downstream_epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeSettings {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    pub scope: Scope,
    pub split: Split,
}

impl Default for LandscapeSettings {
    fn default() -> Self {
        Self {
            lo: -1.0,
            hi: 1.0,
            points: 50,
            scope: Scope::Head,
            split: Split::Test,
        }
    }
}

impl LandscapeSettings {
    pub fn grid(&self) -> GridSpec {
        GridSpec::square(self.lo, self.hi, self.points)
    }
}

fn default_ssl_policy() -> Vec<Gene> {
    vec![
        Gene::new(Operator::HorizontalFlip, 0.5),
        Gene::new(Operator::Color, 1.4),
        Gene::new(Operator::Contrast, 1.4),
    ]
}

fn default_retrain_epochs() -> Vec<usize> {
    vec![20, 40, 200]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub mode: Mode,
    /// Required in SO mode, absent in MO mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<SslAlgorithm>,
    #[serde(default)]
    pub dataset: DatasetSpec,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub ga: GaParams,
    #[serde(default)]
    pub eval: EvalDefaults,
    #[serde(default)]
    pub evaluator: EvaluatorSpec,
    #[serde(default)]
    pub ssl: SslConfig,
    /// Policy of the SSL-default baseline.
    #[serde(default = "default_ssl_policy")]
    pub default_policy: Vec<Gene>,
    #[serde(default = "default_retrain_epochs")]
    pub retrain_epochs: Vec<usize>,
    /// Pretext batch sizes of the batch-size study; empty means only
    /// `eval.pretext_batch_size`.
    #[serde(default)]
    pub batch_sizes: Vec<usize>,
    /// Also compute baselines during `run_experiment`.
    #[serde(default)]
    pub baselines: bool,
    #[serde(default)]
    pub landscape: LandscapeSettings,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// A surrogate SO experiment with every other field at its default.
    pub fn new(algorithm: SslAlgorithm, seeds: Vec<u64>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            version: CONFIG_VERSION,
            name: String::new(),
            mode: Mode::So,
            algorithm: Some(algorithm),
            dataset: DatasetSpec::default(),
            seeds,
            ga: GaParams::default(),
            eval: EvalDefaults::default(),
            evaluator: EvaluatorSpec::Surrogate,
            ssl: SslConfig::default(),
            default_policy: default_ssl_policy(),
            retrain_epochs: default_retrain_epochs(),
            batch_sizes: Vec::new(),
            baselines: false,
            landscape: LandscapeSettings::default(),
            output_dir: output_dir.into(),
        }
    }

    /// Desk-scale settings for the builtin trainer on mini-shapes:
    /// fine-tuned downstream with 3 epochs, 10 pretext epochs,
    /// 1000/500 samples, population 8 for 3 generations, seeds 0-2.
    pub fn desk(algorithm: SslAlgorithm, output_dir: impl Into<PathBuf>) -> Self {
        let mut cfg = Self::new(algorithm, vec![0, 1, 2], output_dir);
        cfg.name = "desk".into();
        cfg.evaluator = EvaluatorSpec::BuiltinSsl;
        cfg.baselines = true;
        cfg.ga.population_size = 8;
        cfg.ga.generations = 3;
        cfg.eval.downstream_epochs = 3;
        cfg.ssl.downstream_mode = DownstreamMode::FineTune;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return config_err(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.seeds.is_empty() {
            return config_err("seed list is empty");
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return config_err("seed list has duplicates");
        }
        match (self.mode, self.algorithm) {
            (Mode::So, None) => return config_err("SO mode needs an algorithm"),
            (Mode::Mo, Some(_)) => return config_err("algorithm applies to SO mode only"),
            _ => {}
        }
        self.ga_config(self.seeds[0]).validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.eval_context(self.seeds[0]).validate()?;
        for &b in &self.batch_sizes {
            if b == 0 {
                return config_err("batch sizes must be positive");
            }
        }
        if let DatasetSpec::Minishapes { n_train, .. } = self.dataset {
            let largest = self.batch_sizes.iter().copied().chain([self.eval.pretext_batch_size]).max().unwrap_or(0);
            if largest > n_train {
                return config_err(format!("pretext batch size {largest} exceeds the {n_train} training samples"));
            }
        }
        if let DatasetSpec::Cifar10 { train, test, .. } = &self.dataset {
            for p in [train, test] {
                if !p.exists() {
                    return config_err(format!("dataset file {} does not exist", p.display()));
                }
            }
        }
        if let EvaluatorSpec::External { command, timeout_secs } = &self.evaluator {
            if command.trim().is_empty() {
                return config_err("external evaluator command is empty");
            }
            if *timeout_secs == 0 {
                return config_err("external evaluator timeout must be positive");
            }
        }
        if self.retrain_epochs.contains(&0) {
            return config_err("retrain epochs must be positive");
        }
        check_unique(&self.default_policy).map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(g) = self.default_policy.iter().find(|g| !g.is_in_range()) {
            return config_err(format!("default policy intensity {} of {} out of range", g.intensity, g.op));
        }
        let grid = self.landscape.grid();
        if grid.alphas.is_empty() || !grid.alphas.contains(&0.0) {
            return config_err("landscape grid must contain 0 (use an even point count over a symmetric range)");
        }
        Ok(())
    }

    pub fn ga_config(&self, seed: u64) -> GaConfig {
        GaConfig {
            population_size: self.ga.population_size,
            generations: self.ga.generations,
            mode: self.mode,
            fixed_algorithm: self.algorithm.unwrap_or(SslAlgorithm::SimSiam),
            chromosome_length: self.ga.chromosome_length,
            master_seed: seed,
            elitism: self.ga.elitism,
            mo_algorithm_swap_prob: self.ga.mo_algorithm_swap_prob,
            mutation_guard: self.ga.mutation_guard,
        }
    }

    pub fn eval_context(&self, seed: u64) -> EvalContext {
        EvalContext {
            seed,
            algorithm: self.algorithm.unwrap_or(SslAlgorithm::SimSiam),
            pretext_batch_size: self.eval.pretext_batch_size,
            pretext_epochs: self.eval.pretext_epochs,
            downstream_epochs: self.eval.downstream_epochs,
        }
    }

    /// Algorithms under study: the fixed one in SO mode, all four in MO.
    pub fn algorithms(&self) -> Vec<SslAlgorithm> {
        match self.algorithm {
            Some(a) => vec![a],
            None => SslAlgorithm::ALL.to_vec(),
        }
    }

    /// Group suffix for the explain report, e.g. `minishapes/bs32`.
    pub fn group_tag(&self) -> String {
        format!("{}/bs{}", self.dataset.tag(), self.eval.pretext_batch_size)
    }
}

/// Dataset and evaluator of one configuration, built on first use.
pub struct Session {
    pub cfg: ExperimentConfig,
    data: OnceLock<PreparedData>,
    evaluator: OnceLock<Box<dyn Evaluator>>,
}

impl Session {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            data: OnceLock::new(),
            evaluator: OnceLock::new(),
        })
    }

    /// Uses `evaluator` instead of the one the configuration names.
    pub fn with_evaluator(cfg: ExperimentConfig, evaluator: Box<dyn Evaluator>) -> Result<Self> {
        let s = Self::new(cfg)?;
        let _ = s.evaluator.set(evaluator);
        Ok(s)
    }

    pub fn data(&self) -> Result<&PreparedData> {
        if let Some(d) = self.data.get() {
            return Ok(d);
        }
        let (train, test) = self.cfg.dataset.load()?;
        if self.cfg.eval.pretext_batch_size > train.len() {
            return config_err(format!(
                "pretext batch size {} exceeds the {} training samples",
                self.cfg.eval.pretext_batch_size,
                train.len()
            ));
        }
        Ok(self.data.get_or_init(|| PreparedData::new(train, test, &self.cfg.ssl)))
    }

    pub fn evaluator(&self) -> Result<&dyn Evaluator> {
        if let Some(e) = self.evaluator.get() {
            return Ok(e.as_ref());
        }
        let e: Box<dyn Evaluator> = match &self.cfg.evaluator {
            EvaluatorSpec::Surrogate => Box::new(SurrogateEvaluator::default()),
            EvaluatorSpec::BuiltinSsl => Box::new(SslEvaluator::new(self.data()?.clone(), self.cfg.ssl.clone())),
            EvaluatorSpec::External { command, timeout_secs } => {
                Box::new(ExternalEvaluator::command(command.clone()).with_timeout(Duration::from_secs(*timeout_secs)))
            }
        };
        Ok(self.evaluator.get_or_init(|| e).as_ref())
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Evaluator(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn runlog_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("runlog_{seed}.jsonl"))
}

/// Best record of a seed, as written to `best_policy_<seed>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestPolicy {
    pub seed: u64,
    pub algorithm: SslAlgorithm,
    pub fitness: f64,
    pub generation: usize,
    pub evaluation_id: u64,
    pub chromosome: Chromosome,
}

impl BestPolicy {
    fn of(record: &FitnessRecord) -> Self {
        Self {
            seed: record.seed,
            algorithm: record.algorithm,
            fitness: record.fitness,
            generation: record.generation,
            evaluation_id: record.evaluation_id,
            chromosome: record.chromosome.clone(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

/// Best record by fitness, ties to the earliest generation and id.
pub fn best_record(records: &[FitnessRecord]) -> Option<&FitnessRecord> {
    explain::ranked(records).first().map(|&i| &records[i])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Best fitness of every generation.
    pub trajectory: Vec<f64>,
    pub best: BestPolicy,
    pub evaluator_calls: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedSeed {
    pub seed: u64,
    pub generation: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub group: String,
    pub completed: Vec<SeedResult>,
    pub failed: Vec<FailedSeed>,
    /// No seed failed.
    pub complete: bool,
    /// Mean over completed seeds of the best fitness at each generation.
    pub avg_best: Vec<f64>,
    pub baselines: Vec<BaselineRow>,
}

impl ExperimentSummary {
    /// Mean over completed seeds of each seed's best fitness.
    pub fn mean_best(&self) -> Option<f64> {
        (!self.completed.is_empty())
            .then(|| self.completed.iter().map(|s| s.best.fitness).sum::<f64>() / self.completed.len() as f64)
    }
}

/// One GA run per seed; writes run logs, generation tables, best policies
/// and the summary files into the output directory.
pub fn run_experiment(session: &Session, jobs: usize) -> Result<ExperimentSummary> {
    let cfg = &session.cfg;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let evaluator = session.evaluator()?;
    let mut completed = Vec::new();
    let mut failed = Vec::new();
    for &seed in &cfg.seeds {
        info!("{}: seed {seed}", cfg.group_tag());
        let ga = GeneticAlgorithm::new(cfg.ga_config(seed), cfg.eval_context(seed), evaluator)
            .map_err(|e| HarnessError::Config(e.to_string()))?
            .jobs(jobs);
        let mut writer = RunLogWriter::create(runlog_path(out, seed))?;
        let mut write_err = None;
        let result = ga.run_with_sink(&mut |r| {
            if write_err.is_none() {
                write_err = writer.append(r).err();
            }
        });
        // sealed in both cases; a failed seed keeps its completed generations
        writer.seal()?;
        if let Some(e) = write_err {
            return Err(e.into());
        }
        match result {
            Ok(log) => {
                write_generations_csv(&log.generations, BufWriter::new(File::create(out.join(format!("generations_{seed}.csv")))?))?;
                let best = BestPolicy::of(best_record(&log.records).expect("a run has records"));
                write_json(&out.join(format!("best_policy_{seed}.json")), &best)?;
                let trajectory = log.best_trajectory();
                if cfg.ga.elitism > 0 && trajectory.windows(2).any(|w| w[1] < w[0]) {
                    warn!("seed {seed}: best-fitness trajectory decreased despite elitism");
                }
                completed.push(SeedResult {
                    seed,
                    trajectory,
                    best,
                    evaluator_calls: log.evaluator_calls,
                });
            }
            Err(f) => {
                warn!("seed {seed} failed in generation {}: {}", f.generation, f.source);
                failed.push(FailedSeed {
                    seed,
                    generation: f.generation,
                    error: f.source.to_string(),
                });
            }
        }
    }
    let generations = cfg.ga.generations;
    let avg_best = if completed.is_empty() {
        Vec::new()
    } else {
        (0..generations)
            .map(|g| completed.iter().map(|s| s.trajectory[g]).sum::<f64>() / completed.len() as f64)
            .collect()
    };
    let baselines = if cfg.baselines && !completed.is_empty() {
        run_baselines(session, jobs)?
    } else {
        Vec::new()
    };
    let summary = ExperimentSummary {
        name: cfg.name.clone(),
        group: cfg.group_tag(),
        complete: failed.is_empty(),
        completed,
        failed,
        avg_best,
        baselines,
    };
    write_summary(&summary, out)?;
    if summary.completed.is_empty() {
        return Err(HarnessError::Evaluator(format!(
            "every seed failed; first error: {}",
            summary.failed[0].error
        )));
    }
    Ok(summary)
}

fn write_summary(s: &ExperimentSummary, out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(out.join("summary.csv"))?);
    w.write_record(["generation", "avg_best", "min_best", "max_best", "seeds"])?;
    for (g, avg) in s.avg_best.iter().enumerate() {
        let col = s.completed.iter().map(|r| r.trajectory[g]);
        let min = col.clone().fold(f64::INFINITY, f64::min);
        let max = col.fold(f64::NEG_INFINITY, f64::max);
        w.write_record([g.to_string(), avg.to_string(), min.to_string(), max.to_string(), s.completed.len().to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(File::create(out.join("final_best.csv"))?);
    w.write_record(["seed", "status", "best_fitness", "algorithm", "best_chromosome"])?;
    for r in &s.completed {
        w.write_record([
            r.seed.to_string(),
            "ok".into(),
            r.best.fitness.to_string(),
            r.best.algorithm.to_string(),
            r.best.chromosome.to_json_line(),
        ])?;
    }
    for f in &s.failed {
        w.write_record([f.seed.to_string(), format!("failed: {}", f.error), String::new(), String::new(), String::new()])?;
    }
    w.flush()?;
    if !s.baselines.is_empty() {
        write_baselines_csv(&s.baselines, File::create(out.join("baselines.csv"))?)?;
    }
    write_json(&out.join("summary.json"), s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Supervised,
    SslDefault,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub kind: BaselineKind,
    /// None for the supervised baseline, which never runs a pretext task.
    pub algorithm: Option<SslAlgorithm>,
    pub seed: u64,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

/// Supervised and SSL-default baselines per seed, always computed with the
/// builtin trainer on the configured dataset.
pub fn run_baselines(session: &Session, jobs: usize) -> Result<Vec<BaselineRow>> {
    let cfg = &session.cfg;
    let data = session.data()?;
    let mut tasks: Vec<(BaselineKind, Option<SslAlgorithm>, u64)> = Vec::new();
    for &seed in &cfg.seeds {
        tasks.push((BaselineKind::Supervised, None, seed));
        for a in cfg.algorithms() {
            tasks.push((BaselineKind::SslDefault, Some(a), seed));
        }
    }
    let run = |&(kind, algorithm, seed): &(BaselineKind, Option<SslAlgorithm>, u64)| -> Result<BaselineRow> {
        let mut ctx = cfg.eval_context(seed);
        let result = match algorithm {
            None => run_supervised(data, &ctx, &cfg.ssl),
            Some(a) => {
                ctx.algorithm = a;
                run_policy(&cfg.default_policy, data, &ctx, &cfg.ssl)
            }
        };
        let (accuracy, flag) = match result {
            Ok(d) => (d.accuracy, None),
            Err(SslError::Diverged(what)) => (0.0, Some(format!("training diverged: non-finite {what}"))),
            Err(e) => return Err(e.into()),
        };
        Ok(BaselineRow {
            kind,
            algorithm,
            seed,
            accuracy,
            flag,
        })
    };
    let rows: Vec<Result<BaselineRow>> = if jobs > 1 {
        use rayon::prelude::*;
        thread_pool(jobs)?.install(|| tasks.par_iter().map(run).collect())
    } else {
        tasks.iter().map(run).collect()
    };
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    for e in baseline_expectations(&rows) {
        if !e.met {
            warn!(
                "{}: SSL-default mean {:.4} below supervised mean {:.4}",
                e.algorithm, e.ssl_default_mean, e.supervised_mean
            );
        }
    }
    Ok(rows)
}

/// The recorded expectation SSL-default >= supervised, per algorithm, on
/// means over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineExpectation {
    pub algorithm: SslAlgorithm,
    pub ssl_default_mean: f64,
    pub supervised_mean: f64,
    pub met: bool,
}

pub fn baseline_expectations(rows: &[BaselineRow]) -> Vec<BaselineExpectation> {
    let mean = |it: Vec<f64>| it.iter().sum::<f64>() / it.len().max(1) as f64;
    let supervised_mean = mean(rows.iter().filter(|r| r.kind == BaselineKind::Supervised).map(|r| r.accuracy).collect());
    SslAlgorithm::ALL
        .into_iter()
        .filter_map(|a| {
            let v: Vec<f64> = rows.iter().filter(|r| r.algorithm == Some(a)).map(|r| r.accuracy).collect();
            (!v.is_empty()).then(|| {
                let ssl_default_mean = mean(v);
                BaselineExpectation {
                    algorithm: a,
                    ssl_default_mean,
                    supervised_mean,
                    met: ssl_default_mean >= supervised_mean,
                }
            })
        })
        .collect()
}

pub fn write_baselines_csv(rows: &[BaselineRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["kind", "algorithm", "seed", "accuracy", "flag"])?;
    for r in rows {
        out.write_record([
            match r.kind {
                BaselineKind::Supervised => "supervised",
                BaselineKind::SslDefault => "ssl-default",
            }
            .to_string(),
            r.algorithm.map(|a| a.to_string()).unwrap_or_default(),
            r.seed.to_string(),
            r.accuracy.to_string(),
            r.flag.clone().unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Runs `run_experiment` once per pretext batch size, each in `bs<n>/`
/// under the output directory, and writes `batch_study.csv`.
pub fn run_batch_study(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<(usize, ExperimentSummary)>> {
    let sizes = if cfg.batch_sizes.is_empty() {
        vec![cfg.eval.pretext_batch_size]
    } else {
        cfg.batch_sizes.clone()
    };
    let mut results = Vec::new();
    for b in sizes {
        let mut c = cfg.clone();
        c.eval.pretext_batch_size = b;
        c.output_dir = cfg.output_dir.join(format!("bs{b}"));
        let summary = run_experiment(&Session::new(c)?, jobs)?;
        results.push((b, summary));
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let mut w = csv::Writer::from_writer(File::create(cfg.output_dir.join("batch_study.csv"))?);
    w.write_record(["batch_size", "seed", "best_fitness", "algorithm"])?;
    for (b, s) in &results {
        for r in &s.completed {
            w.write_record([b.to_string(), r.seed.to_string(), r.best.fitness.to_string(), r.best.algorithm.to_string()])?;
        }
    }
    w.flush()?;
    Ok(results)
}

/// Every sealed run log in `dir`, ordered by seed.
pub fn load_runlogs(dir: &Path) -> Result<Vec<(u64, Vec<FitnessRecord>)>> {
    let mut logs = Vec::new();
    if !dir.is_dir() {
        return Ok(logs);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(seed) = name.strip_prefix("runlog_").and_then(|s| s.strip_suffix(".jsonl")) else {
            continue;
        };
        let Ok(seed) = seed.parse::<u64>() else { continue };
        let records = read_runlog(&path)?;
        if !records.is_empty() {
            logs.push((seed, records));
        }
    }
    logs.sort_by_key(|(s, _)| *s);
    Ok(logs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainRow {
    pub seed: u64,
    pub algorithm: SslAlgorithm,
    pub epochs: usize,
    pub base_epochs: usize,
    pub base_accuracy: f64,
    pub accuracy: f64,
    pub delta: f64,
    pub chromosome: Chromosome,
}

/// Retrains the best chromosome of every (seed, algorithm) in the run logs
/// with each of `cfg.retrain_epochs` pretext epochs and reports the change
/// against the configured pretext epochs. Writes `retrain.csv`.
pub fn retrain_best(session: &Session, jobs: usize) -> Result<Vec<RetrainRow>> {
    let cfg = &session.cfg;
    let logs = load_runlogs(&cfg.output_dir)?;
    if logs.is_empty() {
        return Err(HarnessError::EmptyLog(cfg.output_dir.clone()));
    }
    let evaluator = session.evaluator()?;
    let mut targets: Vec<(u64, SslAlgorithm, Chromosome)> = Vec::new();
    for (seed, records) in &logs {
        for a in SslAlgorithm::ALL {
            let own: Vec<FitnessRecord> = records.iter().filter(|r| r.algorithm == a).cloned().collect();
            if let Some(best) = best_record(&own) {
                targets.push((*seed, a, best.chromosome.clone()));
            }
        }
    }
    let base_epochs = cfg.eval.pretext_epochs;
    let mut tasks: Vec<(usize, usize)> = Vec::new();
    for t in 0..targets.len() {
        tasks.push((t, base_epochs));
        for &e in &cfg.retrain_epochs {
            tasks.push((t, e));
        }
    }
    let run = |&(t, epochs): &(usize, usize)| -> std::result::Result<f64, EvalError> {
        let (seed, algorithm, ref c) = targets[t];
        let ctx = EvalContext {
            algorithm,
            pretext_epochs: epochs,
            ..cfg.eval_context(seed)
        };
        evaluator.evaluate(c, &ctx).map(|e| e.fitness)
    };
    let acc: Vec<std::result::Result<f64, EvalError>> = if jobs > 1 && evaluator.concurrency() == crate::fitness::Concurrency::Concurrent {
        use rayon::prelude::*;
        thread_pool(jobs)?.install(|| tasks.par_iter().map(run).collect())
    } else {
        tasks.iter().map(run).collect()
    };
    let acc = acc.into_iter().collect::<std::result::Result<Vec<_>, _>>()?;
    let per = 1 + cfg.retrain_epochs.len();
    let mut rows = Vec::new();
    for (t, (seed, algorithm, c)) in targets.iter().enumerate() {
        let base = acc[t * per];
        for (k, &epochs) in cfg.retrain_epochs.iter().enumerate() {
            let a = acc[t * per + 1 + k];
            rows.push(RetrainRow {
                seed: *seed,
                algorithm: *algorithm,
                epochs,
                base_epochs,
                base_accuracy: base,
                accuracy: a,
                delta: a - base,
                chromosome: c.clone(),
            });
        }
    }
    let mut w = csv::Writer::from_writer(File::create(cfg.output_dir.join("retrain.csv"))?);
    w.write_record(["seed", "algorithm", "epochs", "base_epochs", "base_accuracy", "accuracy", "delta", "chromosome"])?;
    for r in &rows {
        w.write_record([
            r.seed.to_string(),
            r.algorithm.to_string(),
            r.epochs.to_string(),
            r.base_epochs.to_string(),
            r.base_accuracy.to_string(),
            r.accuracy.to_string(),
            r.delta.to_string(),
            r.chromosome.to_json_line(),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}

/// Sensitivity and importance per (operator, algorithm/dataset/batch)
/// group over all run logs of an experiment, including batch-study
/// subdirectories. Writes `explain.csv`.
pub fn explain_outputs(cfg: &ExperimentConfig, top_n: usize) -> Result<Vec<ReportRow>> {
    let mut dirs: Vec<(PathBuf, usize)> = vec![(cfg.output_dir.clone(), cfg.eval.pretext_batch_size)];
    if cfg.output_dir.is_dir() {
        let mut subs: Vec<(PathBuf, usize)> = fs::read_dir(&cfg.output_dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_str()?.to_string();
                let b = name.strip_prefix("bs")?.parse().ok()?;
                e.path().is_dir().then_some((e.path(), b))
            })
            .collect();
        subs.sort_by_key(|(_, b)| *b);
        dirs.extend(subs);
    }
    let mut groups: Vec<AnalysisLog> = Vec::new();
    for (dir, batch) in dirs {
        let records: Vec<FitnessRecord> = load_runlogs(&dir)?.into_iter().flat_map(|(_, r)| r).collect();
        if records.is_empty() {
            continue;
        }
        let suffix = format!("{}/bs{batch}", cfg.dataset.tag());
        groups.extend(explain::group_by_algorithm(&records, &suffix));
    }
    if groups.is_empty() {
        return Err(HarnessError::EmptyLog(cfg.output_dir.clone()));
    }
    let rows = explain::stacked_report(&groups, top_n);
    explain::write_report_csv(&rows, File::create(cfg.output_dir.join("explain.csv"))?)?;
    Ok(rows)
}

/// Retrains the best policy of `seed` with the builtin trainer and writes
/// `landscape_<tag>.csv`, its manifest and the checkpoint.
pub fn landscape_for_seed(session: &Session, seed: u64, jobs: usize) -> Result<(String, LandscapeManifest)> {
    let cfg = &session.cfg;
    let path = cfg.output_dir.join(format!("best_policy_{seed}.json"));
    if !path.exists() {
        return Err(HarnessError::EmptyLog(path));
    }
    let best = BestPolicy::load(&path)?;
    let data = session.data()?;
    let ctx = EvalContext {
        algorithm: best.algorithm,
        ..cfg.eval_context(seed)
    };
    let downstream = run_policy(&best.chromosome.genes, data, &ctx, &cfg.ssl)?;
    let model = landscape::downstream_checkpoint(&downstream);
    let tag = format!("{}_bs{}_seed{seed}", best.algorithm.name().to_lowercase(), cfg.eval.pretext_batch_size);
    write_checkpoint(&model, BufWriter::new(File::create(cfg.output_dir.join(format!("model_{tag}.ckpt")))?))
        .map_err(|e| HarnessError::Io(io::Error::other(e.to_string())))?;
    let s = &cfg.landscape;
    let (x, labels) = match s.split {
        Split::Test => (&data.test_x, &data.test.labels),
        Split::Train => (&data.train_x, &data.train.labels),
    };
    let delta = landscape::sample_direction(&model, s.scope, &mut substream(seed, "landscape-delta", &[]));
    let eta = landscape::sample_direction(&model, s.scope, &mut substream(seed, "landscape-eta", &[]));
    let grid = s.grid();
    let result = landscape::compute_grid(&model, &x.view(), labels, &grid, &delta, &eta, jobs)?;
    landscape::write_grid_csv(&result, File::create(cfg.output_dir.join(format!("landscape_{tag}.csv")))?)?;
    let manifest = LandscapeManifest {
        seed,
        checkpoint_sha256: landscape::checkpoint_id(&model),
        eval_split: match s.split {
            Split::Test => "test".into(),
            Split::Train => "train".into(),
        },
        scope: s.scope,
        grid,
        center_loss: result.center_loss,
        zero_rows: delta.zero_rows.len() + eta.zero_rows.len(),
    };
    write_json(&cfg.output_dir.join(format!("landscape_{tag}.json")), &manifest)?;
    Ok((tag, manifest))
}

/// Fitness of one policy under every configured seed and algorithm.
pub fn eval_policy(session: &Session, genes: &[Gene]) -> Result<Vec<(SslAlgorithm, u64, f64)>> {
    let cfg = &session.cfg;
    let evaluator = session.evaluator()?;
    let c = Chromosome::new(genes.to_vec());
    check_unique(genes).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut out = Vec::new();
    for a in cfg.algorithms() {
        for &seed in &cfg.seeds {
            let ctx = EvalContext {
                algorithm: a,
                ..cfg.eval_context(seed)
            };
            out.push((a, seed, evaluator.evaluate(&c, &ctx)?.fitness));
        }
    }
    Ok(out)
}

/// Parses `Op:intensity,Op:intensity`; an empty string is the empty policy.
pub fn parse_policy(text: &str) -> std::result::Result<Vec<Gene>, String> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|g| {
            let (op, v) = g.split_once(':').ok_or_else(|| format!("expected Op:intensity, got `{g}`"))?;
            let op: Operator = op.trim().parse().map_err(|e: crate::augment::UnknownOperator| e.to_string())?;
            let v: f64 = v.trim().parse().map_err(|_| format!("bad intensity `{v}`"))?;
            let gene = Gene::new(op, v);
            if !gene.is_in_range() {
                return Err(format!("intensity {v} outside the range of {op}"));
            }
            Ok(gene)
        })
        .collect()
}

/// Writes mini-shapes train and test splits in the CIFAR-10 record format.
pub fn export_minishapes(seed: u64, n_train: usize, n_test: usize, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let (train, test) = generate_minishapes(seed, n_train, n_test)?;
    let tr = dir.join("minishapes_train.bin");
    let te = dir.join("minishapes_test.bin");
    for (ds, path) in [(&train, &tr), (&test, &te)] {
        let mut w = BufWriter::new(File::create(path)?);
        write_cifar10(ds, &mut w)?;
        w.flush()?;
    }
    Ok((tr, te))
}

/// Per-algorithm comparison of the evolved best against both baselines,
/// each a mean over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalRow {
    pub algorithm: SslAlgorithm,
    pub evolved_best: f64,
    pub ssl_default: f64,
    pub supervised: f64,
}

impl DirectionalRow {
    /// evolved >= SSL-default >= supervised and evolved − supervised >=
    /// `margin`.
    pub fn holds(&self, margin: f64) -> bool {
        self.evolved_best >= self.ssl_default
            && self.ssl_default >= self.supervised
            && self.evolved_best - self.supervised >= margin
    }
}

/// Runs `base` once per algorithm (SO mode, with baselines) in
/// `<output>/<algorithm>/` and writes `directional.csv`.
pub fn run_directional(base: &ExperimentConfig, jobs: usize) -> Result<Vec<DirectionalRow>> {
    let mut rows = Vec::new();
    for a in SslAlgorithm::ALL {
        let mut cfg = base.clone();
        cfg.mode = Mode::So;
        cfg.algorithm = Some(a);
        cfg.baselines = true;
        cfg.output_dir = base.output_dir.join(a.name());
        let summary = run_experiment(&Session::new(cfg)?, jobs)?;
        let mean = |kind: BaselineKind| {
            let v: Vec<f64> = summary.baselines.iter().filter(|r| r.kind == kind).map(|r| r.accuracy).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        rows.push(DirectionalRow {
            algorithm: a,
            evolved_best: summary.mean_best().expect("run_experiment returns only with a completed seed"),
            ssl_default: mean(BaselineKind::SslDefault),
            supervised: mean(BaselineKind::Supervised),
        });
    }
    let mut w = csv::Writer::from_writer(File::create(base.output_dir.join("directional.csv"))?);
    w.write_record(["algorithm", "evolved_best", "ssl_default", "supervised"])?;
    for r in &rows {
        w.write_record([r.algorithm.to_string(), r.evolved_best.to_string(), r.ssl_default.to_string(), r.supervised.to_string()])?;
    }
    w.flush()?;
    Ok(rows)
}
