//! The genetic algorithm: roulette selection, partially mapped crossover,
//! incremental intensity mutation, adaptive rates and the generational loop.

use std::collections::HashMap;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{Gene, Operator};
use crate::fitness::{Concurrency, EvalContext, EvalError, Evaluation, Evaluator};
use crate::policy::{random_chromosome, Chromosome, ChromosomeKey, Mode, SslAlgorithm};
use crate::rng::substream;

/// Which fitness guards the piecewise mutation-rate formula.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MutationGuard {
    /// Compare the individual's own fitness against the mean.
    #[default]
    Individual,
    /// Compare the larger fitness of the pair against the mean.
    PairMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population_size: usize,
    pub generations: usize,
    pub mode: Mode,
    /// Algorithm used for every evaluation in SO mode.
    pub fixed_algorithm: SslAlgorithm,
    /// Genes per chromosome.
    pub chromosome_length: usize,
    pub master_seed: u64,
    pub elitism: usize,
    pub mo_algorithm_swap_prob: f64,
    pub mutation_guard: MutationGuard,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 15,
            generations: 10,
            mode: Mode::So,
            fixed_algorithm: SslAlgorithm::SimSiam,
            chromosome_length: crate::policy::DEFAULT_LENGTH,
            master_seed: 0,
            elitism: 1,
            mo_algorithm_swap_prob: 0.5,
            mutation_guard: MutationGuard::Individual,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), EvolveError> {
        let bad = |msg: &str| Err(EvolveError::InvalidConfig(msg.to_string()));
        if self.population_size < 2 {
            return bad("population_size must be at least 2");
        }
        if self.generations < 1 {
            return bad("generations must be at least 1");
        }
        if self.elitism >= self.population_size {
            return bad("elitism must be smaller than population_size");
        }
        if self.chromosome_length == 0 || self.chromosome_length > Operator::COUNT {
            return bad("chromosome_length must be within 1..=12");
        }
        if !(0.0..=1.0).contains(&self.mo_algorithm_swap_prob) {
            return bad("mo_algorithm_swap_prob must be a probability");
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EvolveError {
    #[error("invalid GA configuration: {0}")]
    InvalidConfig(String),
    #[error("parents differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("fitness values must be finite and non-negative")]
    NegativeFitness,
    #[error("cannot select from an empty population")]
    EmptyPopulation,
}

/// One evaluated population slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessRecord {
    pub evaluation_id: u64,
    pub generation: usize,
    pub slot: usize,
    pub seed: u64,
    pub algorithm: SslAlgorithm,
    pub fitness: f64,
    pub chromosome: Chromosome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationStats {
    pub f_max: f64,
    pub f_mean: f64,
    pub f_min: f64,
    pub best_chromosome: Chromosome,
}

impl PopulationStats {
    /// Statistics over `(chromosome, fitness)` pairs; the first maximal
    /// entry is the best.
    pub fn from_population(pop: &[Chromosome], fitness: &[f64]) -> Self {
        assert!(!pop.is_empty() && pop.len() == fitness.len());
        let mut best = 0;
        for (i, &f) in fitness.iter().enumerate() {
            if f > fitness[best] {
                best = i;
            }
        }
        Self {
            f_max: fitness[best],
            f_mean: fitness.iter().sum::<f64>() / fitness.len() as f64,
            f_min: fitness.iter().copied().fold(f64::INFINITY, f64::min),
            best_chromosome: pop[best].clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub generation: usize,
    #[serde(flatten)]
    pub stats: PopulationStats,
}

/// Complete history of one GA run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<FitnessRecord>,
    pub generations: Vec<GenerationSummary>,
    pub evaluator_calls: usize,
    /// Generations whose selection fell back to uniform because every
    /// fitness was zero.
    pub uniform_fallbacks: Vec<usize>,
}

impl RunLog {
    /// Best fitness of each generation.
    pub fn best_trajectory(&self) -> Vec<f64> {
        self.generations.iter().map(|g| g.stats.f_max).collect()
    }

    pub fn best(&self) -> Option<&GenerationSummary> {
        // the last generation holds the running best when elitism >= 1, but
        // scan anyway so that elitism 0 runs report correctly
        self.generations
            .iter()
            .fold(None, |acc: Option<&GenerationSummary>, g| match acc {
                Some(a) if a.stats.f_max >= g.stats.f_max => Some(a),
                _ => Some(g),
            })
    }
}

/// A run aborted by an evaluator failure, with the log up to the last
/// complete generation.
#[derive(Debug, Error)]
#[error("evaluator failure in generation {generation}: {source}")]
pub struct GaFailure {
    pub generation: usize,
    pub partial: RunLog,
    #[source]
    pub source: EvalError,
}

/// Outcome of roulette selection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub indices: Vec<usize>,
    /// Every fitness was zero and selection was uniform instead.
    pub uniform_fallback: bool,
}

/// Fitness-proportionate selection with replacement.
pub fn roulette_select<R: Rng + ?Sized>(
    fitness: &[f64],
    count: usize,
    rng: &mut R,
) -> Result<Selection, EvolveError> {
    if fitness.is_empty() {
        return Err(EvolveError::EmptyPopulation);
    }
    if fitness.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(EvolveError::NegativeFitness);
    }
    if fitness.iter().all(|&f| f == 0.0) {
        let indices = (0..count).map(|_| rng.random_range(0..fitness.len())).collect();
        return Ok(Selection {
            indices,
            uniform_fallback: true,
        });
    }
    let wheel = WeightedIndex::new(fitness).map_err(|_| EvolveError::NegativeFitness)?;
    Ok(Selection {
        indices: (0..count).map(|_| wheel.sample(rng)).collect(),
        uniform_fallback: false,
    })
}

/// Partially mapped crossover over the inclusive segment `[a, b]`.
///
/// Operators are exchanged inside the segment; outside it, a duplicate is
/// replaced by following the segment mapping until it is fresh. In each
/// child, an operator that also occurs in the child's base parent keeps that
/// parent's intensity; any other operator keeps the intensity it had in the
/// parent it came from.
pub fn pmx_with_segment(
    p1: &Chromosome,
    p2: &Chromosome,
    a: usize,
    b: usize,
) -> Result<(Chromosome, Chromosome), EvolveError> {
    if p1.len() != p2.len() {
        return Err(EvolveError::LengthMismatch(p1.len(), p2.len()));
    }
    assert!(a <= b && b < p1.len(), "segment [{a},{b}] out of bounds");
    Ok((pmx_child(p1, p2, a, b), pmx_child(p2, p1, a, b)))
}

fn pmx_child(base: &Chromosome, donor: &Chromosome, a: usize, b: usize) -> Chromosome {
    let seg_donor: Vec<Operator> = donor.genes[a..=b].iter().map(|g| g.op).collect();
    let mut ops: Vec<Operator> = base.operators().collect();
    ops[a..=b].copy_from_slice(&seg_donor);
    for (i, slot) in ops.iter_mut().enumerate() {
        if (a..=b).contains(&i) {
            continue;
        }
        // follow donor[j] -> base[j] until the operator is not in the segment
        while let Some(j) = seg_donor.iter().position(|&op| op == *slot) {
            *slot = base.genes[a + j].op;
        }
    }
    let intensity_of = |op: Operator| {
        base.genes
            .iter()
            .chain(&donor.genes)
            .find(|g| g.op == op)
            .map(|g| g.intensity)
            .expect("every child operator comes from a parent")
    };
    Chromosome {
        algorithm: base.algorithm,
        genes: ops
            .into_iter()
            .map(|op| Gene::new(op, intensity_of(op)))
            .collect(),
    }
}

/// Draws the segment uniformly and performs [`pmx_with_segment`]; when both
/// parents carry an algorithm gene, the genes are swapped with probability
/// `swap_prob`.
pub fn pmx_crossover<R: Rng + ?Sized>(
    p1: &Chromosome,
    p2: &Chromosome,
    swap_prob: f64,
    rng: &mut R,
) -> Result<(Chromosome, Chromosome), EvolveError> {
    if p1.len() != p2.len() {
        return Err(EvolveError::LengthMismatch(p1.len(), p2.len()));
    }
    if p1.is_empty() {
        return Ok((p1.clone(), p2.clone()));
    }
    let x = rng.random_range(0..p1.len());
    let y = rng.random_range(0..p1.len());
    let (mut c1, mut c2) = pmx_with_segment(p1, p2, x.min(y), x.max(y))?;
    if c1.algorithm.is_some() && c2.algorithm.is_some() && rng.random::<f64>() < swap_prob {
        std::mem::swap(&mut c1.algorithm, &mut c2.algorithm);
    }
    Ok((c1, c2))
}

/// Mutation step size: a tenth of the operator's intensity range.
pub fn increment(op: Operator) -> f64 {
    let r = op.range();
    (r.max - r.min) / 10.0
}

/// Moves a gene's intensity one increment up or down, clamped to range.
pub fn step_intensity(gene: Gene, up: bool) -> Gene {
    let delta = if up { increment(gene.op) } else { -increment(gene.op) };
    Gene::new(gene.op, gene.op.range().clamp(gene.intensity + delta))
}

/// Mutates each gene with probability `1/l` by one increment in a random
/// direction. An algorithm gene, when present, is reassigned to one of the
/// other algorithms with the same probability. Operators never change.
pub fn mut_gaussian_choice<R: Rng + ?Sized>(c: &Chromosome, rng: &mut R) -> Chromosome {
    let mut out = c.clone();
    if out.is_empty() {
        return out;
    }
    let p = 1.0 / out.len() as f64;
    for gene in &mut out.genes {
        if rng.random::<f64>() < p {
            let up = rng.random::<bool>();
            *gene = step_intensity(*gene, up);
        }
    }
    if let Some(current) = out.algorithm {
        if rng.random::<f64>() < p {
            let others: Vec<SslAlgorithm> = SslAlgorithm::ALL
                .into_iter()
                .filter(|&a| a != current)
                .collect();
            out.algorithm = Some(others[rng.random_range(0..others.len())]);
        }
    }
    out
}

/// Adaptive crossover and mutation rates.
///
/// `f_pair_max` is the larger fitness of the pair considered for crossover,
/// `f_individual` the fitness of the individual considered for mutation.
pub fn adaptive_rates(stats: &PopulationStats, f_pair_max: f64, f_individual: f64) -> (f64, f64) {
    adaptive_rates_guarded(stats, f_pair_max, f_individual, MutationGuard::Individual)
}

pub fn adaptive_rates_guarded(
    stats: &PopulationStats,
    f_pair_max: f64,
    f_individual: f64,
    guard: MutationGuard,
) -> (f64, f64) {
    let (f_max, f_mean) = (stats.f_max, stats.f_mean);
    let spread = f_max - f_mean;
    if spread <= 0.0 {
        // 0/0 in both formulas: explore maximally
        return (1.0, 0.5);
    }
    let p_c = if f_pair_max >= f_mean {
        ((f_max - f_pair_max) / spread).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let guard_value = match guard {
        MutationGuard::Individual => f_individual,
        MutationGuard::PairMax => f_pair_max,
    };
    let p_m = if guard_value >= f_mean {
        ((f_max - f_individual) / spread).clamp(0.0, 1.0)
    } else {
        0.5
    };
    (p_c, p_m)
}

/// Generational GA with memoized evaluation.
pub struct GeneticAlgorithm<'a> {
    cfg: GaConfig,
    base_ctx: EvalContext,
    evaluator: &'a dyn Evaluator,
    jobs: usize,
    memo: HashMap<ChromosomeKey, Evaluation>,
}

impl<'a> GeneticAlgorithm<'a> {
    /// `base_ctx.seed` fixes the randomness of every evaluation in the run;
    /// its algorithm is replaced by the configured or chromosome algorithm.
    pub fn new(
        cfg: GaConfig,
        base_ctx: EvalContext,
        evaluator: &'a dyn Evaluator,
    ) -> Result<Self, EvolveError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            base_ctx,
            evaluator,
            jobs: 1,
            memo: HashMap::new(),
        })
    }

    /// Maximum number of concurrent evaluations.
    pub fn jobs(mut self, jobs: usize) -> Self {
        self.jobs = jobs.max(1);
        self
    }

    fn context_for(&self, c: &Chromosome) -> EvalContext {
        let algorithm = match self.cfg.mode {
            Mode::So => self.cfg.fixed_algorithm,
            Mode::Mo => c.algorithm.unwrap_or(self.cfg.fixed_algorithm),
        };
        EvalContext {
            algorithm,
            ..self.base_ctx.clone()
        }
    }

    fn initial_population(&self) -> Vec<Chromosome> {
        let mut rng = substream(self.cfg.master_seed, "ga-init", &[]);
        (0..self.cfg.population_size)
            .map(|_| {
                random_chromosome(&mut rng, self.cfg.mode, self.cfg.chromosome_length)
                    .expect("length validated in GaConfig")
            })
            .collect()
    }

    /// Evaluates every slot, calling the evaluator only for chromosomes not
    /// seen before in this run.
    fn evaluate_population(
        &mut self,
        pop: &[Chromosome],
        calls: &mut usize,
    ) -> Result<Vec<Evaluation>, EvalError> {
        let mut pending: Vec<(ChromosomeKey, Chromosome, EvalContext)> = Vec::new();
        for c in pop {
            let key = c.key();
            if !self.memo.contains_key(&key) && !pending.iter().any(|(k, _, _)| *k == key) {
                let ctx = self.context_for(c);
                pending.push((key, c.clone(), ctx));
            }
        }
        let parallel = self.jobs > 1
            && pending.len() > 1
            && self.evaluator.concurrency() == Concurrency::Concurrent;
        let results: Vec<Result<Evaluation, EvalError>> = if parallel {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.jobs)
                .build()
                .map_err(|e| EvalError::Internal(e.to_string()))?;
            let evaluator = self.evaluator;
            pool.install(|| {
                pending
                    .par_iter()
                    .map(|(_, c, ctx)| evaluator.evaluate(c, ctx))
                    .collect()
            })
        } else {
            pending
                .iter()
                .map(|(_, c, ctx)| self.evaluator.evaluate(c, ctx))
                .collect()
        };
        *calls += pending.len();
        for ((key, _, _), result) in pending.into_iter().zip(results) {
            let eval = result?;
            if !(0.0..=1.0).contains(&eval.fitness) {
                return Err(EvalError::OutOfRange(eval.fitness));
            }
            self.memo.insert(key, eval);
        }
        Ok(pop.iter().map(|c| self.memo[&c.key()].clone()).collect())
    }

    fn breed<R: Rng>(
        &self,
        pop: &[Chromosome],
        fitness: &[f64],
        stats: &PopulationStats,
        rng: &mut R,
    ) -> (Vec<Chromosome>, bool) {
        let n = self.cfg.population_size;
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&i, &j| fitness[j].total_cmp(&fitness[i]).then(i.cmp(&j)));
        let mut next: Vec<Chromosome> = order[..self.cfg.elitism]
            .iter()
            .map(|&i| pop[i].clone())
            .collect();
        let mut fell_back = false;
        while next.len() < n {
            let sel = roulette_select(fitness, 2, rng).expect("fitness validated in [0,1]");
            fell_back |= sel.uniform_fallback;
            let (i, j) = (sel.indices[0], sel.indices[1]);
            let f_pair = fitness[i].max(fitness[j]);
            let guard = self.cfg.mutation_guard;
            let (p_c, _) = adaptive_rates_guarded(stats, f_pair, f_pair, guard);
            let (c1, c2) = if rng.random::<f64>() < p_c {
                pmx_crossover(&pop[i], &pop[j], self.cfg.mo_algorithm_swap_prob, rng)
                    .expect("population members share a length")
            } else {
                (pop[i].clone(), pop[j].clone())
            };
            for (child, f_parent) in [(c1, fitness[i]), (c2, fitness[j])] {
                let (_, p_m) = adaptive_rates_guarded(stats, f_pair, f_parent, guard);
                let child = if rng.random::<f64>() < p_m {
                    mut_gaussian_choice(&child, rng)
                } else {
                    child
                };
                if next.len() < n {
                    next.push(child);
                }
            }
        }
        (next, fell_back)
    }

    /// Runs to completion; `sink` receives every record as soon as its
    /// generation has been evaluated.
    pub fn run_with_sink(
        mut self,
        sink: &mut dyn FnMut(&FitnessRecord),
    ) -> Result<RunLog, GaFailure> {
        let mut log = RunLog::default();
        let mut pop = self.initial_population();
        let mut next_id = 0u64;
        for generation in 0..self.cfg.generations {
            let evals = match self.evaluate_population(&pop, &mut log.evaluator_calls) {
                Ok(e) => e,
                Err(source) => {
                    return Err(GaFailure {
                        generation,
                        partial: log,
                        source,
                    })
                }
            };
            let fitness: Vec<f64> = evals.iter().map(|e| e.fitness).collect();
            for (slot, (c, e)) in pop.iter().zip(&evals).enumerate() {
                let record = FitnessRecord {
                    evaluation_id: next_id,
                    generation,
                    slot,
                    seed: self.base_ctx.seed,
                    algorithm: self.context_for(c).algorithm,
                    fitness: e.fitness,
                    chromosome: c.clone(),
                    flag: e.flag.clone(),
                };
                next_id += 1;
                sink(&record);
                log.records.push(record);
            }
            let stats = PopulationStats::from_population(&pop, &fitness);
            log.generations.push(GenerationSummary {
                generation,
                stats: stats.clone(),
            });
            if generation + 1 == self.cfg.generations {
                break;
            }
            let mut rng = substream(self.cfg.master_seed, "ga-breed", &[generation as u64]);
            let (next, fell_back) = self.breed(&pop, &fitness, &stats, &mut rng);
            if fell_back {
                warn!("generation {generation}: all fitness zero, uniform selection used");
                log.uniform_fallbacks.push(generation);
            }
            pop = next;
        }
        Ok(log)
    }

    pub fn run(self) -> Result<RunLog, GaFailure> {
        self.run_with_sink(&mut |_| {})
    }
}

/// Runs the GA with one job.
pub fn run_ga(
    cfg: &GaConfig,
    base_ctx: &EvalContext,
    evaluator: &dyn Evaluator,
) -> Result<RunLog, RunGaError> {
    let ga = GeneticAlgorithm::new(cfg.clone(), base_ctx.clone(), evaluator)?;
    Ok(ga.run()?)
}

#[derive(Debug, Error)]
pub enum RunGaError {
    #[error(transparent)]
    Config(#[from] EvolveError),
    #[error(transparent)]
    Evaluator(#[from] GaFailure),
}

/// Uniform random search with a budget of `budget` chromosomes; returns the
/// best fitness found. Used as the equal-budget reference for the GA.
pub fn random_search(
    cfg: &GaConfig,
    base_ctx: &EvalContext,
    evaluator: &dyn Evaluator,
    budget: usize,
) -> Result<f64, EvalError> {
    let mut rng = substream(cfg.master_seed, "random-search", &[]);
    let mut best = f64::NEG_INFINITY;
    for _ in 0..budget {
        let c = random_chromosome(&mut rng, cfg.mode, cfg.chromosome_length)
            .map_err(|e| EvalError::Internal(e.to_string()))?;
        let algorithm = match cfg.mode {
            Mode::So => cfg.fixed_algorithm,
            Mode::Mo => c.algorithm.unwrap_or(cfg.fixed_algorithm),
        };
        let ctx = EvalContext {
            algorithm,
            ..base_ctx.clone()
        };
        best = best.max(evaluator.evaluate(&c, &ctx)?.fitness);
    }
    Ok(best)
}
