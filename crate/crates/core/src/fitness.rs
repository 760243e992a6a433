//! Fitness evaluation: the evaluator interface, a closed-form surrogate
//! landscape and a client for external worker processes.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::Operator;
use crate::policy::{Chromosome, SslAlgorithm};

/// Everything besides the chromosome that determines a fitness value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalContext {
    pub seed: u64,
    pub algorithm: SslAlgorithm,
    pub pretext_batch_size: usize,
    pub pretext_epochs: usize,
    pub downstream_epochs: usize,
}

impl Default for EvalContext {
    fn default() -> Self {
        Self {
            seed: 0,
            algorithm: SslAlgorithm::SimSiam,
            pretext_batch_size: 32,
            pretext_epochs: 10,
            downstream_epochs: 10,
        }
    }
}

impl EvalContext {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.pretext_batch_size == 0 {
            return Err(EvalError::InvalidContext("pretext_batch_size must be positive".into()));
        }
        if self.pretext_epochs == 0 || self.downstream_epochs == 0 {
            return Err(EvalError::InvalidContext("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// A fitness value, possibly flagged (e.g. training diverged and the
/// fitness was set to zero).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub fitness: f64,
    pub flag: Option<String>,
}

impl Evaluation {
    pub fn new(fitness: f64) -> Self {
        Self { fitness, flag: None }
    }

    pub fn flagged(fitness: f64, flag: impl Into<String>) -> Self {
        Self {
            fitness,
            flag: Some(flag.into()),
        }
    }
}

/// Whether an evaluator tolerates concurrent `evaluate` calls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Concurrency {
    Concurrent,
    Serial,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation context: {0}")]
    InvalidContext(String),
    #[error("fitness {0} outside [0,1]")]
    OutOfRange(f64),
    #[error("worker crashed: {0}")]
    WorkerCrashed(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("worker did not answer within {0:?}")]
    Timeout(Duration),
    #[error("worker reported an error: {0}")]
    Worker(String),
    #[error("evaluation failed after {attempts} attempts: {last}")]
    EvaluatorFailure { attempts: usize, last: Box<EvalError> },
    #[error("{0}")]
    Internal(String),
}

/// Maps a chromosome and context to a fitness in `[0, 1]`.
///
/// Implementations must be referentially transparent: the GA memoizes on
/// the chromosome and seed.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, c: &Chromosome, ctx: &EvalContext) -> Result<Evaluation, EvalError>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn evaluate(&self, c: &Chromosome, ctx: &EvalContext) -> Result<Evaluation, EvalError> {
        (**self).evaluate(c, ctx)
    }

    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }
}

/// Returns the same fitness for every input.
#[derive(Clone, Debug)]
pub struct ConstantEvaluator(f64);

impl ConstantEvaluator {
    pub fn new(fitness: f64) -> Self {
        assert!((0.0..=1.0).contains(&fitness));
        Self(fitness)
    }
}

impl Evaluator for ConstantEvaluator {
    fn evaluate(&self, _: &Chromosome, _: &EvalContext) -> Result<Evaluation, EvalError> {
        Ok(Evaluation::new(self.0))
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct OperatorConstants {
    pub weight: f64,
    pub optimum: f64,
}

#[derive(Deserialize)]
struct SurrogateFile {
    base: f64,
    byol_bonus: f64,
    noise_amplitude: f64,
    operators: HashMap<String, OperatorConstants>,
}

/// Constants shipped with the crate.
pub const SURROGATE_CONSTANTS: &str = include_str!("../data/surrogate.json");

/// Smooth synthetic landscape: each gene contributes a Gaussian bump around
/// a hidden optimum intensity, averaged over genes.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateEvaluator {
    pub base: f64,
    pub byol_bonus: f64,
    pub noise_amplitude: f64,
    /// Indexed by `Operator::index`.
    pub constants: Vec<OperatorConstants>,
}

impl Default for SurrogateEvaluator {
    fn default() -> Self {
        Self::from_json(SURROGATE_CONSTANTS).expect("shipped surrogate constants are valid")
    }
}

impl SurrogateEvaluator {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let file: SurrogateFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut constants = vec![None; Operator::COUNT];
        for (name, k) in file.operators {
            let op: Operator = name.parse().map_err(|e| format!("{e}"))?;
            if !op.range().contains(k.optimum) {
                return Err(format!("optimum {} of {op} outside its range", k.optimum));
            }
            constants[op.index()] = Some(k);
        }
        let constants = constants
            .into_iter()
            .zip(Operator::ALL)
            .map(|(k, op)| k.ok_or(format!("missing constants for {op}")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            base: file.base,
            byol_bonus: file.byol_bonus,
            noise_amplitude: file.noise_amplitude,
            constants,
        })
    }

    pub fn without_noise(mut self) -> Self {
        self.noise_amplitude = 0.0;
        self
    }

    pub fn constants(&self, op: Operator) -> &OperatorConstants {
        &self.constants[op.index()]
    }

    /// Noise-free value of the closed form.
    pub fn clean_value(&self, c: &Chromosome, algorithm: SslAlgorithm) -> f64 {
        let mut terms: Vec<(usize, f64)> = c
            .genes
            .iter()
            .map(|g| {
                let k = self.constants(g.op);
                let z = (g.intensity - k.optimum) / (g.op.range().width() / 4.0);
                (g.op.index(), k.weight * (-z * z).exp())
            })
            .collect();
        // summing in a canonical order keeps the value independent of gene order
        terms.sort_by_key(|t| t.0);
        let bumps: f64 = terms.iter().map(|t| t.1).sum();
        let mut f = self.base;
        if !c.is_empty() {
            f += bumps / c.len() as f64;
        }
        if algorithm == SslAlgorithm::Byol {
            f += self.byol_bonus;
        }
        f
    }

    /// Deterministic noise in `[-amplitude, amplitude]` derived from the gene
    /// multiset, algorithm and seed.
    pub fn noise(&self, c: &Chromosome, algorithm: SslAlgorithm, seed: u64) -> f64 {
        if self.noise_amplitude == 0.0 {
            return 0.0;
        }
        let mut genes = c.genes.clone();
        genes.sort_by_key(|g| g.op.index());
        let mut h = Sha256::new();
        for g in &genes {
            h.update([g.op.index() as u8]);
            h.update(g.intensity.to_bits().to_le_bytes());
        }
        h.update(algorithm.name().as_bytes());
        h.update(seed.to_le_bytes());
        let digest = h.finalize();
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        let unit = (u64::from_le_bytes(word) >> 11) as f64 / (1u64 << 53) as f64;
        self.noise_amplitude * (2.0 * unit - 1.0)
    }
}

impl Evaluator for SurrogateEvaluator {
    fn evaluate(&self, c: &Chromosome, ctx: &EvalContext) -> Result<Evaluation, EvalError> {
        let f = self.clean_value(c, ctx.algorithm) + self.noise(c, ctx.algorithm, ctx.seed);
        Ok(Evaluation::new(f.clamp(0.0, 1.0)))
    }
}

/// One evaluation request on the worker wire.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerRequest {
    pub id: u64,
    pub chromosome: Chromosome,
    pub algorithm: SslAlgorithm,
    pub seed: u64,
    pub pretext_batch_size: usize,
    pub pretext_epochs: usize,
    pub downstream_epochs: usize,
}

impl WorkerRequest {
    pub fn new(id: u64, c: &Chromosome, ctx: &EvalContext) -> Self {
        Self {
            id,
            chromosome: c.clone(),
            algorithm: ctx.algorithm,
            seed: ctx.seed,
            pretext_batch_size: ctx.pretext_batch_size,
            pretext_epochs: ctx.pretext_epochs,
            downstream_epochs: ctx.downstream_epochs,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }
}

/// Parses a response line and checks it against the request id.
pub fn parse_response(line: &str, expected_id: u64) -> Result<f64, EvalError> {
    let v: serde_json::Value = serde_json::from_str(line.trim_end())
        .map_err(|e| EvalError::ProtocolViolation(format!("malformed response: {e}")))?;
    let id = v
        .get("id")
        .and_then(|x| x.as_u64())
        .ok_or_else(|| EvalError::ProtocolViolation("response without integer id".into()))?;
    if id != expected_id {
        return Err(EvalError::ProtocolViolation(format!(
            "response id {id} does not match request id {expected_id}"
        )));
    }
    if let Some(msg) = v.get("error") {
        return Err(EvalError::Worker(
            msg.as_str().map(str::to_string).unwrap_or_else(|| msg.to_string()),
        ));
    }
    let f = v
        .get("fitness")
        .and_then(|x| x.as_f64())
        .ok_or_else(|| EvalError::ProtocolViolation("response has neither fitness nor error".into()))?;
    if !(0.0..=1.0).contains(&f) {
        return Err(EvalError::ProtocolViolation(format!("fitness {f} outside [0,1]")));
    }
    Ok(f)
}

/// A line-oriented duplex channel to one worker.
pub trait WorkerTransport: Send {
    fn send_line(&mut self, line: &str) -> Result<(), EvalError>;
    /// Waits at most `timeout` for the next line (without its newline).
    fn recv_line(&mut self, timeout: Duration) -> Result<String, EvalError>;
}

/// Creates fresh workers.
pub trait WorkerFactory: Send + Sync {
    fn spawn(&self) -> Result<Box<dyn WorkerTransport>, EvalError>;
}

/// Forwards lines from a reader into a channel; `None` marks end of stream.
fn pump_lines<R: BufRead + Send + 'static>(reader: R) -> Receiver<Option<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in reader.lines() {
            match line {
                Ok(l) => {
                    if tx.send(Some(l)).is_err() {
                        return;
                    }
                }
                Err(_) => break,
            }
        }
        let _ = tx.send(None);
    });
    rx
}

fn recv_from(rx: &Receiver<Option<String>>, timeout: Duration) -> Result<String, EvalError> {
    match rx.recv_timeout(timeout) {
        Ok(Some(line)) => Ok(line),
        Ok(None) | Err(RecvTimeoutError::Disconnected) => {
            Err(EvalError::WorkerCrashed("worker closed its output".into()))
        }
        Err(RecvTimeoutError::Timeout) => Err(EvalError::Timeout(timeout)),
    }
}

/// A worker process speaking the protocol on stdin/stdout.
pub struct ProcessWorker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<Option<String>>,
}

impl ProcessWorker {
    /// Runs `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self, EvalError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| EvalError::WorkerCrashed(format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self {
            child,
            stdin,
            lines: pump_lines(BufReader::new(stdout)),
        })
    }
}

impl WorkerTransport for ProcessWorker {
    fn send_line(&mut self, line: &str) -> Result<(), EvalError> {
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| EvalError::WorkerCrashed(e.to_string()))
    }

    fn recv_line(&mut self, timeout: Duration) -> Result<String, EvalError> {
        recv_from(&self.lines, timeout)
    }
}

impl Drop for ProcessWorker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct ProcessFactory {
    pub command: String,
}

impl WorkerFactory for ProcessFactory {
    fn spawn(&self) -> Result<Box<dyn WorkerTransport>, EvalError> {
        Ok(Box::new(ProcessWorker::spawn(&self.command)?))
    }
}

/// Handler run by an in-process worker: maps a request line to a response
/// line, or `None` to simulate the worker dying.
pub type MockHandler = dyn Fn(&str) -> Option<String> + Send + Sync;

/// A worker running on a thread, for tests and for embedding.
pub struct ThreadWorker {
    requests: Sender<String>,
    lines: Receiver<Option<String>>,
}

impl ThreadWorker {
    pub fn spawn(handler: std::sync::Arc<MockHandler>) -> Self {
        let (req_tx, req_rx) = mpsc::channel::<String>();
        let (resp_tx, resp_rx) = mpsc::channel();
        thread::spawn(move || {
            for line in req_rx {
                match handler(&line) {
                    Some(resp) => {
                        if resp_tx.send(Some(resp)).is_err() {
                            return;
                        }
                    }
                    None => break,
                }
            }
            let _ = resp_tx.send(None);
        });
        Self {
            requests: req_tx,
            lines: resp_rx,
        }
    }
}

impl WorkerTransport for ThreadWorker {
    fn send_line(&mut self, line: &str) -> Result<(), EvalError> {
        self.requests
            .send(line.to_string())
            .map_err(|_| EvalError::WorkerCrashed("worker thread exited".into()))
    }

    fn recv_line(&mut self, timeout: Duration) -> Result<String, EvalError> {
        recv_from(&self.lines, timeout)
    }
}

pub struct ThreadFactory {
    pub handler: std::sync::Arc<MockHandler>,
}

impl WorkerFactory for ThreadFactory {
    fn spawn(&self) -> Result<Box<dyn WorkerTransport>, EvalError> {
        Ok(Box::new(ThreadWorker::spawn(self.handler.clone())))
    }
}

pub const DEFAULT_WORKER_TIMEOUT: Duration = Duration::from_secs(3600);

/// Sends each evaluation to a worker, one request in flight per worker.
///
/// Idle workers are reused; a worker that failed is discarded and the
/// request is retried once on a fresh one.
pub struct ExternalEvaluator {
    factory: Box<dyn WorkerFactory>,
    timeout: Duration,
    idle: Mutex<Vec<Box<dyn WorkerTransport>>>,
    next_id: AtomicU64,
}

impl ExternalEvaluator {
    pub fn new(factory: Box<dyn WorkerFactory>) -> Self {
        Self {
            factory,
            timeout: DEFAULT_WORKER_TIMEOUT,
            idle: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(0),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn command(command: impl Into<String>) -> Self {
        Self::new(Box::new(ProcessFactory {
            command: command.into(),
        }))
    }

    fn attempt(&self, c: &Chromosome, ctx: &EvalContext) -> Result<f64, EvalError> {
        let pooled = self.idle.lock().expect("worker pool lock").pop();
        let mut worker = match pooled {
            Some(w) => w,
            None => self.factory.spawn()?,
        };
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        worker.send_line(&WorkerRequest::new(id, c, ctx).to_line())?;
        let line = worker.recv_line(self.timeout)?;
        let result = parse_response(&line, id);
        // the worker answered in protocol; keep it for the next request
        if matches!(result, Ok(_) | Err(EvalError::Worker(_))) {
            self.idle.lock().expect("worker pool lock").push(worker);
        }
        result
    }
}

impl Evaluator for ExternalEvaluator {
    fn evaluate(&self, c: &Chromosome, ctx: &EvalContext) -> Result<Evaluation, EvalError> {
        let mut last = None;
        for _ in 0..2 {
            match self.attempt(c, ctx) {
                Ok(f) => return Ok(Evaluation::new(f)),
                Err(e) => {
                    log::warn!("external evaluation failed: {e}");
                    last = Some(e);
                }
            }
        }
        Err(EvalError::EvaluatorFailure {
            attempts: 2,
            last: Box::new(last.expect("two failed attempts")),
        })
    }
}
