//! First-order meta-learning over source tasks, fine-tuning on the target
//! task, and the transfer / multi-task / scratch / cascade baselines.
//!
//! A meta step samples a source task, adapts a copy of the meta parameters
//! with one gradient step on a support batch (the auxiliary step), then moves
//! the meta parameters along the gradient of a query-batch loss evaluated at
//! the adapted parameters. No second-order terms are formed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GradientMap;
use crate::metrics::{evaluate, greedy_decode_batch, EvalReport};
use crate::model::{init_params, loss_and_grads, model_loss, ModelConfig};
use crate::optim::{clip_grad_norm, OptimizerKind, OptimizerState};
use crate::params::ModelParams;
use crate::tasks::{sample_batch, sample_task, Batch, Example, Modality, Source, Task, TaskRole};
use crate::tensor::Real;
use crate::vocab::Vocabulary;

fn f_alpha() -> f64 {
    0.1
}
fn f_beta() -> f64 {
    0.1
}
fn f_gamma() -> f64 {
    1e-3
}
fn f_batch() -> usize {
    16
}
fn f_pretrain_batch() -> usize {
    32
}
fn f_meta_steps() -> usize {
    3000
}
fn f_finetune_steps() -> usize {
    2000
}
fn f_eval_every() -> usize {
    200
}
fn f_pretrain_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}
fn f_finetune_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn f_true() -> bool {
    true
}
fn f_dev_fraction() -> f64 {
    0.1
}
fn f_decode_max_len() -> usize {
    24
}

/// Every tunable of the two training phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    /// Auxiliary (inner) step size.
    #[serde(default = "f_alpha")]
    pub alpha: f64,
    /// Meta (outer) step size; also the pre-training rate of the baselines.
    #[serde(default = "f_beta")]
    pub beta: f64,
    /// Fine-tuning rate.
    #[serde(default = "f_gamma")]
    pub gamma: f64,
    /// Auxiliary batch size.
    #[serde(default = "f_batch")]
    pub k: usize,
    /// Meta-evaluation batch size.
    #[serde(default = "f_batch")]
    pub l: usize,
    /// Fine-tuning batch size.
    #[serde(default = "f_batch")]
    pub m_batch: usize,
    /// Batch size for transfer and multi-task pre-training.
    #[serde(default = "f_pretrain_batch")]
    pub pretrain_batch: usize,
    /// Meta steps, or pre-training updates for the transfer/multi-task baselines.
    #[serde(default = "f_meta_steps")]
    pub meta_steps: usize,
    #[serde(default = "f_finetune_steps")]
    pub finetune_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "f_eval_every")]
    pub eval_every: usize,
    #[serde(default = "f_pretrain_optimizer")]
    pub pretrain_optimizer: OptimizerKind,
    #[serde(default = "f_finetune_optimizer")]
    pub finetune_optimizer: OptimizerKind,
    /// Joint gradient-norm ceiling for ordinary (non-meta) updates.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Fine-tuning returns the parameters with the lowest dev loss seen at an
    /// evaluation boundary instead of the last ones.
    #[serde(default = "f_true")]
    pub keep_best: bool,
    #[serde(default = "f_dev_fraction")]
    pub dev_fraction: f64,
    #[serde(default = "f_decode_max_len")]
    pub decode_max_len: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("hyper.{name}"), "must be a finite rate ≥ 0"));
            }
        }
        for (name, v) in [
            ("k", self.k),
            ("l", self.l),
            ("m_batch", self.m_batch),
            ("pretrain_batch", self.pretrain_batch),
            ("eval_every", self.eval_every),
            ("decode_max_len", self.decode_max_len),
        ] {
            if v == 0 {
                return Err(Error::config(format!("hyper.{name}"), "must be at least 1"));
            }
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(Error::config("hyper.dev_fraction", "must be in (0, 1)"));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::config("hyper.clip_norm", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[serde(alias = "metalearn", alias = "MetaLearn")]
    Meta,
    #[serde(alias = "Transfer")]
    Transfer,
    #[serde(alias = "MultiTask")]
    Multitask,
    #[serde(alias = "Scratch")]
    Scratch,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Meta, Strategy::Transfer, Strategy::Multitask, Strategy::Scratch];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Meta => "meta",
            Strategy::Transfer => "transfer",
            Strategy::Multitask => "multitask",
            Strategy::Scratch => "scratch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "meta" | "metalearn" => Some(Strategy::Meta),
            "transfer" => Some(Strategy::Transfer),
            "multitask" => Some(Strategy::Multitask),
            "scratch" => Some(Strategy::Scratch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub strategy: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Append-only metric record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: u64, strategy: &str, split: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            step,
            strategy: strategy.to_string(),
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn extend(&mut self, other: MetricLog) {
        self.rows.extend(other.rows);
    }

    /// `(step, value)` pairs for one series, in insertion order.
    pub fn series(&self, strategy: &str, split: &str, metric: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.strategy == strategy && r.split == split && r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    /// CSV with header `step,strategy,split,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let rows = rd
            .deserialize()
            .enumerate()
            .map(|(i, r)| {
                r.map_err(|e| Error::Parse { path: "metrics.csv".into(), line: i + 2, msg: e.to_string() })
            })
            .collect::<Result<Vec<MetricRow>>>()?;
        Ok(Self { rows })
    }
}

/// Mutable state of one trainer.
#[derive(Debug, Clone)]
pub struct TrainState<T: Real> {
    pub params: ModelParams<T>,
    pub optimizer: OptimizerState<T>,
    pub step: u64,
    /// Batch sampling and dropout.
    pub data_rng: ChaCha8Rng,
    /// Task selection.
    pub task_rng: ChaCha8Rng,
}

const PHASE_META: u64 = 0x4d45_5441;
const PHASE_PRETRAIN: u64 = 0x5052_4554;
const PHASE_FINETUNE: u64 = 0x4649_4e45;

fn phase_rngs(seed: u64, phase: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut data = ChaCha8Rng::seed_from_u64(seed);
    data.set_stream(phase);
    let mut task = ChaCha8Rng::seed_from_u64(seed);
    task.set_stream(phase ^ 0xffff);
    (data, task)
}

impl<T: Real> TrainState<T> {
    fn new(params: ModelParams<T>, kind: OptimizerKind, seed: u64, phase: u64) -> Self {
        let (data_rng, task_rng) = phase_rngs(seed, phase);
        Self { params, optimizer: OptimizerState::new(kind), step: 0, data_rng, task_rng }
    }
}

/// `θ − lr·g` for every key in `grads`; other keys are copied unchanged.
fn sgd_update<T: Real>(params: &ModelParams<T>, grads: &GradientMap<T>, lr: f64) -> Result<ModelParams<T>> {
    let mut out = params.clone();
    OptimizerState::sgd().step(&mut out, grads, lr)?;
    Ok(out)
}

/// Auxiliary step for an arbitrary differentiable objective:
/// `θᵃ = θᵐ − α ∇ℓ(θᵐ)`. Returns `θᵃ` and `ℓ(θᵐ)`.
pub fn auxiliary_update<T: Real, F>(theta_m: &ModelParams<T>, mut objective: F, alpha: f64) -> Result<(ModelParams<T>, f64)>
where
    F: FnMut(&ModelParams<T>) -> Result<(f64, GradientMap<T>)>,
{
    let (loss, grads) = objective(theta_m)?;
    Ok((sgd_update(theta_m, &grads, alpha)?, loss))
}

/// First-order meta update: `θᵐ − β ∇ℓ'(θᵃ)` with `θᵃ` from
/// [`auxiliary_update`]. Returns the new meta parameters and `ℓ'(θᵃ)`.
pub fn meta_update<T: Real, F, G>(
    theta_m: &ModelParams<T>,
    support: F,
    mut query: G,
    alpha: f64,
    beta: f64,
) -> Result<(ModelParams<T>, f64)>
where
    F: FnMut(&ModelParams<T>) -> Result<(f64, GradientMap<T>)>,
    G: FnMut(&ModelParams<T>) -> Result<(f64, GradientMap<T>)>,
{
    let (theta_a, _) = auxiliary_update(theta_m, support, alpha)?;
    let (query_loss, meta_grad) = query(&theta_a)?;
    Ok((sgd_update(theta_m, &meta_grad, beta)?, query_loss))
}

/// Auxiliary step on a model batch. `θᵐ` is not modified.
pub fn auxiliary_step<T: Real>(
    theta_m: &ModelParams<T>,
    batch: &Batch,
    modality: Modality,
    config: &ModelConfig,
    alpha: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ModelParams<T>> {
    if alpha < 0.0 {
        return Err(Error::Contract("alpha must be ≥ 0".into()));
    }
    if batch.modality() != modality {
        return Err(Error::Modality("auxiliary batch does not match the requested modality".into()));
    }
    let mut rng = dropout_rng;
    Ok(auxiliary_update(theta_m, |p| loss_and_grads(p, config, batch, rng.as_deref_mut()), alpha)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaStepStats {
    pub support_loss: f64,
    pub query_loss: f64,
}

/// One meta step on `task`: support batch of `k`, query batch of `l`, both
/// drawn independently from `rng`, which also drives dropout.
pub fn meta_step<T: Real>(
    theta_m: &ModelParams<T>,
    task: &Task,
    config: &ModelConfig,
    hyper: &HyperParams,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelParams<T>, MetaStepStats)> {
    let support = sample_batch(task, hyper.k, rng)?;
    let query = sample_batch(task, hyper.l, rng)?;
    let mut support_loss = f64::NAN;
    let (next, query_loss) = {
        let rng_cell = std::cell::RefCell::new(rng);
        meta_update(
            theta_m,
            |p| {
                let r = loss_and_grads(p, config, &support, Some(&mut **rng_cell.borrow_mut()));
                if let Ok((l, _)) = &r {
                    support_loss = *l;
                }
                r
            },
            |p| loss_and_grads(p, config, &query, Some(&mut **rng_cell.borrow_mut())),
            hyper.alpha,
            hyper.beta,
        )?
    };
    Ok((next, MetaStepStats { support_loss, query_loss }))
}

/// Meta-learning phase over `source_tasks` (ASR/MT roles only), starting
/// from `init`. Logs the query loss of every step under split = task role.
pub fn meta_train<T: Real>(
    source_tasks: &[Task],
    init: ModelParams<T>,
    config: &ModelConfig,
    hyper: &HyperParams,
    log: &mut MetricLog,
) -> Result<ModelParams<T>> {
    if let Some(t) = source_tasks.iter().find(|t| t.role == TaskRole::St) {
        return Err(Error::Contract(format!("task `{}` has the ST role and cannot be a meta source", t.id)));
    }
    if source_tasks.is_empty() {
        return Err(Error::Empty("source task set"));
    }
    let mut st = TrainState::new(init, OptimizerKind::Sgd, hyper.seed, PHASE_META);
    for _ in 0..hyper.meta_steps {
        let task = sample_task(source_tasks, &mut st.task_rng)?;
        let (next, stats) = meta_step(&st.params, task, config, hyper, &mut st.data_rng)?;
        st.params = next;
        st.step += 1;
        log.push(st.step, Strategy::Meta.name(), task.role.name(), "adapt_loss", stats.query_loss);
    }
    Ok(st.params)
}

/// One ordinary supervised update; returns the batch loss.
fn supervised_step<T: Real>(st: &mut TrainState<T>, task: &Task, batch_size: usize, lr: f64, config: &ModelConfig, hyper: &HyperParams) -> Result<f64> {
    let batch = sample_batch(task, batch_size, &mut st.data_rng)?;
    let (loss, mut grads) = loss_and_grads(&st.params, config, &batch, Some(&mut st.data_rng))?;
    if let Some(c) = hyper.clip_norm {
        clip_grad_norm(&mut grads, c);
    }
    st.optimizer.step(&mut st.params, &grads, lr)?;
    st.step += 1;
    Ok(loss)
}

/// Shared pre-training loop: each step draws one task uniformly and applies
/// one update to the single parameter set.
fn pretrain<T: Real>(
    tasks: &[Task],
    init: ModelParams<T>,
    config: &ModelConfig,
    hyper: &HyperParams,
    strategy: Strategy,
    log: &mut MetricLog,
) -> Result<ModelParams<T>> {
    if tasks.is_empty() {
        return Err(Error::Empty("pre-training task set"));
    }
    let mut st = TrainState::new(init, hyper.pretrain_optimizer, hyper.seed, PHASE_PRETRAIN);
    for _ in 0..hyper.meta_steps {
        let task = if tasks.len() == 1 { &tasks[0] } else { sample_task(tasks, &mut st.task_rng)? };
        let loss = supervised_step(&mut st, task, hyper.pretrain_batch, hyper.beta, config, hyper)?;
        log.push(st.step, strategy.name(), task.role.name(), "train_loss", loss);
    }
    Ok(st.params)
}

/// Transfer baseline: plain supervised training on the ASR task.
pub fn transfer_train<T: Real>(
    asr_task: &Task,
    init: ModelParams<T>,
    config: &ModelConfig,
    hyper: &HyperParams,
    log: &mut MetricLog,
) -> Result<ModelParams<T>> {
    pretrain(std::slice::from_ref(asr_task), init, config, hyper, Strategy::Transfer, log)
}

/// Multi-task baseline: one shared parameter set trained on uniformly drawn
/// tasks.
pub fn multitask_train<T: Real>(
    all_tasks: &[Task],
    init: ModelParams<T>,
    config: &ModelConfig,
    hyper: &HyperParams,
    log: &mut MetricLog,
) -> Result<ModelParams<T>> {
    pretrain(all_tasks, init, config, hyper, Strategy::Multitask, log)
}

/// Corpus-level evaluation of a task in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEval {
    pub loss: f64,
    pub report: EvalReport,
    pub hypotheses: Vec<String>,
    pub references: Vec<String>,
}

const EVAL_CHUNK: usize = 64;

pub fn eval_loss<T: Real>(params: &ModelParams<T>, config: &ModelConfig, task: &Task) -> Result<f64> {
    let mut weighted = 0.0;
    let mut tokens = 0usize;
    for chunk in task.examples.chunks(EVAL_CHUNK) {
        let batch = Batch::from_examples(&chunk.iter().collect::<Vec<_>>())?;
        let n: usize = batch.mask.iter().flatten().filter(|&&m| m).count();
        weighted += model_loss(params, config, &batch, None)? * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(weighted / tokens as f64)
}

pub fn decode_task<T: Real>(params: &ModelParams<T>, config: &ModelConfig, task: &Task, max_len: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(task.len());
    for chunk in task.examples.chunks(EVAL_CHUNK) {
        let sources: Vec<&Source> = chunk.iter().map(|e| &e.source).collect();
        out.extend(greedy_decode_batch(params, config, &sources, max_len)?);
    }
    Ok(out)
}

pub fn evaluate_task<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    task: &Task,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TaskEval> {
    if task.is_empty() {
        return Err(Error::Empty("evaluation task"));
    }
    let loss = eval_loss(params, config, task)?;
    let hyps = decode_task(params, config, task, max_len)?;
    let hypotheses = hyps.iter().map(|h| vocab.decode(h)).collect::<Result<Vec<_>>>()?;
    let references = task.examples.iter().map(|e| vocab.decode(&e.target)).collect::<Result<Vec<_>>>()?;
    let report = evaluate(&hypotheses, &references)?;
    Ok(TaskEval { loss, report, hypotheses, references })
}

/// Fine-tuning outcome.
#[derive(Debug, Clone)]
pub struct Finetuned<T: Real> {
    /// Last parameters, or the best-by-dev-loss ones when `keep_best`.
    pub params: ModelParams<T>,
    pub best_step: u64,
}

/// Fine-tuning phase: `finetune_steps` updates at rate γ on batches of
/// `m_batch` from `st_train`. Logs dev loss, BLEU and WER at every
/// `eval_every` boundary (and the last step), together with the mean train
/// loss since the previous boundary.
#[allow(clippy::too_many_arguments)]
pub fn finetune<T: Real>(
    theta_init: ModelParams<T>,
    st_train: &Task,
    st_dev: &Task,
    vocab: &Vocabulary,
    config: &ModelConfig,
    hyper: &HyperParams,
    strategy: Strategy,
    log: &mut MetricLog,
) -> Result<Finetuned<T>> {
    if st_train.role != TaskRole::St {
        return Err(Error::Contract(format!("fine-tuning task `{}` is not an ST task", st_train.id)));
    }
    let mut st = TrainState::new(theta_init, hyper.finetune_optimizer, hyper.seed, PHASE_FINETUNE);
    let mut best: Option<(f64, u64, ModelParams<T>)> = None;
    let mut window = (0.0, 0usize);
    let name = strategy.name();
    let mut evaluate_at = |s: u64, params: &ModelParams<T>, log: &mut MetricLog| -> Result<()> {
        let ev = evaluate_task(params, config, st_dev, vocab, hyper.decode_max_len)?;
        log.push(s, name, "dev", "loss", ev.loss);
        log.push(s, name, "dev", "bleu", ev.report.bleu);
        log.push(s, name, "dev", "wer", ev.report.wer);
        if hyper.keep_best && best.as_ref().is_none_or(|(l, _, _)| ev.loss < *l) {
            best = Some((ev.loss, s, params.clone()));
        }
        Ok(())
    };
    for step in 1..=hyper.finetune_steps {
        let loss = supervised_step(&mut st, st_train, hyper.m_batch, hyper.gamma, config, hyper)?;
        window = (window.0 + loss, window.1 + 1);
        if step % hyper.eval_every == 0 || step == hyper.finetune_steps {
            let s = step as u64;
            log.push(s, name, "train", "loss", window.0 / window.1 as f64);
            window = (0.0, 0);
            evaluate_at(s, &st.params, log)?;
        }
    }
    Ok(match best {
        Some((_, s, p)) => Finetuned { params: p, best_step: s },
        None => Finetuned { params: st.params, best_step: st.step },
    })
}

/// Tasks one strategy run draws on.
#[derive(Debug, Clone)]
pub struct TaskSuite {
    pub asr: Task,
    pub mt: Task,
    pub st_train: Task,
    pub st_dev: Task,
    pub vocab: Vocabulary,
}

#[derive(Debug, Clone)]
pub struct StrategyOutcome<T: Real> {
    /// Pre-trained parameters fine-tuning started from.
    pub theta_init: ModelParams<T>,
    pub theta_final: ModelParams<T>,
    pub log: MetricLog,
}

/// Pre-training (per strategy) followed by fine-tuning on ST. All strategies
/// start from `init_params(config, hyper.seed)`.
pub fn run_strategy<T: Real>(
    strategy: Strategy,
    tasks: &TaskSuite,
    config: &ModelConfig,
    hyper: &HyperParams,
) -> Result<StrategyOutcome<T>> {
    hyper.validate()?;
    let mut log = MetricLog::new();
    let init = init_params::<T>(config, hyper.seed)?;
    let theta_init = match strategy {
        Strategy::Meta => meta_train(&[tasks.asr.clone(), tasks.mt.clone()], init, config, hyper, &mut log)?,
        Strategy::Transfer => transfer_train(&tasks.asr, init, config, hyper, &mut log)?,
        Strategy::Multitask => {
            multitask_train(&[tasks.asr.clone(), tasks.mt.clone(), tasks.st_train.clone()], init, config, hyper, &mut log)?
        }
        Strategy::Scratch => init,
    };
    let ft = finetune(theta_init.clone(), &tasks.st_train, &tasks.st_dev, &tasks.vocab, config, hyper, strategy, &mut log)?;
    Ok(StrategyOutcome { theta_init, theta_final: ft.params, log })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub kept: usize,
    pub dropped: usize,
}

/// Translates every ASR transcript with the MT model and pairs the original
/// frames with the translation. Empty translations are dropped and counted.
pub fn synthesize_st_data<T: Real>(
    mt_params: &ModelParams<T>,
    asr_task: &Task,
    config: &ModelConfig,
    max_len: usize,
) -> Result<(Task, SynthesisReport)> {
    if asr_task.modality != Modality::Frames {
        return Err(Error::Modality("synthesis needs a frames → transcript task".into()));
    }
    let mut examples = Vec::with_capacity(asr_task.len());
    let mut dropped = 0;
    for chunk in asr_task.examples.chunks(EVAL_CHUNK) {
        let transcripts: Vec<Source> = chunk.iter().map(|e| Source::Tokens(e.target.clone())).collect();
        let refs: Vec<&Source> = transcripts.iter().filter(|s| !s.is_empty()).collect();
        let mut decoded = greedy_decode_batch(mt_params, config, &refs, max_len)?.into_iter();
        for (ex, tr) in chunk.iter().zip(&transcripts) {
            let translation = if tr.is_empty() { Vec::new() } else { decoded.next().unwrap_or_default() };
            if translation.is_empty() {
                dropped += 1;
            } else {
                examples.push(Example { source: ex.source.clone(), target: translation });
            }
        }
    }
    let kept = examples.len();
    let task = Task::new(format!("{}-synthetic-st", asr_task.id), TaskRole::St, Modality::Frames, examples)?;
    Ok((task, SynthesisReport { kept, dropped }))
}

/// ASR decode followed by MT decode.
pub fn cascade_translate<T: Real>(
    asr_params: &ModelParams<T>,
    mt_params: &ModelParams<T>,
    frames: &Source,
    config: &ModelConfig,
    max_len: usize,
) -> Result<Vec<usize>> {
    let transcript = crate::metrics::greedy_decode(asr_params, config, frames, Modality::Frames, max_len)?;
    if transcript.is_empty() {
        return Ok(Vec::new());
    }
    crate::metrics::greedy_decode(mt_params, config, &Source::Tokens(transcript), Modality::Tokens, max_len)
}

