//! Experiment runner: config parsing and validation, per-seed strategy runs,
//! artifacts on disk, and side-by-side comparison of finished runs.
//!
//! Layout of a run directory:
//!
//! ```text
//! <output_dir>/config.resolved
//! <output_dir>/vocab.txt
//! <output_dir>/summary.json
//! <output_dir>/seed-<s>/metrics.csv
//! <output_dir>/seed-<s>/checkpoints/{pretrained,final}/
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{evaluate_task, run_strategy, HyperParams, MetricLog, Strategy, TaskSuite};
use crate::model::{save_checkpoint, ModelConfig};
use crate::tasks::{gen_asr_task, gen_mt_task, gen_st_task, load_tsv_task, Modality, Source, SyntheticSpec, Task, TaskRole};
use crate::vocab::Vocabulary;

pub const RESOLVED_FILE: &str = "config.resolved";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const VOCAB_FILE: &str = "vocab.txt";

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Flat-file task sources. Relative paths are resolved against the config
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsvData {
    pub vocab: PathBuf,
    pub asr: PathBuf,
    pub mt: PathBuf,
    pub st: PathBuf,
    /// Held-out ST examples; without it the last `hyper.dev_fraction` of
    /// `st` is held out.
    #[serde(default)]
    pub st_dev: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub output_dir: PathBuf,
    /// `hyper.seed` is replaced by each of these in turn.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Runs the seeds on separate threads.
    #[serde(default)]
    pub parallel: bool,
    /// `vocab_size` and `frame_dim` are taken from the data.
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub tsv: Option<TsvData>,
}

/// Names the key a TOML error points at, e.g. `hyper.alpha`.
fn error_field(text: &str, e: &toml::de::Error) -> String {
    let Some(span) = e.span() else { return "config".into() };
    let before = &text[..span.start.min(text.len())];
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line_end = text[line_start..].find('\n').map_or(text.len(), |i| line_start + i);
    let line = &text[line_start..line_end];
    let table = before[..line_start]
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix('[').and_then(|l| l.strip_suffix(']')))
        .map(|t| t.trim().to_string());
    match line.split_once('=') {
        Some((key, _)) => match table {
            Some(t) => format!("{t}.{}", key.trim()),
            None => key.trim().to_string(),
        },
        None => table.unwrap_or_else(|| "config".into()),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config { field: error_field(text, &e), msg: e.message().to_string() })
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.output_dir);
        if let Some(t) = cfg.tsv.as_mut() {
            for p in [&mut t.vocab, &mut t.asr, &mut t.mt, &mut t.st] {
                fix(p);
            }
            if let Some(p) = t.st_dev.as_mut() {
                fix(p);
            }
        }
        Ok(cfg)
    }

    /// Checks everything that can be checked without training. Writes
    /// nothing.
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        match (&self.synthetic, &self.tsv) {
            (Some(spec), None) => spec.validate()?,
            (None, Some(t)) => {
                let mut paths = vec![("tsv.vocab", &t.vocab), ("tsv.asr", &t.asr), ("tsv.mt", &t.mt), ("tsv.st", &t.st)];
                if let Some(p) = &t.st_dev {
                    paths.push(("tsv.st_dev", p));
                }
                for (field, p) in paths {
                    if !p.is_file() {
                        return Err(Error::config(field, format!("{} does not exist", p.display())));
                    }
                }
            }
            _ => return Err(Error::config("synthetic", "exactly one of [synthetic] or [tsv] is required")),
        }
        if self.output_dir.is_file() {
            return Err(Error::config("output_dir", format!("{} is a file", self.output_dir.display())));
        }
        let existing = self.output_dir.ancestors().find(|a| a.exists()).unwrap_or(Path::new("."));
        let writable = fs::metadata(existing).map(|m| m.is_dir() && !m.permissions().readonly()).unwrap_or(false);
        if !writable {
            return Err(Error::config("output_dir", format!("{} is not writable", existing.display())));
        }
        Ok(())
    }
}

fn vocab_for(cfg: &ExperimentConfig) -> Result<Vocabulary> {
    match (&cfg.synthetic, &cfg.tsv) {
        (Some(spec), _) => Ok(Vocabulary::build_universal(&spec.vocab_corpora())),
        (_, Some(t)) => Vocabulary::load(&t.vocab),
        _ => unreachable!("validated"),
    }
}

/// Per-seed data. Synthetic tasks are regenerated from seeds derived from
/// the run seed; TSV tasks are the same for every seed.
pub fn build_suite(cfg: &ExperimentConfig, vocab: &Vocabulary, seed: u64) -> Result<TaskSuite> {
    let (asr, mt, st, st_dev) = match (&cfg.synthetic, &cfg.tsv) {
        (Some(spec), _) => {
            let base = seed.wrapping_mul(1_000_003);
            (
                gen_asr_task(spec, vocab, spec.n_asr, base.wrapping_add(1))?,
                gen_mt_task(spec, vocab, spec.n_mt, base.wrapping_add(2))?,
                gen_st_task(spec, vocab, spec.n_st, base.wrapping_add(3))?,
                None,
            )
        }
        (_, Some(t)) => (
            load_tsv_task(&t.asr, Modality::Frames, TaskRole::Asr, vocab)?,
            load_tsv_task(&t.mt, Modality::Tokens, TaskRole::Mt, vocab)?,
            load_tsv_task(&t.st, Modality::Frames, TaskRole::St, vocab)?,
            t.st_dev.as_ref().map(|p| load_tsv_task(p, Modality::Frames, TaskRole::St, vocab)).transpose()?,
        ),
        _ => unreachable!("validated"),
    };
    let (st_train, st_dev) = match st_dev {
        Some(dev) => (st, dev),
        None => st.split_dev(cfg.hyper.dev_fraction),
    };
    for (name, t) in [("asr", &asr), ("mt", &mt), ("st", &st_train), ("st dev", &st_dev)] {
        if t.is_empty() {
            return Err(Error::Config { field: "data".into(), msg: format!("the {name} task has no examples") });
        }
    }
    Ok(TaskSuite { asr, mt, st_train, st_dev, vocab: vocab.clone() })
}

fn frame_dim(suite: &TaskSuite) -> Option<usize> {
    [&suite.asr, &suite.st_train].iter().flat_map(|t| t.examples.first()).find_map(|e| match &e.source {
        Source::Frames(f) => Some(f.dim),
        Source::Tokens(_) => None,
    })
}

/// Final-model scores for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub bleu: f64,
    pub wer: f64,
    /// Dev loss of the returned model.
    pub final_loss: f64,
    /// Fine-tuning updates.
    pub steps: usize,
}

/// strategy → seed → scores.
pub type Summary = BTreeMap<String, BTreeMap<String, SeedSummary>>;

pub fn seed_dir(output_dir: &Path, seed: u64) -> PathBuf {
    output_dir.join(format!("seed-{seed}"))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn run_seed(cfg: &ExperimentConfig, model: &ModelConfig, suite: &TaskSuite, seed: u64) -> Result<SeedSummary> {
    let hyper = HyperParams { seed, ..cfg.hyper.clone() };
    let dir = seed_dir(&cfg.output_dir, seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let out = run_strategy::<f32>(cfg.strategy, suite, model, &hyper)?;
    write(&dir.join(METRICS_FILE), out.log.to_csv())?;
    let ck = dir.join("checkpoints");
    save_checkpoint(&out.theta_init, model, seed, 0, &ck.join("pretrained"))?;
    save_checkpoint(&out.theta_final, model, seed, hyper.finetune_steps as u64, &ck.join("final"))?;
    let ev = evaluate_task(&out.theta_final, model, &suite.st_dev, &suite.vocab, hyper.decode_max_len)?;
    Ok(SeedSummary { bleu: ev.report.bleu, wer: ev.report.wer, final_loss: ev.loss, steps: hyper.finetune_steps })
}

/// Loads, validates and runs an experiment config. Nothing is written
/// unless validation and data preparation succeed.
pub fn run_experiment(config_path: &Path) -> Result<Summary> {
    let cfg = ExperimentConfig::load(config_path)?;
    cfg.validate()?;
    let vocab = vocab_for(&cfg)?;
    let suites = cfg.seeds.iter().map(|&s| build_suite(&cfg, &vocab, s)).collect::<Result<Vec<_>>>()?;
    let mut model = ModelConfig { vocab_size: vocab.len(), ..cfg.model.clone() };
    if let Some(f) = frame_dim(&suites[0]) {
        model.frame_dim = f;
    }
    model.validate()?;
    let resolved = ExperimentConfig { model: model.clone(), ..cfg.clone() };

    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let text = toml::to_string(&resolved).map_err(|e| Error::Report(format!("cannot serialise config: {e}")))?;
    write(&cfg.output_dir.join(RESOLVED_FILE), text)?;
    vocab.save(&cfg.output_dir.join(VOCAB_FILE))?;

    let results: Vec<Result<SeedSummary>> = if cfg.parallel && cfg.seeds.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = cfg
                .seeds
                .iter()
                .zip(&suites)
                .map(|(&seed, suite)| {
                    let (cfg, model) = (&resolved, &model);
                    s.spawn(move || run_seed(cfg, model, suite, seed))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("seed thread panicked")).collect()
        })
    } else {
        cfg.seeds.iter().zip(&suites).map(|(&seed, suite)| run_seed(&resolved, &model, suite, seed)).collect()
    };
    let mut per_seed = BTreeMap::new();
    for (seed, r) in cfg.seeds.iter().zip(results) {
        per_seed.insert(seed.to_string(), r?);
    }
    let mut summary = Summary::new();
    summary.insert(cfg.strategy.name().to_string(), per_seed);
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    write(&cfg.output_dir.join(SUMMARY_FILE), json + "\n")?;
    Ok(summary)
}

/// One aligned checkpoint across the compared runs.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub seed: String,
    pub metric: String,
    pub step: u64,
    pub values: Vec<f64>,
    /// Label of the best run at this checkpoint, or `tie`.
    pub best: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub labels: Vec<String>,
    pub rows: Vec<CompareRow>,
    /// One line per metric: how often each run was best.
    pub verdicts: Vec<String>,
}

/// Dev metrics compared across runs; `true` means lower is better.
pub const COMPARED_METRICS: [(&str, bool); 3] = [("loss", true), ("bleu", false), ("wer", true)];

struct RunMetrics {
    label: String,
    /// seed label → log
    logs: BTreeMap<String, MetricLog>,
}

fn read_metrics(path: &Path) -> Result<MetricLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MetricLog::from_csv(&text).map_err(|e| match e {
        Error::Parse { line, msg, .. } => Error::Parse { path: path.to_path_buf(), line, msg },
        other => other,
    })
}

fn load_run(dir: &Path) -> Result<RunMetrics> {
    let mut logs = BTreeMap::new();
    let direct = dir.join(METRICS_FILE);
    if direct.is_file() {
        logs.insert("-".to_string(), read_metrics(&direct)?);
    } else if dir.is_dir() {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(seed) = name.strip_prefix("seed-") {
                let path = entry.path().join(METRICS_FILE);
                if path.is_file() {
                    logs.insert(seed.to_string(), read_metrics(&path)?);
                }
            }
        }
    }
    if logs.is_empty() {
        return Err(Error::Report(format!("no {METRICS_FILE} found in {}", dir.display())));
    }
    let label = logs
        .values()
        .flat_map(|l| l.rows().first())
        .map(|r| r.strategy.clone())
        .next()
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunMetrics { label, logs })
}

/// Aligns the dev curves of several runs checkpoint by checkpoint.
pub fn compare_report(run_dirs: &[PathBuf]) -> Result<Comparison> {
    if run_dirs.len() < 2 {
        return Err(Error::Report("comparison needs at least two run directories".into()));
    }
    let mut runs = run_dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for r in &mut runs {
        let n = seen.entry(r.label.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            r.label = format!("{}#{n}", r.label);
        }
    }
    let labels: Vec<String> = runs.iter().map(|r| r.label.clone()).collect();
    let seeds: Vec<String> =
        runs[0].logs.keys().filter(|s| runs.iter().all(|r| r.logs.contains_key(*s))).cloned().collect();
    if seeds.is_empty() {
        return Err(Error::Report("the runs share no seed".into()));
    }

    let mut rows = Vec::new();
    let mut wins: BTreeMap<&str, BTreeMap<String, usize>> = BTreeMap::new();
    let mut totals: BTreeMap<&str, usize> = BTreeMap::new();
    for seed in &seeds {
        for &(metric, lower_better) in &COMPARED_METRICS {
            let series: Vec<Vec<(u64, f64)>> = runs
                .iter()
                .map(|r| {
                    let log = &r.logs[seed];
                    let strategy = log.rows().first().map(|x| x.strategy.clone()).unwrap_or_default();
                    log.series(&strategy, "dev", metric)
                })
                .collect();
            let grid: Vec<u64> = series[0].iter().map(|x| x.0).collect();
            for (i, s) in series.iter().enumerate().skip(1) {
                if s.iter().map(|x| x.0).ne(grid.iter().copied()) {
                    return Err(Error::Report(format!(
                        "dev {metric} checkpoints of `{}` and `{}` (seed {seed}) are misaligned",
                        labels[0], labels[i]
                    )));
                }
            }
            for (j, &step) in grid.iter().enumerate() {
                let values: Vec<f64> = series.iter().map(|s| s[j].1).collect();
                let better = |a: f64, b: f64| if lower_better { a < b } else { a > b };
                let mut best_i = 0;
                for i in 1..values.len() {
                    if better(values[i], values[best_i]) {
                        best_i = i;
                    }
                }
                let tied = values.iter().enumerate().any(|(i, &v)| i != best_i && v == values[best_i]);
                let best = if tied { "tie".to_string() } else { labels[best_i].clone() };
                *wins.entry(metric).or_default().entry(best.clone()).or_insert(0) += 1;
                *totals.entry(metric).or_insert(0) += 1;
                rows.push(CompareRow { seed: seed.clone(), metric: metric.to_string(), step, values, best });
            }
        }
    }
    let verdicts = COMPARED_METRICS
        .iter()
        .map(|&(metric, lower)| {
            let total = totals.get(metric).copied().unwrap_or(0);
            let counts = wins.get(metric).cloned().unwrap_or_default();
            let parts: Vec<String> = labels
                .iter()
                .map(|l| format!("{l} best at {}/{total}", counts.get(l).copied().unwrap_or(0)))
                .chain(counts.get("tie").map(|t| format!("tied at {t}/{total}")))
                .collect();
            format!("dev {metric} ({} is better): {}", if lower { "lower" } else { "higher" }, parts.join(", "))
        })
        .collect();
    Ok(Comparison { labels, rows, verdicts })
}

impl Comparison {
    /// `seed,metric,step,<label>...,[delta,]best`; `delta` (second minus
    /// first) appears when exactly two runs are compared.
    pub fn to_csv(&self) -> String {
        let two = self.labels.len() == 2;
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["seed".to_string(), "metric".into(), "step".into()];
        header.extend(self.labels.iter().cloned());
        if two {
            header.push("delta".into());
        }
        header.push("best".into());
        w.write_record(&header).expect("in-memory csv");
        for r in &self.rows {
            let mut rec = vec![r.seed.clone(), r.metric.clone(), r.step.to_string()];
            rec.extend(r.values.iter().map(|v| v.to_string()));
            if two {
                rec.push((r.values[1] - r.values[0]).to_string());
            }
            rec.push(r.best.clone());
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }
}

/// `gen-data`: writes vocab.txt plus asr/mt/st TSVs (frames as binary
/// files next to them) for a synthetic spec.
pub fn generate_dataset(spec: &SyntheticSpec, out: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let vocab = Vocabulary::build_universal(&spec.vocab_corpora());
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    vocab.save(&out.join(VOCAB_FILE))?;
    let base = seed.wrapping_mul(1_000_003);
    let tasks: [(Task, &str); 3] = [
        (gen_asr_task(spec, &vocab, spec.n_asr, base.wrapping_add(1))?, "asr"),
        (gen_mt_task(spec, &vocab, spec.n_mt, base.wrapping_add(2))?, "mt"),
        (gen_st_task(spec, &vocab, spec.n_st, base.wrapping_add(3))?, "st"),
    ];
    let mut written = vec![out.join(VOCAB_FILE)];
    for (task, name) in &tasks {
        written.push(crate::tasks::write_tsv_task(task, &vocab, out, name)?);
    }
    Ok(written)
}
