//! Tasks, batches and the synthetic ASR / MT / ST families.
//!
//! The synthetic families share two fixed codes drawn from the
//! [`SyntheticSpec`]: a per-symbol acoustic embedding (frames) and a letter
//! substitution cipher (translation). An ST example is the ASR rendering of a
//! string paired with the cipher of that string, so ST = MT ∘ ASR exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Frames,
    Tokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskRole {
    Asr,
    Mt,
    St,
}

impl TaskRole {
    pub fn name(self) -> &'static str {
        match self {
            TaskRole::Asr => "asr",
            TaskRole::Mt => "mt",
            TaskRole::St => "st",
        }
    }
}

/// `frames x dim` row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSeq {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FrameSeq {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 || data.len() != frames * dim {
            return Err(Error::Shape(format!(
                "frame sequence {frames}x{dim} with {} values",
                data.len()
            )));
        }
        Ok(Self { frames, dim, data })
    }

    /// Header: `T`, `F` as little-endian u32; body: row-major little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.data.len());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Shape("frames file shorter than its header".into()));
        }
        let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != 4 * t * f {
            return Err(Error::Shape(format!(
                "frames file declares {t}x{f} but carries {} bytes",
                body.len()
            )));
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(t, f, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Frames(FrameSeq),
    Tokens(Vec<usize>),
}

impl Source {
    pub fn modality(&self) -> Modality {
        match self {
            Source::Frames(_) => Modality::Frames,
            Source::Tokens(_) => Modality::Tokens,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Source::Frames(f) => f.frames,
            Source::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Target ids exclude BOS/EOS; batching adds them.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub source: Source,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: String,
    pub role: TaskRole,
    pub modality: Modality,
    pub examples: Vec<Example>,
}

impl Task {
    pub fn new(id: impl Into<String>, role: TaskRole, modality: Modality, examples: Vec<Example>) -> Result<Self> {
        let id = id.into();
        let mut dim = None;
        for (i, ex) in examples.iter().enumerate() {
            if ex.source.modality() != modality {
                return Err(Error::Modality(format!("task `{id}` example {i} does not match {modality:?}")));
            }
            if let Source::Frames(f) = &ex.source {
                if *dim.get_or_insert(f.dim) != f.dim {
                    return Err(Error::Shape(format!("task `{id}` mixes frame widths")));
                }
            }
        }
        Ok(Self { id, role, modality, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Holds out the last `ceil(frac * n)` examples (at least one, and at
    /// least one left for training when n ≥ 2).
    pub fn split_dev(&self, frac: f64) -> (Task, Task) {
        let n = self.examples.len();
        let mut n_dev = ((n as f64) * frac).ceil() as usize;
        n_dev = n_dev.clamp(usize::from(n > 0), n.saturating_sub(1).max(usize::from(n == 1)));
        let cut = n - n_dev;
        let mk = |suffix: &str, ex: &[Example]| Task {
            id: format!("{}{suffix}", self.id),
            role: self.role,
            modality: self.modality,
            examples: ex.to_vec(),
        };
        (mk("", &self.examples[..cut]), mk("-dev", &self.examples[cut..]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchInputs {
    /// `[B, max_frames, dim]`, zero padded.
    Frames { data: Vec<f32>, max_frames: usize, dim: usize },
    /// `[B, max_len]`, PAD padded.
    Tokens { ids: Vec<Vec<usize>> },
}

/// Padded inputs plus teacher-forcing targets (each target ends in EOS).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: BatchInputs,
    pub input_lengths: Vec<usize>,
    /// `[B, max_target]`: target ids followed by EOS, then PAD.
    pub targets: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        let first = examples.first().ok_or(Error::Empty("batch"))?;
        let modality = first.source.modality();
        let input_lengths: Vec<usize> = examples.iter().map(|e| e.source.len()).collect();
        if input_lengths.contains(&0) {
            return Err(Error::Empty("source sequence"));
        }
        let max_in = *input_lengths.iter().max().unwrap();
        let inputs = match modality {
            Modality::Frames => {
                let Source::Frames(f0) = &first.source else { unreachable!() };
                let dim = f0.dim;
                let mut data = vec![0.0f32; examples.len() * max_in * dim];
                for (b, ex) in examples.iter().enumerate() {
                    let Source::Frames(f) = &ex.source else {
                        return Err(Error::Modality("mixed modalities in one batch".into()));
                    };
                    if f.dim != dim {
                        return Err(Error::Shape("mixed frame widths in one batch".into()));
                    }
                    let off = b * max_in * dim;
                    data[off..off + f.data.len()].copy_from_slice(&f.data);
                }
                BatchInputs::Frames { data, max_frames: max_in, dim }
            }
            Modality::Tokens => {
                let mut ids = Vec::with_capacity(examples.len());
                for ex in examples {
                    let Source::Tokens(t) = &ex.source else {
                        return Err(Error::Modality("mixed modalities in one batch".into()));
                    };
                    let mut row = t.clone();
                    row.resize(max_in, PAD);
                    ids.push(row);
                }
                BatchInputs::Tokens { ids }
            }
        };
        let max_t = examples.iter().map(|e| e.target.len() + 1).max().unwrap();
        let mut targets = Vec::with_capacity(examples.len());
        let mut mask = Vec::with_capacity(examples.len());
        for ex in examples {
            let mut row = ex.target.clone();
            row.push(EOS);
            let m: Vec<bool> = (0..max_t).map(|i| i < row.len()).collect();
            row.resize(max_t, PAD);
            targets.push(row);
            mask.push(m);
        }
        Ok(Self { inputs, input_lengths, targets, mask })
    }

    pub fn size(&self) -> usize {
        self.targets.len()
    }

    pub fn modality(&self) -> Modality {
        match self.inputs {
            BatchInputs::Frames { .. } => Modality::Frames,
            BatchInputs::Tokens { .. } => Modality::Tokens,
        }
    }

    pub fn target_len(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    /// Decoder inputs: BOS followed by the targets shifted right.
    pub fn decoder_inputs(&self) -> Vec<Vec<usize>> {
        self.targets
            .iter()
            .map(|row| {
                let mut d = Vec::with_capacity(row.len());
                d.push(crate::vocab::BOS);
                d.extend_from_slice(&row[..row.len() - 1]);
                d
            })
            .collect()
    }
}

/// Uniform draw of one task.
pub fn sample_task<'a, R: Rng>(tasks: &'a [Task], rng: &mut R) -> Result<&'a Task> {
    if tasks.is_empty() {
        return Err(Error::Empty("task set"));
    }
    Ok(&tasks[rng.random_range(0..tasks.len())])
}

/// `size` examples drawn uniformly with replacement.
pub fn sample_batch<R: Rng>(task: &Task, size: usize, rng: &mut R) -> Result<Batch> {
    if task.examples.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let picks: Vec<&Example> =
        (0..size).map(|_| &task.examples[rng.random_range(0..task.examples.len())]).collect();
    Batch::from_examples(&picks)
}

fn default_alphabet_size() -> usize {
    12
}
fn default_min_len() -> usize {
    6
}
fn default_max_len() -> usize {
    12
}
fn default_frames_per_token() -> usize {
    3
}
fn default_noise() -> f64 {
    0.1
}
fn default_frame_dim() -> usize {
    16
}
fn default_space_prob() -> f64 {
    0.25
}
fn default_cipher_seed() -> u64 {
    17
}
fn default_code_seed() -> u64 {
    29
}
fn default_n_source() -> usize {
    10_000
}
fn default_n_st() -> usize {
    500
}

/// Parameters of the synthetic task family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of letters (`a`, `b`, ...). Space is always available too.
    #[serde(default = "default_alphabet_size")]
    pub alphabet_size: usize,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Frames emitted per character.
    #[serde(default = "default_frames_per_token")]
    pub frames_per_token: usize,
    /// Std-dev of per-frame Gaussian noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_frame_dim")]
    pub frame_dim: usize,
    /// Probability of a word break at each interior position.
    #[serde(default = "default_space_prob")]
    pub space_prob: f64,
    /// Seeds the letter permutation. `identity_cipher` overrides it.
    #[serde(default = "default_cipher_seed")]
    pub cipher_seed: u64,
    #[serde(default)]
    pub identity_cipher: bool,
    /// Seeds the per-symbol acoustic embeddings.
    #[serde(default = "default_code_seed")]
    pub code_seed: u64,
    #[serde(default = "default_n_source")]
    pub n_asr: usize,
    #[serde(default = "default_n_source")]
    pub n_mt: usize,
    #[serde(default = "default_n_st")]
    pub n_st: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("synthetic.{f}"), m));
        if self.alphabet_size == 0 || self.alphabet_size > 26 {
            return bad("alphabet_size", "must be in 1..=26");
        }
        if self.min_len == 0 {
            return bad("min_len", "must be at least 1");
        }
        if self.max_len < self.min_len {
            return bad("max_len", "must be at least min_len");
        }
        if self.frames_per_token == 0 {
            return bad("frames_per_token", "must be at least 1");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", "must be a finite value ≥ 0");
        }
        if self.frame_dim == 0 {
            return bad("frame_dim", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.space_prob) {
            return bad("space_prob", "must be in [0, 1)");
        }
        Ok(())
    }

    pub fn letters(&self) -> Vec<char> {
        (0..self.alphabet_size as u8).map(|i| (b'a' + i) as char).collect()
    }

    /// Every string the family can produce uses only these symbols.
    pub fn symbols(&self) -> Vec<char> {
        let mut s = self.letters();
        s.push(' ');
        s
    }

    pub fn cipher(&self) -> Cipher {
        if self.identity_cipher {
            Cipher::identity(&self.letters())
        } else {
            Cipher::from_seed(&self.letters(), self.cipher_seed)
        }
    }

    pub fn acoustic_code(&self) -> AcousticCode {
        AcousticCode::new(&self.symbols(), self.frame_dim, self.code_seed)
    }

    /// One string per universal-vocabulary corpus; enough to cover all symbols.
    pub fn vocab_corpora(&self) -> Vec<Vec<String>> {
        let src: String = self.symbols().into_iter().collect();
        let tgt = self.cipher().apply(&src);
        vec![vec![src], vec![tgt]]
    }

    /// A random source-language sentence.
    pub fn random_text<R: Rng>(&self, rng: &mut R) -> String {
        let letters = self.letters();
        let len = rng.random_range(self.min_len..=self.max_len);
        let mut s = String::with_capacity(len);
        let mut prev_space = true;
        for i in 0..len {
            let interior = i > 0 && i + 1 < len;
            if interior && !prev_space && rng.random::<f64>() < self.space_prob {
                s.push(' ');
                prev_space = true;
            } else {
                s.push(letters[rng.random_range(0..letters.len())]);
                prev_space = false;
            }
        }
        s
    }
}

/// Letter substitution; characters outside the alphabet pass through.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cipher {
    from: Vec<char>,
    to: Vec<char>,
}

impl Cipher {
    pub fn identity(letters: &[char]) -> Self {
        Self { from: letters.to_vec(), to: letters.to_vec() }
    }

    pub fn from_seed(letters: &[char], seed: u64) -> Self {
        let mut to = letters.to_vec();
        to.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self { from: letters.to_vec(), to }
    }

    /// Explicit mapping `from[i] -> to[i]`; `to` must be a permutation of `from`.
    pub fn from_pairs(from: &[char], to: &[char]) -> Result<Self> {
        let mut a = from.to_vec();
        let mut b = to.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err(Error::Contract("cipher target is not a permutation of its source".into()));
        }
        Ok(Self { from: from.to_vec(), to: to.to_vec() })
    }

    pub fn apply(&self, text: &str) -> String {
        text.chars()
            .map(|c| self.from.iter().position(|&f| f == c).map_or(c, |i| self.to[i]))
            .collect()
    }
}

/// Fixed Gaussian embedding per symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticCode {
    symbols: Vec<char>,
    dim: usize,
    table: Vec<f32>,
}

impl AcousticCode {
    pub fn new(symbols: &[char], dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..symbols.len() * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { symbols: symbols.to_vec(), dim, table }
    }

    pub fn embedding(&self, c: char) -> Option<&[f32]> {
        let i = self.symbols.iter().position(|&s| s == c)?;
        Some(&self.table[i * self.dim..(i + 1) * self.dim])
    }

    /// `r` copies of each character's embedding plus N(0, σ²) noise.
    pub fn render<R: Rng>(&self, text: &str, r: usize, sigma: f64, rng: &mut R) -> Result<FrameSeq> {
        let mut data = Vec::with_capacity(text.chars().count() * r * self.dim);
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::Contract(e.to_string()))?;
        for c in text.chars() {
            let emb = self
                .embedding(c)
                .ok_or_else(|| Error::Contract(format!("symbol {c:?} has no acoustic code")))?;
            for _ in 0..r {
                for &v in emb {
                    let n = if sigma > 0.0 { noise.sample(rng) as f32 } else { 0.0 };
                    data.push(v + n);
                }
            }
        }
        FrameSeq::new(data.len() / self.dim, self.dim, data)
    }
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Contract("dataset size must be at least 1".into()));
    }
    Ok(())
}

/// Draws `n` (transcript, frames) pairs; shared by the ASR and ST generators
/// so both see the same strings and noise for the same seed.
fn spoken_strings(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Vec<(String, FrameSeq)>> {
    spec.validate()?;
    check_n(n)?;
    let code = spec.acoustic_code();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s = spec.random_text(&mut rng);
            let f = code.render(&s, spec.frames_per_token, spec.noise, &mut rng)?;
            Ok((s, f))
        })
        .collect()
}

/// Text → cipher(text), token inputs.
pub fn gen_mt_task(spec: &SyntheticSpec, vocab: &Vocabulary, n: usize, seed: u64) -> Result<Task> {
    spec.validate()?;
    check_n(n)?;
    let cipher = spec.cipher();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|_| {
            let s = spec.random_text(&mut rng);
            Example { source: Source::Tokens(vocab.encode(&s, false)), target: vocab.encode(&cipher.apply(&s), false) }
        })
        .collect();
    Task::new("mt", TaskRole::Mt, Modality::Tokens, examples)
}

/// Frames(text) → text.
pub fn gen_asr_task(spec: &SyntheticSpec, vocab: &Vocabulary, n: usize, seed: u64) -> Result<Task> {
    let examples = spoken_strings(spec, n, seed)?
        .into_iter()
        .map(|(s, f)| Example { source: Source::Frames(f), target: vocab.encode(&s, false) })
        .collect();
    Task::new("asr", TaskRole::Asr, Modality::Frames, examples)
}

/// Frames(text) → cipher(text).
pub fn gen_st_task(spec: &SyntheticSpec, vocab: &Vocabulary, n: usize, seed: u64) -> Result<Task> {
    let cipher = spec.cipher();
    let examples = spoken_strings(spec, n, seed)?
        .into_iter()
        .map(|(s, f)| Example { source: Source::Frames(f), target: vocab.encode(&cipher.apply(&s), false) })
        .collect();
    Task::new("st", TaskRole::St, Modality::Frames, examples)
}

/// Reads `source<TAB>target` lines. For frame tasks the source is a path to a
/// frames file, relative paths resolved against the TSV's directory.
pub fn load_tsv_task(path: &Path, modality: Modality, role: TaskRole, vocab: &Vocabulary) -> Result<Task> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let (src, tgt) = line.split_once('\t').ok_or_else(|| parse_err("expected `source<TAB>target`".into()))?;
        if tgt.contains('\t') {
            return Err(parse_err("more than one TAB".into()));
        }
        let source = match modality {
            Modality::Tokens => {
                if src.is_empty() {
                    return Err(parse_err("empty source".into()));
                }
                Source::Tokens(vocab.encode(src, false))
            }
            Modality::Frames => {
                let p = PathBuf::from(src);
                let p = if p.is_absolute() { p } else { base.join(p) };
                if !p.exists() {
                    return Err(parse_err(format!("missing frames file {}", p.display())));
                }
                Source::Frames(FrameSeq::load(&p).map_err(|e| parse_err(e.to_string()))?)
            }
        };
        examples.push(Example { source, target: vocab.encode(tgt, false) });
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Task::new(id, role, modality, examples)
}

/// Writes a task as TSV (plus one frames file per example for frame tasks).
pub fn write_tsv_task(task: &Task, vocab: &Vocabulary, dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tsv = dir.join(format!("{name}.tsv"));
    let mut out = Vec::new();
    if task.modality == Modality::Frames {
        let fdir = dir.join(format!("{name}_frames"));
        fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    }
    for (i, ex) in task.examples.iter().enumerate() {
        let src = match &ex.source {
            Source::Tokens(t) => vocab.decode(t)?,
            Source::Frames(f) => {
                let rel = format!("{name}_frames/{i:06}.frm");
                f.save(&dir.join(&rel))?;
                rel
            }
        };
        writeln!(out, "{src}\t{}", vocab.decode(&ex.target)?).expect("write to Vec");
    }
    fs::write(&tsv, out).map_err(|e| Error::io(&tsv, e))?;
    Ok(tsv)
}
