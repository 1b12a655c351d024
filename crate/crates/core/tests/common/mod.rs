//! Fixtures and oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use metast::meta::{auxiliary_update, meta_step, meta_train, meta_update, HyperParams, MetricLog, TaskSuite};
use metast::model::{init_params, is_compression_param, loss_and_grads, ModelConfig};
use metast::tasks::{gen_asr_task, gen_mt_task, gen_st_task, sample_batch, SyntheticSpec, Task};
use metast::vocab::Vocabulary;
use metast::{Graph, ModelParams, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec { alphabet_size: 6, frame_dim: 6, min_len: 3, max_len: 6, ..Default::default() }
}

pub fn tiny_vocab() -> Vocabulary {
    Vocabulary::build_universal(&tiny_spec().vocab_corpora())
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_enc: 1,
        n_dec: 1,
        n_heads: 2,
        d_ff: 12,
        dropout: 0.0,
        conv_layers: 2,
        conv_channels: 3,
        frame_dim: 6,
        vocab_size: tiny_vocab().len(),
        max_len: 32,
        ..Default::default()
    }
}

pub fn tiny_suite(n: usize, seed: u64) -> TaskSuite {
    let spec = tiny_spec();
    let vocab = tiny_vocab();
    let asr = gen_asr_task(&spec, &vocab, n, seed).unwrap();
    let mt = gen_mt_task(&spec, &vocab, n, seed + 1).unwrap();
    let st = gen_st_task(&spec, &vocab, n, seed + 2).unwrap();
    let (st_train, st_dev) = st.split_dev(0.2);
    TaskSuite { asr, mt, st_train, st_dev, vocab }
}

fn quadratic(c: f64) -> impl Fn(&ModelParams<f64>) -> metast::Result<(f64, metast::GradientMap<f64>)> {
    move |p| {
        let mut g = Graph::new();
        let theta = g.param("theta", p.require("theta")?);
        let target = g.constant(Tensor::scalar(c));
        let neg = g.scale(target, -1.0);
        let diff = g.add(theta, neg)?;
        let sq = g.mul(diff, diff)?;
        let half = g.scale(sq, 0.5);
        let loss = g.sum(half);
        let value = g.value(loss).values()[0];
        Ok((value, g.backward(loss)?))
    }
}

/// `(θᵃ, θᵐ')` for ℓ(θ)=½(θ−1)², θᵐ=0, α=β=0.1.
pub fn scalar_surrogate() -> (f64, f64) {
    let theta_m: ModelParams<f64> = [("theta".to_string(), Tensor::scalar(0.0))].into_iter().collect();
    let (theta_a, _) = auxiliary_update(&theta_m, quadratic(1.0), 0.1).unwrap();
    let (next, _) = meta_update(&theta_m, quadratic(1.0), quadratic(1.0), 0.1, 0.1).unwrap();
    (theta_a.require("theta").unwrap().values()[0], next.require("theta").unwrap().values()[0])
}

/// Max |meta_step − hand-rolled two plain gradient steps| over `trials`
/// random draws of parameters, task and rates, in f64.
pub fn two_step_max_diff(trials: u64) -> f64 {
    let config = tiny_config();
    let suite = tiny_suite(12, 40);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let params = init_params::<f64>(&config, 1000 + trial).unwrap();
        let task: &Task = if trial % 2 == 0 { &suite.asr } else { &suite.mt };
        let hyper = HyperParams {
            alpha: 0.05 + 0.01 * trial as f64,
            beta: 0.2 - 0.005 * trial as f64,
            k: 2 + (trial as usize % 3),
            l: 3,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let (got, _) = meta_step(&params, task, &config, &hyper, &mut rng).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let support = sample_batch(task, hyper.k, &mut rng).unwrap();
        let query = sample_batch(task, hyper.l, &mut rng).unwrap();
        let (_, g1) = loss_and_grads(&params, &config, &support, None).unwrap();
        let mut adapted = params.clone();
        for (name, t) in adapted.iter_mut() {
            if let Some(g) = g1.get(name) {
                for (x, d) in t.values_mut().iter_mut().zip(g.values()) {
                    *x -= hyper.alpha * d;
                }
            }
        }
        let (_, g2) = loss_and_grads(&adapted, &config, &query, None).unwrap();
        for (name, t) in params.iter() {
            let out = got.require(name).unwrap();
            for (i, (&x, &y)) in t.values().iter().zip(out.values()).enumerate() {
                let d = g2.get(name).map_or(0.0, |g| g.values()[i]);
                worst = worst.max((x - hyper.beta * d - y).abs());
            }
        }
    }
    worst
}

/// `(conv kernels bit-identical, any non-conv parameter moved)` after
/// `steps` meta steps on an MT-only source set.
pub fn conv_freeze(steps: usize) -> (bool, bool) {
    let config = ModelConfig { dropout: 0.1, ..tiny_config() };
    let suite = tiny_suite(30, 3);
    let init = init_params::<f32>(&config, 5).unwrap();
    let hyper = HyperParams { meta_steps: steps, k: 4, l: 4, ..Default::default() };
    let mut log = MetricLog::new();
    let out = meta_train(std::slice::from_ref(&suite.mt), init.clone(), &config, &hyper, &mut log).unwrap();
    let mut frozen = true;
    let mut moved = false;
    for (name, t) in init.iter() {
        let same = t.bit_eq(out.require(name).unwrap());
        if name.starts_with("compress.conv") {
            frozen &= same;
        } else if !is_compression_param(name) {
            moved |= !same;
        }
    }
    (frozen, moved)
}

/// Reference corpus BLEU-4: n-grams as joined strings, clipped counts by
/// linear scan.
pub fn brute_bleu(h: &[String], r: &[String]) -> f64 {
    let (mut m, mut t) = ([0usize; 4], [0usize; 4]);
    let (mut hl, mut rl) = (0usize, 0usize);
    for (hs, rs) in h.iter().zip(r) {
        let hw: Vec<&str> = hs.split_whitespace().collect();
        let rw: Vec<&str> = rs.split_whitespace().collect();
        hl += hw.len();
        rl += rw.len();
        for n in 1..=4 {
            let hg: Vec<String> = (0..hw.len().saturating_sub(n - 1)).map(|i| hw[i..i + n].join(" ")).collect();
            let rg: Vec<String> = (0..rw.len().saturating_sub(n - 1)).map(|i| rw[i..i + n].join(" ")).collect();
            t[n - 1] += hg.len();
            let mut seen: Vec<&String> = Vec::new();
            for g in &hg {
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                let ch = hg.iter().filter(|x| *x == g).count();
                let cr = rg.iter().filter(|x| *x == g).count();
                m[n - 1] += ch.min(cr);
            }
        }
    }
    if (0..4).any(|n| t[n] == 0 || m[n] == 0) {
        return 0.0;
    }
    let lp: f64 = (0..4).map(|n| (m[n] as f64 / t[n] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if hl >= rl { 1.0 } else { (1.0 - rl as f64 / hl as f64).exp() };
    100.0 * bp * lp.exp()
}

/// Full-matrix Levenshtein distance.
pub fn brute_edit(a: &[&str], b: &[&str]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let c = usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = (d[i - 1][j - 1] + c).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

pub fn brute_wer(h: &[String], r: &[String]) -> f64 {
    let edits: usize = h
        .iter()
        .zip(r)
        .map(|(a, b)| brute_edit(&a.split_whitespace().collect::<Vec<_>>(), &b.split_whitespace().collect::<Vec<_>>()))
        .sum();
    let total: usize = r.iter().map(|s| s.split_whitespace().count()).sum();
    edits as f64 / total as f64
}

pub fn random_corpus(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    use rand::Rng;
    let words = ["a", "b", "c", "d", "A", "bb"];
    (0..n)
        .map(|_| {
            let len = rng.random_range(0..=8);
            (0..len).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
        })
        .collect()
}
