//! Greedy decoding, corpus BLEU-4 and word error rate.
//!
//! Scoring is case sensitive and tokenises on whitespace. BLEU is unsmoothed:
//! a zero n-gram precision gives a zero score.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Forward, ModelConfig};
use crate::params::ModelParams;
use crate::tasks::{Batch, Example, Modality, Source};
use crate::tensor::Real;
use crate::vocab::{BOS, EOS, PAD};

pub const MAX_NGRAM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// 0–100
    pub bleu: f64,
    pub brevity_penalty: f64,
    pub precisions: [f64; MAX_NGRAM],
    pub hyp_len: usize,
    pub ref_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub wer: f64,
    pub n_sentences: usize,
    pub brevity_penalty: f64,
    pub precisions: [f64; MAX_NGRAM],
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn check_pairs<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    Ok(())
}

fn ngram_counts<'a, 'b>(ws: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut m = HashMap::new();
    if ws.len() >= n {
        for g in ws.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU with clipped n-gram precisions for n = 1..4.
pub fn bleu4<S: AsRef<str>>(hypotheses: &[S], references: &[S]) -> Result<BleuReport> {
    check_pairs(hypotheses, references)?;
    let mut matches = [0usize; MAX_NGRAM];
    let mut totals = [0usize; MAX_NGRAM];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let hw = words(h.as_ref());
        let rw = words(r.as_ref());
        hyp_len += hw.len();
        ref_len += rw.len();
        for n in 1..=MAX_NGRAM {
            let hc = ngram_counts(&hw, n);
            let rc = ngram_counts(&rw, n);
            totals[n - 1] += hw.len().saturating_sub(n - 1);
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let mut precisions = [0.0; MAX_NGRAM];
    for n in 0..MAX_NGRAM {
        precisions[n] = if totals[n] == 0 { 0.0 } else { matches[n] as f64 / totals[n] as f64 };
    }
    let brevity_penalty = if hyp_len == 0 { 0.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp() };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_NGRAM as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport { bleu, brevity_penalty, precisions, hyp_len, ref_len })
}

/// Levenshtein distance over words with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Total word edit distance divided by total reference words.
pub fn wer<S: AsRef<str>>(hypotheses: &[S], references: &[S]) -> Result<f64> {
    check_pairs(hypotheses, references)?;
    let mut edits = 0;
    let mut total = 0;
    for (h, r) in hypotheses.iter().zip(references) {
        let rw = words(r.as_ref());
        edits += edit_distance(&words(h.as_ref()), &rw);
        total += rw.len();
    }
    if total == 0 {
        return Err(Error::Empty("reference corpus"));
    }
    Ok(edits as f64 / total as f64)
}

pub fn evaluate<S: AsRef<str>>(hypotheses: &[S], references: &[S]) -> Result<EvalReport> {
    let b = bleu4(hypotheses, references)?;
    let w = wer(hypotheses, references)?;
    Ok(EvalReport {
        bleu: b.bleu,
        wer: w,
        n_sentences: references.len(),
        brevity_penalty: b.brevity_penalty,
        precisions: b.precisions,
    })
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding for a batch of sources. Each output stops at EOS or after
/// `max_len` tokens; BOS, EOS and PAD never appear in the result.
pub fn greedy_decode_batch<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    sources: &[&Source],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let max_len = max_len.min(config.max_len.saturating_sub(1)).max(1);
    let examples: Vec<Example> =
        sources.iter().map(|s| Example { source: (*s).clone(), target: Vec::new() }).collect();
    let batch = Batch::from_examples(&examples.iter().collect::<Vec<_>>())?;
    let b = batch.size();
    let mut g = Graph::new();
    let enc = Forward::new(&mut g, params, config, None).encode_source(&batch, batch.modality())?;
    let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; b];
    let mut done = vec![false; b];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); b];
    let v = config.vocab_size;
    for _ in 0..max_len {
        let logits = Forward::new(&mut g, params, config, None).decode(&enc, &prefixes)?;
        let t = prefixes[0].len();
        let lv = g.value(logits).values();
        for i in 0..b {
            let pos = i * t + t - 1;
            let next = argmax(&lv[pos * v..(pos + 1) * v]);
            if !done[i] {
                if next == EOS {
                    done[i] = true;
                } else if next != BOS && next != PAD {
                    out[i].push(next);
                }
            }
            prefixes[i].push(next);
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(out)
}

pub fn greedy_decode<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    source: &Source,
    modality: Modality,
    max_len: usize,
) -> Result<Vec<usize>> {
    if source.modality() != modality {
        return Err(Error::Modality(format!("{:?} source decoded as {modality:?}", source.modality())));
    }
    Ok(greedy_decode_batch(params, config, &[source], max_len)?.pop().unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Naive oracle: n-grams as joined strings, counts by linear scan.
    fn brute_bleu(h: &[String], r: &[String]) -> f64 {
        let mut m = [0usize; 4];
        let mut t = [0usize; 4];
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

    fn brute_edit(a: &[&str], b: &[&str]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for (j, cell) in d[0].iter_mut().enumerate() {
            *cell = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let c = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                d[i][j] = (d[i - 1][j - 1] + c).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[a.len()][b.len()]
    }

    fn random_corpus(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
        let vocab = ["a", "b", "c", "d", "A"];
        (0..n)
            .map(|_| {
                let len = rng.random_range(0..=8);
                (0..len).map(|_| vocab[rng.random_range(0..vocab.len())]).collect::<Vec<_>>().join(" ")
            })
            .collect()
    }

    #[test]
    fn bleu_hand_cases() {
        let r = bleu4(&["a b c d e f"], &["a b c d e f"]).unwrap();
        assert!((r.bleu - 100.0).abs() < 1e-12);
        let r = bleu4(&["a b c d"], &["a b c d e"]).unwrap();
        assert_eq!(r.precisions, [1.0; 4]);
        assert!((r.brevity_penalty - (-0.25f64).exp()).abs() < 1e-15);
        assert!((r.bleu - 77.880078).abs() < 1e-5, "{}", r.bleu);
        assert_eq!(bleu4(&["a b c x"], &["a b c d"]).unwrap().bleu, 0.0);
        assert!(bleu4::<&str>(&[], &[]).is_err());
    }

    #[test]
    fn bleu_case_sensitive() {
        assert_eq!(bleu4(&["A b c d"], &["a b c d"]).unwrap().bleu, 0.0);
    }

    #[test]
    fn wer_hand_cases() {
        assert_eq!(wer(&["a b c d"], &["a x c d"]).unwrap(), 0.25);
        assert_eq!(wer(&["a b"], &["a b"]).unwrap(), 0.0);
        assert_eq!(wer(&[""], &["x y z"]).unwrap(), 1.0);
        assert!(wer(&["a"], &[""]).is_err());
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = rng.random_range(1..=5);
            let h = random_corpus(&mut rng, n);
            let r = random_corpus(&mut rng, n);
            assert_eq!(bleu4(&h, &r).unwrap().bleu, brute_bleu(&h, &r));
            let edits: usize = h
                .iter()
                .zip(&r)
                .map(|(a, b)| brute_edit(&a.split_whitespace().collect::<Vec<_>>(), &b.split_whitespace().collect::<Vec<_>>()))
                .sum();
            let total: usize = r.iter().map(|s| s.split_whitespace().count()).sum();
            if total > 0 {
                assert_eq!(wer(&h, &r).unwrap(), edits as f64 / total as f64);
            }
        }
    }

    #[test]
    fn bleu_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_corpus(&mut rng, 5);
        let r = random_corpus(&mut rng, 5);
        let mut idx: Vec<usize> = (0..5).collect();
        idx.reverse();
        let hp: Vec<String> = idx.iter().map(|&i| h[i].clone()).collect();
        let rp: Vec<String> = idx.iter().map(|&i| r[i].clone()).collect();
        assert_eq!(bleu4(&h, &r).unwrap(), bleu4(&hp, &rp).unwrap());
    }
}
