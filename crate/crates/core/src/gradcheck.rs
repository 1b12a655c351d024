//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{GradientMap, Graph, NodeId};
use crate::model::{init_params, Forward, ModelConfig};
use crate::params::ModelParams;
use crate::tasks::{gen_asr_task, gen_mt_task, Batch, SyntheticSpec};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const DEFAULT_EPS: f64 = 1e-4;

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Builds a scalar from the op's output; non-scalar outputs are contracted
/// with fixed pseudo-random weights so every element contributes.
fn scalarize(g: &mut Graph<f64>, out: NodeId) -> Result<NodeId> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let n = g.value(out).len();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7381).sin() + 0.3).collect();
    let wn = g.constant(Tensor::new(shape, w)?);
    let prod = g.mul(out, wn)?;
    Ok(g.sum(prod))
}

fn evaluate<F>(op: &F, inputs: &ModelParams<f64>) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph<f64>, &ModelParams<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let out = op(&mut g, inputs)?;
    let s = scalarize(&mut g, out)?;
    Ok((g.value(s).values()[0], g.relu_pattern()))
}

/// Smallest step tried when a ReLU kink lies within `eps` of the point.
const MIN_STEP: f64 = 1e-8;

/// Reverse-mode gradients of the (scalarised) op with respect to every
/// parameter the op registers.
pub fn analytic_gradients<F>(op: &F, inputs: &ModelParams<f64>) -> Result<GradientMap<f64>>
where
    F: Fn(&mut Graph<f64>, &ModelParams<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let out = op(&mut g, inputs)?;
    let s = scalarize(&mut g, out)?;
    g.backward(s)
}

/// Central differences for every element of every tensor named in `keys`.
///
/// If some ReLU input changes sign between `x - h` and `x + h`, the interval
/// straddles a kink and the quotient mixes two slopes; `h` is then shrunk
/// tenfold (down to 1e-8) until both probes stay on the point's own piece.
pub fn numeric_gradients<F>(op: &F, inputs: &ModelParams<f64>, keys: &[String], eps: f64) -> Result<GradientMap<f64>>
where
    F: Fn(&mut Graph<f64>, &ModelParams<f64>) -> Result<NodeId>,
{
    let mut out = GradientMap::new();
    let mut work = inputs.clone();
    let (_, pattern) = evaluate(op, inputs)?;
    for key in keys {
        let base = inputs.require(key)?.clone();
        let mut grad = vec![0.0; base.len()];
        for (i, slot) in grad.iter_mut().enumerate() {
            let x = base.values()[i];
            let mut h = eps;
            loop {
                work.get_mut(key).unwrap().values_mut()[i] = x + h;
                let (up, p_up) = evaluate(op, &work)?;
                work.get_mut(key).unwrap().values_mut()[i] = x - h;
                let (down, p_down) = evaluate(op, &work)?;
                *slot = (up - down) / (2.0 * h);
                if (p_up == pattern && p_down == pattern) || h / 10.0 < MIN_STEP {
                    break;
                }
                h /= 10.0;
            }
            work.get_mut(key).unwrap().values_mut()[i] = x;
        }
        out.insert(key.clone(), Tensor::new(base.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Largest elementwise relative error between two gradient maps over the
/// keys of `analytic`. Keys missing from `numeric` are skipped.
pub fn max_relative_error(analytic: &GradientMap<f64>, numeric: &GradientMap<f64>) -> f64 {
    let mut worst = 0.0f64;
    for (k, a) in analytic {
        if let Some(n) = numeric.get(k) {
            for (&x, &y) in a.values().iter().zip(n.values()) {
                worst = worst.max(relative_error(x, y));
            }
        }
    }
    worst
}

/// Compares backward's gradient with central differences for all
/// parameters the op registers; returns the max relative error.
pub fn finite_diff_check<F>(op: F, inputs: &ModelParams<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ModelParams<f64>) -> Result<NodeId>,
{
    let analytic = analytic_gradients(&op, inputs)?;
    let keys: Vec<String> = analytic.keys().cloned().collect();
    let numeric = numeric_gradients(&op, inputs, &keys, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Outcome of one named check in [`run_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub trials: usize,
    /// Worst relative error over all trials.
    pub max_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_error < tolerance
    }
}

fn extent(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=6)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("positive extents")
}

/// Values with magnitude in [0.1, 1) so ReLU kinks sit far from every
/// finite-difference probe.
fn off_kink_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape, v).expect("positive extents")
}

fn inputs(pairs: Vec<(&str, Tensor<f64>)>) -> ModelParams<f64> {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

type Case = (ModelParams<f64>, Box<dyn Fn(&mut Graph<f64>, &ModelParams<f64>) -> Result<NodeId>>);

fn p(g: &mut Graph<f64>, ps: &ModelParams<f64>, name: &str) -> Result<NodeId> {
    Ok(g.param(name, ps.require(name)?))
}

fn primitive_case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    let (m, k, n) = (extent(rng), extent(rng), extent(rng));
    match name {
        "matmul" => (
            inputs(vec![("a", random_tensor(rng, vec![m, k])), ("b", random_tensor(rng, vec![k, n]))]),
            Box::new(|g, ps| {
                let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
                g.matmul(a, b)
            }),
        ),
        "batch_matmul" => {
            let bs = extent(rng);
            let b_t = rng.random::<bool>();
            let bshape = if b_t { vec![bs, n, k] } else { vec![bs, k, n] };
            (
                inputs(vec![("a", random_tensor(rng, vec![bs, m, k])), ("b", random_tensor(rng, bshape))]),
                Box::new(move |g, ps| {
                    let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
                    g.batch_matmul(a, b, b_t)
                }),
            )
        }
        "add" => (
            inputs(vec![("a", random_tensor(rng, vec![m, k])), ("b", random_tensor(rng, vec![m, k]))]),
            Box::new(|g, ps| {
                let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
                g.add(a, b)
            }),
        ),
        "add_broadcast" => (
            inputs(vec![("a", random_tensor(rng, vec![m, k, n])), ("b", random_tensor(rng, vec![n]))]),
            Box::new(|g, ps| {
                let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
                g.add_broadcast(a, b)
            }),
        ),
        "mul" => (
            inputs(vec![("a", random_tensor(rng, vec![m, k])), ("b", random_tensor(rng, vec![m, k]))]),
            Box::new(|g, ps| {
                let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
                g.mul(a, b)
            }),
        ),
        "scale" => {
            let c = rng.random_range(-2.0..2.0);
            (
                inputs(vec![("a", random_tensor(rng, vec![m, k]))]),
                Box::new(move |g, ps| {
                    let a = p(g, ps, "a")?;
                    Ok(g.scale(a, c))
                }),
            )
        }
        "relu" => (
            inputs(vec![("a", off_kink_tensor(rng, vec![m, k]))]),
            Box::new(|g, ps| {
                let a = p(g, ps, "a")?;
                Ok(g.relu(a))
            }),
        ),
        "softmax" => (
            inputs(vec![("a", random_tensor(rng, vec![m, k]))]),
            Box::new(|g, ps| {
                let a = p(g, ps, "a")?;
                Ok(g.softmax(a))
            }),
        ),
        "layer_norm" => {
            let d = rng.random_range(2..=6);
            (
                inputs(vec![
                    ("x", random_tensor(rng, vec![m, d])),
                    ("g", random_tensor(rng, vec![d])),
                    ("b", random_tensor(rng, vec![d])),
                ]),
                Box::new(|g, ps| {
                    let (x, gain, b) = (p(g, ps, "x")?, p(g, ps, "g")?, p(g, ps, "b")?);
                    g.layer_norm(x, gain, b, 1e-5)
                }),
            )
        }
        "gather" => {
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
            (
                inputs(vec![("table", random_tensor(rng, vec![m, k]))]),
                Box::new(move |g, ps| {
                    let t = p(g, ps, "table")?;
                    g.gather(t, &ids)
                }),
            )
        }
        "reshape" => (
            inputs(vec![("a", random_tensor(rng, vec![m, k, n]))]),
            Box::new(move |g, ps| {
                let a = p(g, ps, "a")?;
                g.reshape(a, &[m * k, n])
            }),
        ),
        "permute" => {
            let mut perm = vec![0, 1, 2];
            perm.shuffle(rng);
            (
                inputs(vec![("a", random_tensor(rng, vec![m, k, n]))]),
                Box::new(move |g, ps| {
                    let a = p(g, ps, "a")?;
                    g.permute(a, &perm)
                }),
            )
        }
        "conv2d_s2" => {
            let (bs, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
            (
                inputs(vec![
                    ("x", random_tensor(rng, vec![bs, m, k, cin])),
                    ("w", random_tensor(rng, vec![3, 3, cin, cout])),
                ]),
                Box::new(|g, ps| {
                    let (x, w) = (p(g, ps, "x")?, p(g, ps, "w")?);
                    g.conv2d_s2(x, w)
                }),
            )
        }
        "cross_entropy" => {
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
            let mut mask: Vec<bool> = (0..m).map(|_| rng.random_bool(0.7)).collect();
            mask[0] = true;
            (
                inputs(vec![("logits", random_tensor(rng, vec![m, k]))]),
                Box::new(move |g, ps| {
                    let l = p(g, ps, "logits")?;
                    g.cross_entropy(l, &targets, &mask)
                }),
            )
        }
        "sum" => (
            inputs(vec![("a", random_tensor(rng, vec![m, k]))]),
            Box::new(|g, ps| {
                let a = p(g, ps, "a")?;
                Ok(g.sum(a))
            }),
        ),
        "softmax_matmul_cross_entropy" => {
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            let mask = vec![true; m];
            (
                inputs(vec![("x", random_tensor(rng, vec![m, k])), ("w", random_tensor(rng, vec![k, n]))]),
                Box::new(move |g, ps| {
                    let (x, w) = (p(g, ps, "x")?, p(g, ps, "w")?);
                    let logits = g.matmul(x, w)?;
                    g.cross_entropy(logits, &targets, &mask)
                }),
            )
        }
        other => panic!("no gradient check named `{other}`"),
    }
}

/// Every differentiable primitive plus one composite.
pub const PRIMITIVES: [&str; 16] = [
    "matmul",
    "batch_matmul",
    "add",
    "add_broadcast",
    "mul",
    "scale",
    "relu",
    "softmax",
    "layer_norm",
    "gather",
    "reshape",
    "permute",
    "conv2d_s2",
    "cross_entropy",
    "sum",
    "softmax_matmul_cross_entropy",
];

pub fn check_primitive(name: &str, trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (ps, op) = primitive_case(name, &mut rng);
        worst = worst.max(finite_diff_check(|g, p| op(g, p), &ps, DEFAULT_EPS)?);
    }
    Ok(CheckOutcome { name: name.to_string(), trials, max_error: worst })
}

/// Full model loss on a d_model = 8, single-layer model, once per input
/// modality.
pub fn check_model_loss(seed: u64) -> Result<Vec<CheckOutcome>> {
    let spec = SyntheticSpec { alphabet_size: 6, frame_dim: 6, min_len: 3, max_len: 6, ..Default::default() };
    let vocab = Vocabulary::build_universal(&spec.vocab_corpora());
    let config = ModelConfig {
        d_model: 8,
        n_enc: 1,
        n_dec: 1,
        n_heads: 2,
        d_ff: 16,
        dropout: 0.0,
        conv_layers: 2,
        conv_channels: 3,
        frame_dim: spec.frame_dim,
        vocab_size: vocab.len(),
        max_len: 32,
        ..Default::default()
    };
    let params = init_params::<f64>(&config, seed)?;
    let tasks = [gen_asr_task(&spec, &vocab, 3, seed)?, gen_mt_task(&spec, &vocab, 3, seed + 1)?];
    let mut out = Vec::new();
    for task in &tasks {
        let batch = Batch::from_examples(&task.examples.iter().collect::<Vec<_>>())?;
        let err = finite_diff_check(
            |g, p| Forward::new(g, p, &config, None).loss(&batch, batch.modality()),
            &params,
            DEFAULT_EPS,
        )?;
        out.push(CheckOutcome { name: format!("model_loss[{}]", task.role.name()), trials: 1, max_error: err });
    }
    Ok(out)
}

/// All primitive checks (`trials` random inputs each) followed by the
/// model-loss checks.
pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (i, name) in PRIMITIVES.iter().enumerate() {
        out.push(check_primitive(name, trials, seed.wrapping_add(i as u64))?);
    }
    out.extend(check_model_loss(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(pairs: &[(&str, Vec<usize>, Vec<f64>)]) -> ModelParams<f64> {
        pairs
            .iter()
            .map(|(n, s, v)| (n.to_string(), Tensor::new(s.clone(), v.clone()).unwrap()))
            .collect()
    }

    #[test]
    fn linear_op_is_exact() {
        let p = inputs(&[("x", vec![3], vec![0.5, -1.0, 2.0])]);
        let err = finite_diff_check(
            |g, p| {
                let x = g.param("x", p.require("x")?);
                Ok(g.scale(x, 3.0))
            },
            &p,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn softmax_five_vector() {
        let p = inputs(&[("x", vec![5], vec![0.3, -1.2, 0.8, 2.1, -0.4])]);
        let err = finite_diff_check(
            |g, p| {
                let x = g.param("x", p.require("x")?);
                Ok(g.softmax(x))
            },
            &p,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn every_primitive_passes() {
        for name in PRIMITIVES {
            let r = check_primitive(name, 20, 11).unwrap();
            assert!(r.passed(1e-4), "{r:?}");
        }
    }

    #[test]
    fn step_shrinks_near_relu_kink() {
        // 3e-5 and -2e-5 sit inside the default step of the kink at 0.
        let p = inputs(&[("x", vec![3], vec![3e-5, -2e-5, 0.7])]);
        let op = |g: &mut Graph<f64>, p: &ModelParams<f64>| {
            let x = g.param("x", p.require("x")?);
            Ok(g.relu(x))
        };
        assert!(finite_diff_check(op, &p, DEFAULT_EPS).unwrap() < 1e-6);
    }

    #[test]
    fn model_loss_passes_for_several_seeds() {
        for seed in 0..6 {
            for r in check_model_loss(seed).unwrap() {
                assert!(r.passed(1e-4), "seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn corrupted_gradient_detected() {
        let p = inputs(&[("x", vec![5], vec![0.3, -1.2, 0.8, 2.1, -0.4])]);
        let op = |g: &mut Graph<f64>, p: &ModelParams<f64>| {
            let x = g.param("x", p.require("x")?);
            Ok(g.softmax(x))
        };
        let mut analytic = analytic_gradients(&op, &p).unwrap();
        analytic.get_mut("x").unwrap().values_mut()[2] += 0.1;
        let numeric = numeric_gradients(&op, &p, &["x".to_string()], DEFAULT_EPS).unwrap();
        assert!(max_relative_error(&analytic, &numeric) > 1e-2);
    }
}
