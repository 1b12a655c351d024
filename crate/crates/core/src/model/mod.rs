//! Transformer encoder-decoder with a stride-2 convolutional front end for
//! frame inputs. Token inputs bypass the front end entirely, so its
//! parameters are never registered on the graph for them.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use config::ModelConfig;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::graph::{GradientMap, Graph, NodeId};
use crate::params::ModelParams;
use crate::tasks::{Batch, BatchInputs, Modality};
use crate::tensor::{Real, Tensor};

const LN_EPS: f64 = 1e-6;
const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Normal(f64),
    Zeros,
    Ones,
}

/// Every parameter the config defines, in a fixed order.
fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.d_model;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let linear = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str, i: usize, o: usize| {
        push(format!("{p}.w"), vec![i, o], Init::Xavier { fan_in: i, fan_out: o });
        push(format!("{p}.b"), vec![o], Init::Zeros);
    };
    let ln = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.g"), vec![d], Init::Ones);
        push(format!("{p}.b"), vec![d], Init::Zeros);
    };
    let attn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        // No key bias: it shifts every score of a query equally and so
        // never changes the attention weights.
        for m in ["q", "v", "o"] {
            linear(push, &format!("{p}.{m}"), d, d);
        }
        push(format!("{p}.k.w"), vec![d, d], Init::Xavier { fan_in: d, fan_out: d });
    };
    let ffn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        linear(push, &format!("{p}.ff1"), d, c.d_ff);
        linear(push, &format!("{p}.ff2"), c.d_ff, d);
    };

    let mut cin = 1;
    for i in 0..c.conv_layers {
        let co = c.conv_channels;
        push(
            format!("compress.conv{i}.kernel"),
            vec![3, 3, cin, co],
            Init::Xavier { fan_in: 9 * cin, fan_out: 9 * co },
        );
        push(format!("compress.conv{i}.bias"), vec![co], Init::Zeros);
        cin = co;
    }
    linear(&mut push, "compress.proj", c.compressed_freq() * c.compressed_channels(), d);

    let emb_std = 1.0 / (d as f64).sqrt();
    push("enc.embed".into(), vec![c.vocab_size, d], Init::Normal(emb_std));
    for l in 0..c.n_enc {
        attn(&mut push, &format!("enc.{l}.self"));
        ln(&mut push, &format!("enc.{l}.ln1"));
        ffn(&mut push, &format!("enc.{l}"));
        ln(&mut push, &format!("enc.{l}.ln2"));
    }
    push("dec.embed".into(), vec![c.vocab_size, d], Init::Normal(emb_std));
    for l in 0..c.n_dec {
        attn(&mut push, &format!("dec.{l}.self"));
        ln(&mut push, &format!("dec.{l}.ln1"));
        attn(&mut push, &format!("dec.{l}.cross"));
        ln(&mut push, &format!("dec.{l}.ln2"));
        ffn(&mut push, &format!("dec.{l}"));
        ln(&mut push, &format!("dec.{l}.ln3"));
    }
    if !c.tie_embeddings {
        push("out.w".into(), vec![d, c.vocab_size], Init::Normal(0.5 / (d as f64).sqrt()));
    }
    push("out.b".into(), vec![c.vocab_size], Init::Zeros);
    out
}

/// Deterministic initialisation from `seed`.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    for (name, shape, init) in param_specs(config) {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let d = Uniform::new_inclusive(-a, a).expect("finite bounds");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        params.insert(name, Tensor::from_f64(shape, &values)?);
    }
    Ok(params)
}

/// Names of the compression-stack parameters.
pub fn is_compression_param(name: &str) -> bool {
    name.starts_with("compress.")
}

/// Encoder states with the valid length of each row.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[B, S, d_model]`
    pub states: NodeId,
    pub lengths: Vec<usize>,
}

/// One forward pass recorded on a graph. `dropout_rng` present means train
/// mode.
pub struct Forward<'a, T: Real> {
    pub graph: &'a mut Graph<T>,
    params: &'a ModelParams<T>,
    config: &'a ModelConfig,
    dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(
        graph: &'a mut Graph<T>,
        params: &'a ModelParams<T>,
        config: &'a ModelConfig,
        dropout_rng: Option<&'a mut ChaCha8Rng>,
    ) -> Self {
        Self { graph, params, config, dropout_rng }
    }

    fn p(&mut self, name: &str) -> Result<NodeId> {
        let t = self.params.require(name)?;
        Ok(self.graph.param(name, t))
    }

    fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add_broadcast(y, b)
    }

    fn layer_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.graph.layer_norm(x, g, b, LN_EPS)
    }

    fn dropout(&mut self, x: NodeId) -> Result<NodeId> {
        let rate = self.config.dropout;
        let Some(rng) = self.dropout_rng.as_deref_mut() else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let shape = self.graph.shape(x).to_vec();
        let n = self.graph.value(x).len();
        let mask: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let m = self.graph.constant(Tensor::new(shape, mask)?);
        self.graph.mul(x, m)
    }

    /// `LN(x + dropout(sublayer))`
    fn residual(&mut self, x: NodeId, sub: NodeId, ln: &str) -> Result<NodeId> {
        let sub = self.dropout(sub)?;
        let s = self.graph.add(x, sub)?;
        self.layer_norm(s, ln)
    }

    /// `[B, T, d] -> [B*H, T, dh]`
    fn split_heads(&mut self, x: NodeId, b: usize, t: usize) -> Result<NodeId> {
        let h = self.config.n_heads;
        let dh = self.config.head_dim();
        let r = self.graph.reshape(x, &[b, t, h, dh])?;
        let p = self.graph.permute(r, &[0, 2, 1, 3])?;
        self.graph.reshape(p, &[b * h, t, dh])
    }

    fn merge_heads(&mut self, x: NodeId, b: usize, t: usize) -> Result<NodeId> {
        let h = self.config.n_heads;
        let dh = self.config.head_dim();
        let r = self.graph.reshape(x, &[b, h, t, dh])?;
        let p = self.graph.permute(r, &[0, 2, 1, 3])?;
        self.graph.reshape(p, &[b, t, h * dh])
    }

    /// Multi-head attention of `q_in [B, Tq, d]` over `kv_in [B, Tk, d]`.
    /// Keys at or beyond `key_lengths[b]` are masked; `causal` additionally
    /// masks keys after the query position.
    fn attention(
        &mut self,
        q_in: NodeId,
        kv_in: NodeId,
        key_lengths: &[usize],
        causal: bool,
        prefix: &str,
    ) -> Result<NodeId> {
        let (b, tq) = (self.graph.shape(q_in)[0], self.graph.shape(q_in)[1]);
        let tk = self.graph.shape(kv_in)[1];
        let h = self.config.n_heads;
        let q = self.linear(q_in, &format!("{prefix}.q"))?;
        let kw = self.p(&format!("{prefix}.k.w"))?;
        let k = self.graph.matmul(kv_in, kw)?;
        let v = self.linear(kv_in, &format!("{prefix}.v"))?;
        let q = self.split_heads(q, b, tq)?;
        let k = self.split_heads(k, b, tk)?;
        let v = self.split_heads(v, b, tk)?;
        let scores = self.graph.batch_matmul(q, k, true)?;
        let scores = self.graph.scale(scores, 1.0 / (self.config.head_dim() as f64).sqrt());
        let neg = T::from_f64_lossy(MASK_VALUE);
        let mut mask = vec![T::zero(); b * h * tq * tk];
        let mut any = false;
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..tq {
                    for j in 0..tk {
                        if j >= key_lengths[bi] || (causal && j > i) {
                            mask[((bi * h + hi) * tq + i) * tk + j] = neg;
                            any = true;
                        }
                    }
                }
            }
        }
        let scores = if any {
            let m = self.graph.constant(Tensor::new(vec![b * h, tq, tk], mask)?);
            self.graph.add(scores, m)?
        } else {
            scores
        };
        let probs = self.graph.softmax(scores);
        let ctx = self.graph.batch_matmul(probs, v, false)?;
        let ctx = self.merge_heads(ctx, b, tq)?;
        self.linear(ctx, &format!("{prefix}.o"))
    }

    fn feed_forward(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let h = self.linear(x, &format!("{prefix}.ff1"))?;
        let h = self.graph.relu(h);
        self.linear(h, &format!("{prefix}.ff2"))
    }

    fn positional(&mut self, b: usize, t: usize) -> Result<NodeId> {
        let d = self.config.d_model;
        let mut pe = Vec::with_capacity(b * t * d);
        for _ in 0..b {
            for pos in 0..t {
                for i in 0..d {
                    let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                    let a = pos as f64 / rate;
                    pe.push(T::from_f64_lossy(if i % 2 == 0 { a.sin() } else { a.cos() }));
                }
            }
        }
        Ok(self.graph.constant(Tensor::new(vec![b, t, d], pe)?))
    }

    /// Zeroes time steps at or beyond each row's length in `[B, T, ...]`.
    fn time_mask(&mut self, x: NodeId, lengths: &[usize]) -> Result<NodeId> {
        let shape = self.graph.shape(x).to_vec();
        let t = shape[1];
        if lengths.iter().all(|&l| l >= t) {
            return Ok(x);
        }
        let inner: usize = shape[2..].iter().product();
        let mut m = vec![T::zero(); shape.iter().product()];
        for (bi, &len) in lengths.iter().enumerate() {
            let start = bi * t * inner;
            m[start..start + len.min(t) * inner].iter_mut().for_each(|v| *v = T::one());
        }
        let mn = self.graph.constant(Tensor::new(shape, m)?);
        self.graph.mul(x, mn)
    }

    /// Frames `[B, T, F]` → `[B, T', d_model]` through the conv stack and a
    /// linear projection of flattened frequency × channels.
    pub fn compress(&mut self, data: &[f32], b: usize, t: usize, f: usize, lengths: &[usize]) -> Result<(NodeId, Vec<usize>)> {
        if t == 0 || lengths.contains(&0) {
            return Err(Error::Empty("frame sequence"));
        }
        if f != self.config.frame_dim {
            return Err(Error::Shape(format!(
                "frames have width {f}, model expects {}",
                self.config.frame_dim
            )));
        }
        let vals: Vec<T> = data.iter().map(|&v| T::from_f64_lossy(f64::from(v))).collect();
        let mut x = self.graph.constant(Tensor::new(vec![b, t, f, 1], vals)?);
        let mut lens = lengths.to_vec();
        for i in 0..self.config.conv_layers {
            let k = self.p(&format!("compress.conv{i}.kernel"))?;
            let bias = self.p(&format!("compress.conv{i}.bias"))?;
            x = self.graph.conv2d_s2(x, k)?;
            x = self.graph.add_broadcast(x, bias)?;
            if self.config.conv_relu {
                x = self.graph.relu(x);
            }
            lens.iter_mut().for_each(|l| *l = l.div_ceil(2));
            x = self.time_mask(x, &lens)?;
        }
        let s = self.graph.shape(x).to_vec();
        let flat = self.graph.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let y = self.linear(flat, "compress.proj")?;
        Ok((y, lens))
    }

    pub fn encode_source(&mut self, batch: &Batch, modality: Modality) -> Result<EncoderOutput> {
        if batch.modality() != modality {
            return Err(Error::Modality(format!(
                "batch carries {:?} inputs but {modality:?} was requested",
                batch.modality()
            )));
        }
        let b = batch.size();
        let d = self.config.d_model;
        let (x, lengths) = match &batch.inputs {
            BatchInputs::Tokens { ids } => {
                let t = ids[0].len();
                let flat: Vec<usize> = ids.iter().flatten().copied().collect();
                let table = self.p("enc.embed")?;
                let e = self.graph.gather(table, &flat)?;
                let e = self.graph.scale(e, (d as f64).sqrt());
                let e = self.graph.reshape(e, &[b, t, d])?;
                (e, batch.input_lengths.clone())
            }
            BatchInputs::Frames { data, max_frames, dim } => {
                self.compress(data, b, *max_frames, *dim, &batch.input_lengths)?
            }
        };
        let t = self.graph.shape(x)[1];
        let pe = self.positional(b, t)?;
        let mut h = self.graph.add(x, pe)?;
        h = self.dropout(h)?;
        for l in 0..self.config.n_enc {
            let a = self.attention(h, h, &lengths, false, &format!("enc.{l}.self"))?;
            h = self.residual(h, a, &format!("enc.{l}.ln1"))?;
            let f = self.feed_forward(h, &format!("enc.{l}"))?;
            h = self.residual(h, f, &format!("enc.{l}.ln2"))?;
        }
        Ok(EncoderOutput { states: h, lengths })
    }

    /// Decoder over `inputs [B, T]` (BOS-prefixed); returns logits `[B*T, V]`.
    pub fn decode(&mut self, enc: &EncoderOutput, inputs: &[Vec<usize>]) -> Result<NodeId> {
        let b = inputs.len();
        let t = inputs.first().map_or(0, Vec::len);
        if t == 0 {
            return Err(Error::Empty("decoder input"));
        }
        if t > self.config.max_len {
            return Err(Error::Contract(format!(
                "target length {t} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let d = self.config.d_model;
        let flat: Vec<usize> = inputs.iter().flatten().copied().collect();
        let table = self.p("dec.embed")?;
        let e = self.graph.gather(table, &flat)?;
        let e = self.graph.scale(e, (d as f64).sqrt());
        let e = self.graph.reshape(e, &[b, t, d])?;
        let pe = self.positional(b, t)?;
        let mut h = self.graph.add(e, pe)?;
        h = self.dropout(h)?;
        let self_lengths = vec![t; b];
        for l in 0..self.config.n_dec {
            let a = self.attention(h, h, &self_lengths, true, &format!("dec.{l}.self"))?;
            h = self.residual(h, a, &format!("dec.{l}.ln1"))?;
            let c = self.attention(h, enc.states, &enc.lengths, false, &format!("dec.{l}.cross"))?;
            h = self.residual(h, c, &format!("dec.{l}.ln2"))?;
            let f = self.feed_forward(h, &format!("dec.{l}"))?;
            h = self.residual(h, f, &format!("dec.{l}.ln3"))?;
        }
        let flat_h = self.graph.reshape(h, &[b * t, d])?;
        let w = if self.config.tie_embeddings {
            let table = self.p("dec.embed")?;
            self.graph.permute(table, &[1, 0])?
        } else {
            self.p("out.w")?
        };
        let ob = self.p("out.b")?;
        let logits = self.graph.matmul(flat_h, w)?;
        self.graph.add_broadcast(logits, ob)
    }

    /// Teacher-forced logits `[B * target_len, V]`.
    pub fn forward_logits(&mut self, batch: &Batch, modality: Modality) -> Result<NodeId> {
        let enc = self.encode_source(batch, modality)?;
        self.decode(&enc, &batch.decoder_inputs())
    }

    /// Mean token NLL over unmasked target positions.
    pub fn loss(&mut self, batch: &Batch, modality: Modality) -> Result<NodeId> {
        let logits = self.forward_logits(batch, modality)?;
        let targets: Vec<usize> = batch.targets.iter().flatten().copied().collect();
        let mask: Vec<bool> = batch.mask.iter().flatten().copied().collect();
        self.graph.cross_entropy(logits, &targets, &mask)
    }
}

/// Loss value of a batch; eval mode unless `dropout_rng` is given.
pub fn model_loss<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    batch: &Batch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = Forward::new(&mut g, params, config, dropout_rng).loss(batch, batch.modality())?;
    let v = g.value(loss).values()[0].as_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite("model_loss".into()));
    }
    Ok(v)
}

/// Loss and gradients for every parameter the batch's modality touches.
/// Compression parameters are absent for token batches.
pub fn loss_and_grads<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    batch: &Batch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, GradientMap<T>)> {
    let mut g = Graph::new();
    let loss = Forward::new(&mut g, params, config, dropout_rng).loss(batch, batch.modality())?;
    let v = g.value(loss).values()[0].as_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite("model_loss".into()));
    }
    let grads = g.backward(loss)?;
    Ok((v, grads))
}

#[cfg(test)]
mod tests;
