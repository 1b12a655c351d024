use super::*;
use crate::gradcheck::{finite_diff_check, DEFAULT_EPS};
use crate::tasks::{gen_asr_task, gen_mt_task, Example, Source, SyntheticSpec};
use crate::vocab::Vocabulary;

fn tiny() -> ModelConfig {
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
        vocab_size: 11,
        max_len: 32,
        ..Default::default()
    }
}

fn spec_for(c: &ModelConfig) -> SyntheticSpec {
    SyntheticSpec {
        alphabet_size: c.vocab_size - 5,
        frame_dim: c.frame_dim,
        min_len: 3,
        max_len: 6,
        ..Default::default()
    }
}

fn batches(c: &ModelConfig) -> (Batch, Batch) {
    let spec = spec_for(c);
    let v = Vocabulary::build_universal(&spec.vocab_corpora());
    assert_eq!(v.len(), c.vocab_size);
    let asr = gen_asr_task(&spec, &v, 3, 1).unwrap();
    let mt = gen_mt_task(&spec, &v, 3, 2).unwrap();
    let fb = Batch::from_examples(&asr.examples.iter().collect::<Vec<_>>()).unwrap();
    let tb = Batch::from_examples(&mt.examples.iter().collect::<Vec<_>>()).unwrap();
    (fb, tb)
}

fn count_formula(c: &ModelConfig) -> usize {
    let (d, v, f) = (c.d_model, c.vocab_size, c.d_ff);
    let mut n = 0;
    let mut cin = 1;
    for _ in 0..c.conv_layers {
        n += 9 * cin * c.conv_channels + c.conv_channels;
        cin = c.conv_channels;
    }
    let mut freq = c.frame_dim;
    for _ in 0..c.conv_layers {
        freq = freq.div_ceil(2);
    }
    n += freq * cin * d + d;
    let attn = 4 * d * d + 3 * d;
    let ffn = d * f + f + f * d + d;
    n += 2 * v * d;
    n += c.n_enc * (attn + 2 * 2 * d + ffn);
    n += c.n_dec * (2 * attn + 3 * 2 * d + ffn);
    n += if c.tie_embeddings { v } else { d * v + v };
    n
}

#[test]
fn param_count_matches_formula() {
    for c in [ModelConfig::default(), tiny(), ModelConfig { conv_layers: 0, tie_embeddings: true, ..tiny() }] {
        let p = init_params::<f32>(&c, 0).unwrap();
        assert_eq!(p.num_scalars(), count_formula(&c), "{c:?}");
    }
}

#[test]
fn init_determinism() {
    let c = tiny();
    let a = init_params::<f64>(&c, 5).unwrap();
    let b = init_params::<f64>(&c, 5).unwrap();
    let other = init_params::<f64>(&c, 6).unwrap();
    assert!(a.bit_eq(&b));
    assert!(!a.bit_eq(&other));
    assert!(a.get("enc.0.ln1.g").unwrap().values().iter().all(|&v| v == 1.0));
    assert!(a.get("enc.0.ln1.b").unwrap().values().iter().all(|&v| v == 0.0));
}

#[test]
fn compressed_lengths() {
    let c = ModelConfig { frame_dim: 80, ..Default::default() };
    assert_eq!(c.compressed_len(100), 25);
    assert_eq!(c.compressed_len(1), 1);
    assert_eq!(c.compressed_len(7), 2);
    let p = init_params::<f32>(&c, 0).unwrap();
    for (t, want) in [(100usize, 25usize), (1, 1), (7, 2)] {
        let mut g = Graph::new();
        let data = vec![0.5f32; t * 80];
        let (y, lens) = Forward::new(&mut g, &p, &c, None).compress(&data, 1, t, 80, &[t]).unwrap();
        assert_eq!(g.shape(y), &[1, want, c.d_model]);
        assert_eq!(lens, vec![want]);
    }
    let mut g = Graph::new();
    assert!(Forward::new(&mut g, &p, &c, None).compress(&[], 1, 0, 80, &[0]).is_err());
}

#[test]
fn token_batch_never_touches_compression() {
    let c = tiny();
    let p = init_params::<f64>(&c, 1).unwrap();
    let (fb, tb) = batches(&c);
    let (_, grads) = loss_and_grads(&p, &c, &tb, None).unwrap();
    assert!(grads.keys().all(|k| !is_compression_param(k)));
    let (_, grads) = loss_and_grads(&p, &c, &fb, None).unwrap();
    assert!(grads.keys().any(|k| is_compression_param(k)));
}

#[test]
fn encoder_width_both_modalities() {
    let c = tiny();
    let p = init_params::<f64>(&c, 1).unwrap();
    let (fb, tb) = batches(&c);
    for b in [&fb, &tb] {
        let mut g = Graph::new();
        let enc = Forward::new(&mut g, &p, &c, None).encode_source(b, b.modality()).unwrap();
        assert_eq!(*g.shape(enc.states).last().unwrap(), c.d_model);
    }
    let mut g = Graph::new();
    assert!(matches!(
        Forward::new(&mut g, &p, &c, None).encode_source(&tb, Modality::Frames),
        Err(Error::Modality(_))
    ));
}

#[test]
fn padding_tail_invariance() {
    let c = tiny();
    let p = init_params::<f64>(&c, 3).unwrap();
    let (fb, tb) = batches(&c);
    for batch in [fb, tb] {
        let mut g = Graph::new();
        let base = Forward::new(&mut g, &p, &c, None).encode_source(&batch, batch.modality()).unwrap();
        let base_v = g.value(base.states).clone();
        // scramble everything past each row's length
        let mut scrambled = batch.clone();
        match &mut scrambled.inputs {
            BatchInputs::Tokens { ids } => {
                for (row, &len) in ids.iter_mut().zip(&batch.input_lengths) {
                    for (j, id) in row.iter_mut().enumerate().skip(len) {
                        *id = 4 + j % 5;
                    }
                }
            }
            BatchInputs::Frames { .. } => {
                // append extra padded rows: pad the whole batch to a longer extent
                let BatchInputs::Frames { data, max_frames, dim } = &batch.inputs else { unreachable!() };
                let extra = 5;
                let mut nd = vec![0f32; batch.size() * (max_frames + extra) * dim];
                for b in 0..batch.size() {
                    let src = &data[b * max_frames * dim..(b + 1) * max_frames * dim];
                    nd[b * (max_frames + extra) * dim..][..src.len()].copy_from_slice(src);
                }
                scrambled.inputs = BatchInputs::Frames { data: nd, max_frames: max_frames + extra, dim: *dim };
            }
        }
        let mut g2 = Graph::new();
        let other = Forward::new(&mut g2, &p, &c, None).encode_source(&scrambled, batch.modality()).unwrap();
        let ov = g2.value(other.states);
        let (t1, t2, d) = (base_v.shape()[1], ov.shape()[1], c.d_model);
        for (b, &len) in base.lengths.iter().enumerate() {
            for t in 0..len {
                for k in 0..d {
                    let x = base_v.values()[(b * t1 + t) * d + k];
                    let y = ov.values()[(b * t2 + t) * d + k];
                    assert!((x - y).abs() < 1e-6, "row {b} t {t}: {x} vs {y}");
                }
            }
        }
    }
}

#[test]
fn logits_shape_and_causality() {
    let c = tiny();
    let p = init_params::<f64>(&c, 4).unwrap();
    let (_, tb) = batches(&c);
    let mut g = Graph::new();
    let logits = Forward::new(&mut g, &p, &c, None).forward_logits(&tb, Modality::Tokens).unwrap();
    let tl = tb.target_len();
    assert_eq!(g.shape(logits), &[tb.size() * tl, c.vocab_size]);
    let base = g.value(logits).clone();

    let j = 2;
    let mut perturbed = tb.clone();
    perturbed.targets[0][j - 1] = if perturbed.targets[0][j - 1] == 5 { 6 } else { 5 };
    let mut g2 = Graph::new();
    let l2 = Forward::new(&mut g2, &p, &c, None).forward_logits(&perturbed, Modality::Tokens).unwrap();
    let v = c.vocab_size;
    // decoder input j holds target j-1; positions < j must not move
    for pos in 0..j {
        for k in 0..v {
            let a = base.values()[pos * v + k];
            let b = g2.value(l2).values()[pos * v + k];
            assert!((a - b).abs() < 1e-6);
        }
    }
    let moved = (0..v).any(|k| base.values()[j * v + k] != g2.value(l2).values()[j * v + k]);
    assert!(moved);
}

#[test]
fn target_longer_than_max_len_rejected() {
    let c = ModelConfig { max_len: 3, ..tiny() };
    let p = init_params::<f64>(&c, 4).unwrap();
    let (_, tb) = batches(&c);
    assert!(model_loss(&p, &c, &tb, None).is_err());
}

#[test]
fn untrained_loss_near_uniform() {
    let c = ModelConfig { vocab_size: 20, ..Default::default() };
    let spec = SyntheticSpec { alphabet_size: 15, ..Default::default() };
    let v = Vocabulary::build_universal(&spec.vocab_corpora());
    assert_eq!(v.len(), 20);
    let mt = gen_mt_task(&spec, &v, 16, 0).unwrap();
    let b = Batch::from_examples(&mt.examples.iter().collect::<Vec<_>>()).unwrap();
    for seed in 0..3 {
        let p = init_params::<f32>(&c, seed).unwrap();
        let l = model_loss(&p, &c, &b, None).unwrap();
        assert!((l - 20f64.ln()).abs() < 0.3, "seed {seed}: {l}");
    }
}

#[test]
fn duplicated_batch_same_loss_and_eval_deterministic() {
    let c = tiny();
    let p = init_params::<f64>(&c, 2).unwrap();
    let (fb, _) = batches(&c);
    let ex = Example {
        source: match &fb.inputs {
            BatchInputs::Frames { data, dim, .. } => Source::Frames(
                crate::tasks::FrameSeq::new(fb.input_lengths[0], *dim, data[..fb.input_lengths[0] * dim].to_vec())
                    .unwrap(),
            ),
            _ => unreachable!(),
        },
        target: fb.targets[0][..fb.mask[0].iter().filter(|&&m| m).count() - 1].to_vec(),
    };
    let single = Batch::from_examples(&[&ex]).unwrap();
    let double = Batch::from_examples(&[&ex, &ex]).unwrap();
    let a = model_loss(&p, &c, &single, None).unwrap();
    let b = model_loss(&p, &c, &double, None).unwrap();
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    assert_eq!(model_loss(&p, &c, &fb, None).unwrap().to_bits(), model_loss(&p, &c, &fb, None).unwrap().to_bits());
}

#[test]
fn dropout_only_in_train_mode() {
    let c = ModelConfig { dropout: 0.3, ..tiny() };
    let p = init_params::<f64>(&c, 2).unwrap();
    let (fb, _) = batches(&c);
    let eval = model_loss(&p, &c, &fb, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let train = model_loss(&p, &c, &fb, Some(&mut rng)).unwrap();
    assert_ne!(eval, train);
}

#[test]
fn end_to_end_gradcheck() {
    let c = ModelConfig { n_enc: 2, n_dec: 2, ..tiny() };
    let p = init_params::<f64>(&c, 7).unwrap();
    let (fb, tb) = batches(&c);
    for batch in [fb, tb] {
        let err = finite_diff_check(
            |g, p| Forward::new(g, p, &c, None).loss(&batch, batch.modality()),
            &p,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-4, "{:?}: {err}", batch.modality());
    }
}

#[test]
fn checkpoint_roundtrip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny();
    let p = init_params::<f32>(&c, 9).unwrap();
    save_checkpoint(&p, &c, 9, 42, dir.path()).unwrap();
    let (q, m) = load_checkpoint(dir.path(), Some(&c)).unwrap();
    assert!(p.bit_eq(&q));
    assert_eq!((m.seed, m.step), (9, 42));

    let wider = ModelConfig { d_ff: 16, ..c.clone() };
    let err = load_checkpoint(dir.path(), Some(&wider)).unwrap_err().to_string();
    assert!(err.contains("ff1.w"), "{err}");
    let same_shape = ModelConfig { dropout: 0.1, ..c.clone() };
    assert!(matches!(load_checkpoint(dir.path(), Some(&same_shape)), Err(Error::Checkpoint(_))));

    let bin = dir.path().join("params.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(dir.path(), None), Err(Error::Checkpoint(_))));
}

