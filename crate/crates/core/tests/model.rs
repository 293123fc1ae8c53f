mod common;

use poly_core::graph::{build_graph, StructureTensor};
use poly_core::model::{binarize, Batch, ChordVae, Ctx, ModelConfig, ModelError};
use poly_core::pianoroll::{BASS, DRUMS, STRINGS};
use poly_core::tensor::{Checkpoint, Tape};
use poly_core::{ChordGraph, Onset, Pianoroll};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small() -> ModelConfig {
    ModelConfig::new(2, 8, 16, 2)
}

fn graphs(n: usize, seed: u64) -> Vec<ChordGraph> {
    common::synthetic_graphs(n, 2, 8, seed)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn zero_params(model: &mut ChordVae<f64>, prefix: &str) {
    let ids: Vec<_> = model.params().iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect();
    assert!(!ids.is_empty(), "no parameters under {prefix}");
    for id in ids {
        model.params_mut().get_mut(id).value.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn node_order_does_not_change_the_content_code() {
    let model = ChordVae::<f64>::new(small(), 3).unwrap();
    let gs = graphs(3, 1);
    let refs: Vec<&ChordGraph> = gs.iter().collect();
    let batch = Batch::from_graphs(&refs, model.config()).unwrap();
    let mut perm: Vec<usize> = (0..batch.n_nodes()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let shuffled = batch.permute_nodes(&perm);
    for train in [false, true] {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, model.params(), train);
        let a = model.encode_content_var(&ctx, &batch).unwrap().value();
        let b = model.encode_content_var(&ctx, &shuffled).unwrap().value();
        assert!(max_diff(&a, &b) < 1e-10, "train={train}");
        // Decoded logits follow the nodes they belong to.
        let z = tape.constant(a.clone(), &[3, 16]).unwrap();
        let (p, _) = model.decode_content_var(&ctx, z, &batch).unwrap();
        let (q, _) = model.decode_content_var(&ctx, z, &shuffled).unwrap();
        let (p, q) = (p.value(), q.value());
        let row = 8 * 131;
        for (new, &old) in perm.iter().enumerate() {
            assert!(max_diff(&p[old * row..(old + 1) * row], &q[new * row..(new + 1) * row]) < 1e-10);
        }
    }
}

#[test]
fn zeroed_convolutions_without_batch_norm_are_the_identity() {
    let config = ModelConfig { batch_norm: false, ..small() };
    let mut model = ChordVae::<f64>::new(config, 5).unwrap();
    zero_params(&mut model, "enc.gcn");
    let gs = graphs(2, 2);
    let refs: Vec<&ChordGraph> = gs.iter().collect();
    let batch = Batch::from_graphs(&refs, model.config()).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, model.params(), true);
    let h0 = model.chord_states(&ctx, &batch).unwrap();
    let h = model.gcn_stack(&ctx, h0, &batch, false).unwrap();
    assert_eq!(h.value(), h0.value());
}

#[test]
fn bars_are_encoded_independently_in_eval_mode() {
    let model = ChordVae::<f64>::new(small(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = common::synthetic_roll(&mut rng, 2);
    let mut notes: Vec<Onset> = a.onsets().iter().filter(|o| o.bar == 0).copied().collect();
    notes.extend(common::synthetic_roll(&mut rng, 2).onsets().iter().filter(|o| o.bar == 1));
    notes.sort();
    let b = Pianoroll::new(2, notes).unwrap();
    assert_ne!(a, b);
    let bars = |roll: &Pianoroll| {
        let g = build_graph(roll, 8).unwrap();
        let batch = Batch::from_graphs(&[&g], model.config()).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, model.params(), false);
        model.bar_embeddings(&ctx, &batch).unwrap().value()
    };
    let (ea, eb) = (bars(&a), bars(&b));
    assert_eq!(ea[..16], eb[..16], "bar 0 is untouched by bar 1");
    assert!(max_diff(&ea[16..], &eb[16..]) > 1e-6);
}

#[test]
fn drum_and_pitched_notes_use_separate_tables() {
    let mut model = ChordVae::<f64>::new(small(), 2).unwrap();
    let drum = model.chord_embedding(&[(36, 1), (42, 1)], DRUMS).unwrap();
    let bass = model.chord_embedding(&[(36, 1), (42, 1)], BASS).unwrap();
    assert!(max_diff(&drum, &bass) > 1e-6, "same notes on different kinds of track embed differently");
    let id = model.params().find("enc.pitch.w").or_else(|| model.params().find("enc.pitch")).unwrap();
    model.params_mut().get_mut(id).value.iter_mut().for_each(|v| *v += 1.0);
    assert_eq!(model.chord_embedding(&[(36, 1), (42, 1)], DRUMS).unwrap(), drum);
    assert_ne!(model.chord_embedding(&[(36, 1), (42, 1)], BASS).unwrap(), bass);
    assert_ne!(model.chord_embedding(&[(36, 1), (42, 1)], STRINGS).unwrap(), bass);
}

#[test]
fn zero_structure_decoder_predicts_one_half_everywhere() {
    let mut model = ChordVae::<f64>::new(small(), 6).unwrap();
    zero_params(&mut model, "sdec.");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
    let (z_s, _) = model.split(&z).unwrap();
    let probs = model.decode_structure(&z_s).unwrap();
    assert_eq!(probs.len(), 2 * 4 * 32);
    assert!(probs.iter().all(|&p| p == 0.5));
    assert_eq!(binarize(&probs, 2, 0.5).count(), 256, "ties keep the cell");
}

#[test]
fn reparameterized_noise_has_unit_variance() {
    let mut model = ChordVae::<f64>::new(ModelConfig::new(2, 8, 4, 1), 1).unwrap();
    zero_params(&mut model, "latent.logvar");
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let eps: Vec<f64> = (0..n * 4).map(|_| rng.sample(StandardNormal)).collect();
    let inputs: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, model.params(), false);
    let zs = tape.constant(inputs.clone(), &[n, 4]).unwrap();
    let zc = tape.constant(inputs.iter().map(|v| -v).collect(), &[n, 4]).unwrap();
    let (mu, _, z) = model.latent(&ctx, zs, zc, Some(&eps)).unwrap();
    let (mu, z) = (mu.value(), z.value());
    for dim in 0..4 {
        let diffs: Vec<f64> = (0..n).map(|i| z[i * 4 + dim] - mu[i * 4 + dim]).collect();
        let mean = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0).abs() < 0.05, "dim {dim}: {var}");
    }
}

#[test]
fn checkpoint_restores_identical_outputs() {
    let model = ChordVae::<f64>::new(small(), 12).unwrap();
    let bytes = model.to_checkpoint().to_bytes();
    let back = ChordVae::<f64>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let z = vec![0.3; 16];
    assert_eq!(model.decode(&z, 0.5).unwrap(), back.decode(&z, 0.5).unwrap());

    let mut tampered = model.to_checkpoint();
    tampered.meta["fingerprint"] = "0000000000000000".into();
    assert!(matches!(ChordVae::<f64>::from_checkpoint(&tampered), Err(ModelError::Fingerprint { .. })));
}

#[test]
fn precision_cast_agrees() {
    let model = ChordVae::<f64>::new(small(), 4).unwrap();
    let single = model.cast::<f32>();
    let g = &graphs(1, 5)[0];
    let a = model.encode(g, None).unwrap();
    let b = single.encode(&g.clone(), None).unwrap();
    for (x, y) in a.mu.iter().zip(&b.mu) {
        assert!((x - f64::from(*y)).abs() < 1e-3 * (1.0 + x.abs()));
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let model = ChordVae::<f64>::new(small(), 4).unwrap();
    let wrong_sigma = build_graph(&common::synthetic_roll(&mut ChaCha8Rng::seed_from_u64(1), 2), 16).unwrap();
    assert!(matches!(model.encode(&wrong_sigma, None), Err(ModelError::ConfigMismatch(_))));
    assert!(matches!(model.decode(&[0.0; 3], 0.5), Err(ModelError::LatentSize { expected: 16, found: 3 })));
    assert!(model.decode_content(&[0.0; 16], &StructureTensor::zeros(3)).is_err());
    assert!(ModelConfig::new(2, 8, 15, 2).validate().is_err());
}

#[test]
fn empty_structure_decodes_to_nothing() {
    let model = ChordVae::<f64>::new(small(), 4).unwrap();
    let c = model.decode_content(&[0.1; 16], &StructureTensor::zeros(2)).unwrap();
    assert!(c.nodes.is_empty() && c.pitch.is_empty() && c.duration.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_shapes(roll in common::roll_strategy(2, 7), b in 1usize..3) {
        let model = ChordVae::<f64>::new(small(), 0).unwrap();
        let g = build_graph(&roll, 8).unwrap();
        let items: Vec<&ChordGraph> = std::iter::repeat_n(&g, b).collect();
        let batch = Batch::from_graphs(&items, model.config()).unwrap();
        let v = g.nodes().len() * b;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, model.params(), false);
        let out = model.forward(&ctx, &batch, None).unwrap();
        prop_assert_eq!(out.structure_logits.shape(), vec![b * 2, 1, 4, 32]);
        prop_assert_eq!(out.pitch_logits.shape(), vec![v * 8, 131]);
        prop_assert_eq!(out.duration_logits.shape(), vec![v * 8, 99]);
        prop_assert_eq!(out.mu.shape(), vec![b, 16]);
        prop_assert_eq!(out.logvar.shape(), vec![b, 16]);
        prop_assert!(out.logvar.value().iter().all(|v| v.abs() <= 10.0));
        let decoded = model.decode_content(&out.z.value()[..16], &g.structure()).unwrap();
        prop_assert_eq!(decoded.nodes.as_slice(), g.nodes());
        for n in 0..decoded.nodes.len() {
            for s in 0..8 {
                let p: f64 = decoded.pitch_row(n, s).iter().sum();
                let d: f64 = decoded.duration_row(n, s).iter().sum();
                prop_assert!((p - 1.0).abs() < 1e-9 && (d - 1.0).abs() < 1e-9);
            }
        }
    }
}
