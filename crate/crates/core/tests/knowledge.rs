//! Knowledge head algebra against direct formulas.

mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpskg::knowledge::DEFAULT_MU;
use tpskg::model::Head;
use tpskg::{KnowledgeHead, Mode, ParamStore, Sgd, Tape, Tensor};

struct Fixture {
    store: ParamStore<f64>,
    head: KnowledgeHead,
    y: Vec<f64>,
}

fn fixture(seed: u64, g: usize, d: usize, spread: f64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = KnowledgeHead::new(&mut store, d, g, &mut rng);
    if spread > 0.0 {
        for t in store.tensors_mut() {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-spread..spread));
        }
    }
    let y = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    Fixture { store, head, y }
}

impl Fixture {
    fn k(&self) -> &[f64] {
        self.store.get(self.head.embeddings).data()
    }

    fn dims(&self) -> (usize, usize) {
        let s = self.store.get(self.head.embeddings).shape();
        (s[0], s[1])
    }

    fn set_k(&mut self, values: &[f64]) {
        self.store
            .get_mut(self.head.embeddings)
            .data_mut()
            .copy_from_slice(values);
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn similarity_oracle(y: &[f64], k: &[f64], g: usize) -> Vec<f64> {
    let d = y.len();
    (0..g)
        .map(|c| (0..d).map(|i| y[i] * k[c * d + i]).sum())
        .collect()
}

fn run(f: &Fixture, y: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut tape = Tape::inference(&f.store);
    let yv = tape.constant(Tensor::new(vec![1, y.len()], y.to_vec()).unwrap());
    let v = f.head.forward(&mut tape, yv).unwrap();
    (
        tape.value(v.similarity).to_vec(),
        tape.value(v.response).to_vec(),
        tape.value(v.delta).to_vec(),
        tape.value(v.logits).to_vec(),
    )
}

fn fc_ln_oracle(f: &Fixture, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    let gain = f.store.get(f.head.fusion_norm.gain).data();
    let bias = f.store.get(f.head.fusion_norm.bias).data();
    let h: Vec<f64> = (0..d)
        .map(|i| (x[i] - mean) / (var + 1e-6).sqrt() * gain[i] + bias[i])
        .collect();
    let w = f.store.get(f.head.classifier.weight).data();
    let b = f.store.get(f.head.classifier.bias).data();
    let out = b.len();
    (0..out)
        .map(|o| b[o] + (0..d).map(|i| h[i] * w[i * out + o]).sum::<f64>())
        .collect()
}

#[test]
fn forward_matches_direct_formulas() {
    let f = fixture(1, 4, 8, 1.0);
    let (g, d) = f.dims();
    let (sim, r, delta, logits) = run(&f, &f.y);
    let sim_ref = similarity_oracle(&f.y, f.k(), g);
    let r_ref = softmax(&sim_ref);
    for c in 0..g {
        assert!((sim[c] - sim_ref[c]).abs() < 1e-9);
        assert!((r[c] - r_ref[c]).abs() < 1e-9);
    }
    let delta_ref: Vec<f64> = (0..d)
        .map(|i| (0..g).map(|c| r_ref[c] * f.k()[c * d + i]).sum())
        .collect();
    for i in 0..d {
        assert!((delta[i] - delta_ref[i]).abs() < 1e-12);
    }
    let fused: Vec<f64> = (0..d).map(|i| f.y[i] + delta_ref[i]).collect();
    let u_ref = fc_ln_oracle(&f, &fused);
    for c in 0..g {
        assert!((logits[c] - u_ref[c]).abs() < 1e-9);
    }
}

#[test]
fn orthonormal_embeddings_saturate_response() {
    let mut f = fixture(2, 3, 4, 0.0);
    let k: Vec<f64> = (0..12).map(|i| if i / 4 == i % 4 { 1.0 } else { 0.0 }).collect();
    f.set_k(&k);
    let y: Vec<f64> = k[4..8].iter().map(|v| v * 60.0).collect();
    let (_, r, delta, _) = run(&f, &y);
    assert!((r[1] - 1.0).abs() < 1e-12);
    for i in 0..4 {
        assert!((delta[i] - k[4 + i]).abs() < 1e-12);
    }
}

#[test]
fn identical_embeddings_give_uniform_response_and_mean() {
    let mut f = fixture(3, 4, 5, 0.0);
    let row = [0.3, -1.0, 2.0, 0.5, -0.25];
    f.set_k(&row.repeat(4));
    let (_, r, delta, _) = run(&f, &f.y.clone());
    assert!(r.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    for i in 0..5 {
        assert!((delta[i] - row[i]).abs() < 1e-12);
    }
}

#[test]
fn pure_paths_of_fusion() {
    let f = fixture(4, 3, 6, 1.0);
    let mut tape = Tape::inference(&f.store);
    let y = tape.constant(Tensor::new(vec![1, 6], f.y.clone()).unwrap());
    let zero = tape.constant(Tensor::zeros(&[1, 6]));
    let u = f.head.fuse(&mut tape, y, zero).unwrap();
    let want = fc_ln_oracle(&f, &f.y);
    assert!(tape.value(u).iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    let u = f.head.fuse(&mut tape, zero, y).unwrap();
    assert!(tape.value(u).iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn loss_terms_combine_with_weight() {
    let f = fixture(5, 4, 8, 1.0);
    assert_eq!(DEFAULT_MU, 2.0);
    for label in 0..4 {
        for mu in [0.0, 1.0, 2.0] {
            let mut tape = Tape::inference(&f.store);
            let y = tape.constant(Tensor::new(vec![1, 8], f.y.clone()).unwrap());
            let v = f.head.forward(&mut tape, y).unwrap();
            let l = f.head.loss(&mut tape, &v, label, mu).unwrap();
            let (kl, rep, total) = (
                tape.value(l.knowledge)[0],
                tape.value(l.representation)[0],
                tape.value(l.total)[0],
            );
            assert!((total - (kl + mu * rep)).abs() < 1e-12);
            if mu == 0.0 {
                assert_eq!(total, kl);
            }
            let r = softmax(tape.value(v.similarity));
            assert!((kl + r[label].ln()).abs() < 1e-9);
            let u = softmax(tape.value(v.logits));
            assert!((rep + u[label].ln()).abs() < 1e-9);
        }
    }
    let mut tape = Tape::inference(&f.store);
    let y = tape.constant(Tensor::new(vec![1, 8], f.y.clone()).unwrap());
    let v = f.head.forward(&mut tape, y).unwrap();
    assert!(f.head.loss(&mut tape, &v, 0, -1.0).is_err());
}

#[test]
fn uniform_similarities_cost_log_classes() {
    let mut f = fixture(6, 5, 4, 0.0);
    f.set_k(&[0.0; 20]);
    let mut tape = Tape::inference(&f.store);
    let y = tape.constant(Tensor::new(vec![1, 4], f.y.clone()).unwrap());
    let v = f.head.forward(&mut tape, y).unwrap();
    let l = f.head.loss(&mut tape, &v, 3, 2.0).unwrap();
    assert!((tape.value(l.knowledge)[0] - 5f64.ln()).abs() < 1e-12);
}

/// Gradient of one loss term with respect to the embeddings.
fn k_grad(f: &Fixture, label: usize, which: usize) -> Vec<f64> {
    let mut tape = Tape::new(&f.store);
    let y = tape.constant(Tensor::new(vec![1, f.y.len()], f.y.clone()).unwrap());
    let v = f.head.forward(&mut tape, y).unwrap();
    let l = f.head.loss(&mut tape, &v, label, 2.0).unwrap();
    let target = [l.knowledge, l.representation, l.total][which];
    tape.backward(target).unwrap().param(f.head.embeddings).to_vec()
}

#[test]
fn both_losses_reach_the_embeddings() {
    let f = fixture(7, 4, 8, 1.0);
    let kl = k_grad(&f, 2, 0);
    let rep = k_grad(&f, 2, 1);
    let total = k_grad(&f, 2, 2);
    assert!(kl.iter().any(|v| v.abs() > 1e-6));
    assert!(rep.iter().any(|v| v.abs() > 1e-6));
    assert_ne!(total, kl);
    assert_ne!(total, rep);
    for i in 0..total.len() {
        assert!((total[i] - (kl[i] + 2.0 * rep[i])).abs() < 1e-12);
    }
}

#[test]
fn one_step_moves_encoder_and_embeddings() {
    let cfg = common::micro(2);
    let mut model = tpskg::Model::<f64>::new(&cfg, Mode::NoPs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let image = common::random_image(&cfg, &mut rng);
    let out = model.train_step(&image, 1, 2.0, 1).unwrap();
    let before = model.store.clone();
    model.store.zero_grads();
    model.store.accumulate(&out.grads);
    let mut sgd = Sgd::new(&model.store, 0.9);
    sgd.step(&mut model.store, 0.1).unwrap();
    let Head::Knowledge(k) = &model.head else { panic!("knowledge head expected") };
    for id in [model.encoder.patch_projection, k.embeddings] {
        assert_ne!(model.store.get(id).data(), before.get(id).data());
    }
}

proptest! {
    #[test]
    fn response_and_delta_invariants(seed in any::<u64>(), g in 2usize..7, d in 2usize..9, spread in 0.1f64..4.0) {
        let f = fixture(seed, g, d, spread);
        let (sim, r, delta, _) = run(&f, &f.y);
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(r.iter().all(|&v| v >= 0.0));
        for i in 0..d {
            let col = (0..g).map(|c| f.k()[c * d + i]);
            let lo = col.clone().fold(f64::INFINITY, f64::min);
            let hi = col.fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(delta[i] >= lo - 1e-12 && delta[i] <= hi + 1e-12);
        }

        let doubled: Vec<f64> = f.y.iter().map(|v| v * 2.0).collect();
        let (sim2, r2, _, _) = run(&f, &doubled);
        for c in 0..g {
            prop_assert!((sim2[c] - 2.0 * sim[c]).abs() < 1e-12 * (1.0 + sim[c].abs()));
        }
        prop_assert_eq!(tpskg::knowledge::argmax(&r), tpskg::knowledge::argmax(&r2));
    }
}
