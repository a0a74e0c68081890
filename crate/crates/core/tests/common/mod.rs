//! Shared fixtures and a plain-loop reference encoder.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpskg::model::Head;
use tpskg::{KeyMask, Mode, Model, ModelConfig, ParamStore, Tape, Tensor};

pub fn micro(seed: u64) -> ModelConfig {
    ModelConfig {
        image_h: 4,
        image_w: 4,
        channels: 1,
        patch: 2,
        embed_dim: 8,
        layers: 2,
        heads: 2,
        mlp_ratio: 2.0,
        classes: 3,
        seed,
    }
}

pub fn small(seed: u64, layers: usize) -> ModelConfig {
    ModelConfig {
        image_h: 8,
        image_w: 8,
        channels: 2,
        patch: 4,
        embed_dim: 8,
        layers,
        heads: 2,
        mlp_ratio: 2.0,
        classes: 4,
        seed,
    }
}

/// Model whose parameters are shaken away from their (tiny) init so the
/// forward is far from linear.
pub fn shaken(cfg: &ModelConfig, mode: Mode, seed: u64, amount: f64) -> Model<f64> {
    let mut model = Model::<f64>::new(cfg, mode).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.store.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-amount..amount));
    }
    model
}

pub fn random_image(cfg: &ModelConfig, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(&cfg.image_shape(), |_| rng.random_range(-1.0..1.0))
}

fn p<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    let id = store
        .find(name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    store.get(id).data()
}

fn linear(x: &[Vec<f64>], w: &[f64], b: &[f64], out: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..out)
                .map(|o| b[o] + row.iter().enumerate().map(|(i, v)| v * w[i * out + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layernorm(x: &[Vec<f64>], g: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-6).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Reference forward: returns `y` and the attention tensors
/// `[layer][head][query][key]`.
pub fn reference_forward(
    cfg: &ModelConfig,
    store: &ParamStore<f64>,
    image: &[f64],
    keep: &[bool],
) -> (Vec<f64>, Vec<Vec<Vec<Vec<f64>>>>) {
    let (ps, c, d) = (cfg.patch, cfg.channels, cfg.embed_dim);
    let (gh, gw) = (cfg.image_h / ps, cfg.image_w / ps);
    let t = gh * gw + 1;
    let mut patches = Vec::new();
    for py in 0..gh {
        for px in 0..gw {
            let mut row = Vec::new();
            for y in 0..ps {
                for x in 0..ps {
                    for ch in 0..c {
                        row.push(image[((py * ps + y) * cfg.image_w + px * ps + x) * c + ch]);
                    }
                }
            }
            patches.push(row);
        }
    }
    let proj = p(store, "encoder.patch_projection");
    let zero_bias = vec![0.0; d];
    let content = linear(&patches, proj, &zero_bias, d);
    let cls = p(store, "encoder.class_token");
    let pos = p(store, "encoder.positional");
    let mut z: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            (0..d)
                .map(|k| {
                    let base = if i == 0 {
                        cls[k]
                    } else if keep[i] {
                        content[i - 1][k]
                    } else {
                        0.0
                    };
                    base + pos[i * d + k]
                })
                .collect()
        })
        .collect();

    let heads = cfg.heads;
    let hd = d / heads;
    let hidden = cfg.mlp_hidden();
    let mut attention = Vec::new();
    for l in 0..cfg.layers {
        let name = |s: &str| format!("encoder.layer{l}.{s}");
        let h = layernorm(&z, p(store, &name("attn_norm.gain")), p(store, &name("attn_norm.bias")));
        let lin = |x: &[Vec<f64>], s: &str, out: usize| {
            linear(x, p(store, &name(&format!("{s}.weight"))), p(store, &name(&format!("{s}.bias"))), out)
        };
        let (q, k, v) = (lin(&h, "query", d), lin(&h, "key", d), lin(&h, "value", d));
        let mut mixed = vec![vec![0.0; d]; t];
        let mut layer_attn = Vec::new();
        for head in 0..heads {
            let off = head * hd;
            let mut rows = Vec::new();
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| {
                        let dot: f64 = (0..hd).map(|e| q[i][off + e] * k[j][off + e]).sum();
                        dot / (hd as f64).sqrt() + if keep[j] { 0.0 } else { -1e9 }
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
                let s: f64 = ex.iter().sum();
                let a: Vec<f64> = ex.iter().map(|x| x / s).collect();
                for e in 0..hd {
                    mixed[i][off + e] = (0..t).map(|j| a[j] * v[j][off + e]).sum();
                }
                rows.push(a);
            }
            layer_attn.push(rows);
        }
        attention.push(layer_attn);
        let o = lin(&mixed, "output", d);
        for i in 0..t {
            for e in 0..d {
                z[i][e] += o[i][e];
            }
        }
        let h = layernorm(&z, p(store, &name("mlp_norm.gain")), p(store, &name("mlp_norm.bias")));
        let h: Vec<Vec<f64>> = lin(&h, "mlp_in", hidden)
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let h = lin(&h, "mlp_out", d);
        for i in 0..t {
            for e in 0..d {
                z[i][e] += h[i][e];
            }
        }
    }
    let y = layernorm(
        &z[..1],
        p(store, "encoder.final_norm.gain"),
        p(store, "encoder.final_norm.bias"),
    );
    (y[0].clone(), attention)
}

fn loss_with_mask(model: &Model<f64>, image: &Tensor<f64>, mask: &KeyMask, label: usize) -> f64 {
    let mut tape = Tape::inference(&model.store);
    let out = model.encoder.encode(&mut tape, image, mask).unwrap();
    let loss = match &model.head {
        Head::Knowledge(k) => {
            let v = k.forward(&mut tape, out.y).unwrap();
            k.loss(&mut tape, &v, label, 2.0).unwrap().total
        }
        Head::Linear(l) => {
            let logits = l.forward(&mut tape, out.y).unwrap();
            tape.cross_entropy(logits, label).unwrap()
        }
    };
    tape.value(loss)[0]
}

/// Worst relative error between the analytic gradient of one training
/// step and central differences (step `1e-5`), over every parameter of a
/// shaken micro model. The suppression mask is held at the one the step
/// chose. Also returns the names of the parameter groups checked.
pub fn worst_gradient_error(mode: Mode) -> (f64, Vec<String>) {
    const H: f64 = 1e-5;
    let cfg = micro(11);
    let mut model = shaken(&cfg, mode, 3, 0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let image = random_image(&cfg, &mut rng);
    let label = 1;
    let out = model.train_step(&image, label, 2.0, 1).unwrap();
    let mask = out
        .mask
        .as_ref()
        .map_or_else(|| KeyMask::all(cfg.tokens()), |m| m.key_mask());

    let mut worst = 0.0f64;
    let mut groups: Vec<String> = Vec::new();
    for id in model.store.ids().collect::<Vec<_>>() {
        let group = model.store.name(id).split('.').next().unwrap().to_string();
        if !groups.contains(&group) {
            groups.push(group);
        }
        let analytic = out.grads.param(id).to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = model.store.get(id).data()[j];
            model.store.get_mut(id).data_mut()[j] = orig + H;
            let plus = loss_with_mask(&model, &image, &mask, label);
            model.store.get_mut(id).data_mut()[j] = orig - H;
            let minus = loss_with_mask(&model, &image, &mask, label);
            model.store.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    (worst, groups)
}
