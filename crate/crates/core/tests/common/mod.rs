//! Test-only oracles shared by the integration suites. Nothing here calls
//! into the optimized kernels it is used to check.
#![allow(dead_code)]

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use v2l_core::codebook::EmbeddingTable;
use v2l_core::llm::OracleBackend;
use v2l_core::protocol::Lexicon;
use v2l_core::numerics::{ConvParams, Graph, NodeId, Tensor};
use v2l_core::tokenizer::{
    synthetic_images, GlobalFeatures, ModelConfig, TokenMap, TokenizerModel, ToyExtractor, TrainConfig, Trainer,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Textbook convolution: for each output element, bias then the sum over
/// `(c, ky, kx)` of in-bounds products.
pub fn conv2d_loops(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [o, _, kh, kw] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oi]);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oi * c + ci) * kh + ky) * kw + kx];
                                acc += wv * xv;
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// Transposed convolution written as a gather: output `(oy, ox)` collects
/// input `(iy, ix)` wherever `iy*stride + ky - pad == oy`.
pub fn conv_transpose2d_loops(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [_, o, kh, kw] = w.shape().try_into().unwrap();
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oi]);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let ty = oy as isize + pad as isize - ky as isize;
                                let tx = ox as isize + pad as isize - kx as isize;
                                if ty < 0 || tx < 0 || ty % stride as isize != 0 || tx % stride as isize != 0 {
                                    continue;
                                }
                                let (iy, ix) = ((ty / stride as isize) as usize, (tx / stride as isize) as usize);
                                if iy >= h || ix >= wd {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + ci) * h + iy) * wd + ix];
                                let wv = w.data()[((ci * o + oi) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` with a floor so two zero vectors compare equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-10)
}

/// Coordinates checked for a tensor of `numel` elements: all of them up to
/// `cap`, otherwise a random subset of size `cap`.
pub fn probe_coords(numel: usize, cap: usize, rng: &mut impl Rng) -> Vec<usize> {
    if numel <= cap {
        (0..numel).collect()
    } else {
        let mut v = sample(rng, numel, cap).into_vec();
        v.sort_unstable();
        v
    }
}

/// Central finite-difference check of every input's gradient. `build`
/// receives one leaf per input and returns the scalar loss node. Returns the
/// worst per-input relative error.
pub fn gradient_check(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    eps: f64,
    cap: usize,
    rng: &mut impl Rng,
) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids);
    let grads = g.backward(loss).unwrap();

    let eval = |inputs: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids);
        g.value(loss).item()
    };

    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic_full = grads.get(ids[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let coords = probe_coords(t.numel(), cap, rng);
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[c] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[c] -= eps;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * eps));
            analytic.push(analytic_full.data()[c]);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

pub fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

pub type OpCase = (&'static str, fn(u64) -> f64);

const FD_EPS: f64 = 1e-5;
const FD_CAP: usize = 24;

/// One finite-difference case per differentiable op; each returns the worst
/// relative error for the given seed.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("conv2d", |seed| {
            let mut r = rng(seed);
            let inputs = [
                uniform(&[2, 3, 5, 6], &mut r),
                uniform(&[4, 3, 3, 3], &mut r),
                uniform(&[4], &mut r),
            ];
            let tgt = uniform(&[2, 4, 3, 3], &mut r);
            gradient_check(
                &inputs,
                |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], Some(ids[2]), ConvParams::new(2, 1)).unwrap();
                    let t = g.constant(tgt.clone());
                    g.mse(y, t).unwrap()
                },
                FD_EPS,
                FD_CAP,
                &mut r,
            )
        }),
        ("conv_transpose2d", |seed| {
            let mut r = rng(seed);
            let inputs = [
                uniform(&[2, 3, 3, 4], &mut r),
                uniform(&[3, 2, 4, 4], &mut r),
                uniform(&[2], &mut r),
            ];
            let tgt = uniform(&[2, 2, 6, 8], &mut r);
            gradient_check(
                &inputs,
                |g, ids| {
                    let y = g
                        .conv_transpose2d(ids[0], ids[1], Some(ids[2]), ConvParams::new(2, 1))
                        .unwrap();
                    let t = g.constant(tgt.clone());
                    g.mse(y, t).unwrap()
                },
                FD_EPS,
                FD_CAP,
                &mut r,
            )
        }),
        ("linear", |seed| {
            let mut r = rng(seed);
            let inputs = [
                uniform(&[2, 3, 5], &mut r),
                uniform(&[4, 5], &mut r),
                uniform(&[4], &mut r),
            ];
            let tgt = uniform(&[2, 3, 4], &mut r);
            gradient_check(
                &inputs,
                |g, ids| {
                    let y = g.linear(ids[0], ids[1], Some(ids[2])).unwrap();
                    let t = g.constant(tgt.clone());
                    g.mse(y, t).unwrap()
                },
                FD_EPS,
                FD_CAP,
                &mut r,
            )
        }),
        ("nonlinearity", |seed| {
            let mut r = rng(seed);
            let inputs = [Tensor::uniform(&[3, 7], -3.0, 3.0, &mut r)];
            let tgt = uniform(&[3, 7], &mut r);
            gradient_check(
                &inputs,
                |g, ids| {
                    let y = g.silu(ids[0]).unwrap();
                    let t = g.constant(tgt.clone());
                    g.mse(y, t).unwrap()
                },
                FD_EPS,
                FD_CAP,
                &mut r,
            )
        }),
        ("scaled_dot_attention", |seed| {
            let mut r = rng(seed);
            let inputs = [
                uniform(&[2, 3, 4], &mut r),
                uniform(&[2, 5, 4], &mut r),
                uniform(&[2, 5, 3], &mut r),
            ];
            let tgt = uniform(&[2, 3, 3], &mut r);
            gradient_check(
                &inputs,
                |g, ids| {
                    let y = g.scaled_dot_attention(ids[0], ids[1], ids[2]).unwrap();
                    let t = g.constant(tgt.clone());
                    g.mse(y, t).unwrap()
                },
                FD_EPS,
                FD_CAP,
                &mut r,
            )
        }),
        ("elementwise_add_sub_scale", |seed| {
            let mut r = rng(seed);
            let inputs = [uniform(&[4, 3], &mut r), uniform(&[4, 3], &mut r)];
            let tgt = uniform(&[4, 3], &mut r);
            gradient_check(
                &inputs,
                |g, ids| {
                    let s = g.add(ids[0], ids[1]).unwrap();
                    let d = g.sub(s, ids[1]).unwrap();
                    let d = g.scale(d, -1.7).unwrap();
                    let e = g.add(d, ids[1]).unwrap();
                    let t = g.constant(tgt.clone());
                    g.mse(e, t).unwrap()
                },
                FD_EPS,
                FD_CAP,
                &mut r,
            )
        }),
        ("mean", |seed| {
            let mut r = rng(seed);
            let inputs = [uniform(&[3, 4], &mut r)];
            gradient_check(
                &inputs,
                |g, ids| {
                    let y = g.silu(ids[0]).unwrap();
                    g.mean(y).unwrap()
                },
                FD_EPS,
                FD_CAP,
                &mut r,
            )
        }),
        ("mse", |seed| {
            let mut r = rng(seed);
            let inputs = [uniform(&[2, 6], &mut r), uniform(&[2, 6], &mut r)];
            gradient_check(&inputs, |g, ids| g.mse(ids[0], ids[1]).unwrap(), FD_EPS, FD_CAP, &mut r)
        }),
        ("row_norm_mean", |seed| {
            let mut r = rng(seed);
            let inputs = [uniform(&[5, 4], &mut r)];
            gradient_check(
                &inputs,
                |g, ids| g.row_norm_mean(ids[0]).unwrap(),
                FD_EPS,
                FD_CAP,
                &mut r,
            )
        }),
        ("reshape_transpose", |seed| {
            let mut r = rng(seed);
            let inputs = [uniform(&[2, 3, 4], &mut r)];
            let tgt = uniform(&[8, 3], &mut r);
            gradient_check(
                &inputs,
                |g, ids| {
                    let t = g.transpose12(ids[0]).unwrap();
                    let t = g.reshape(t, &[8, 3]).unwrap();
                    let s = g.silu(t).unwrap();
                    let c = g.constant(tgt.clone());
                    g.mse(s, c).unwrap()
                },
                FD_EPS,
                FD_CAP,
                &mut r,
            )
        }),
        ("gather_rows", |seed| {
            let mut r = rng(seed);
            let inputs = [uniform(&[6, 3], &mut r)];
            let tgt = uniform(&[5, 3], &mut r);
            gradient_check(
                &inputs,
                |g, ids| {
                    let y = g.gather_rows(ids[0], &[4, 0, 4, 2, 5]).unwrap();
                    let s = g.silu(y).unwrap();
                    let t = g.constant(tgt.clone());
                    g.mse(s, t).unwrap()
                },
                FD_EPS,
                FD_CAP,
                &mut r,
            )
        }),
        ("conv_net_3_layer", |seed| {
            let mut r = rng(seed);
            let inputs = [
                uniform(&[1, 2, 8, 8], &mut r),
                uniform(&[4, 2, 3, 3], &mut r),
                uniform(&[4], &mut r),
                uniform(&[4, 4, 3, 3], &mut r),
                uniform(&[4], &mut r),
                uniform(&[4, 3, 4, 4], &mut r),
                uniform(&[3], &mut r),
            ];
            let tgt = uniform(&[1, 3, 8, 8], &mut r);
            gradient_check(
                &inputs,
                |g, ids| {
                    let h = g.conv2d(ids[0], ids[1], Some(ids[2]), ConvParams::new(1, 1)).unwrap();
                    let h = g.silu(h).unwrap();
                    let h = g.conv2d(h, ids[3], Some(ids[4]), ConvParams::new(2, 1)).unwrap();
                    let h = g.silu(h).unwrap();
                    let y = g
                        .conv_transpose2d(h, ids[5], Some(ids[6]), ConvParams::new(2, 1))
                        .unwrap();
                    let t = g.constant(tgt.clone());
                    g.mse(y, t).unwrap()
                },
                FD_EPS,
                FD_CAP,
                &mut r,
            )
        }),
    ]
}

/// A model small enough for finite differences: 16x16 images, channels
/// `[4, 8, 8, 16]`, a 2x2 token grid.
pub fn tiny_model(seed: u64) -> TokenizerModel {
    let mut r = rng(seed);
    let cfg = ModelConfig {
        image_size: 16,
        width_divisor: 32,
        d_l: 4,
        k_g: 2,
        local_dim: 3,
        global_dim: 5,
    };
    let local = EmbeddingTable::from_tensor(&uniform(&[12, 3], &mut r)).unwrap();
    let global = EmbeddingTable::from_tensor(&uniform(&[7, 5], &mut r)).unwrap();
    TokenizerModel::init(cfg, local, global, &mut r).unwrap()
}

/// Images and stacked global embeddings for `tiny_model`.
pub fn tiny_batch(model: &TokenizerModel, batch: usize, seed: u64) -> (Tensor, Tensor) {
    let mut r = rng(seed ^ 0x5eed);
    let images = Tensor::uniform(&[batch, 3, 16, 16], 0.0, 1.0, &mut r);
    let ids: Vec<Vec<u32>> = (0..batch)
        .map(|_| model.global_tokens(uniform(&[5], &mut r).data()).unwrap())
        .collect();
    (images, model.global_embeddings(&ids).unwrap())
}

/// Relative error between the analytic gradient of the full VQ loss and
/// central differences, worst over the encoder, projector and decoder
/// parameter groups. Up to `cap` coordinates are probed per tensor.
pub fn vq_gradient_error(seed: u64, cap: usize) -> f64 {
    let model = tiny_model(seed);
    let (x, fg) = tiny_batch(&model, 2, seed);
    let beta = 0.3;
    let mode = model.surrogate_at(&x, &fg, beta).unwrap();
    let mut g = Graph::new();
    let fwd = model.vq_forward(&mut g, &x, &fg, beta, &mode).unwrap();
    let grads = g.backward(fwd.loss).unwrap();

    let eval = |m: &TokenizerModel| {
        let mut g = Graph::new();
        let fwd = m.vq_forward(&mut g, &x, &fg, beta, &mode).unwrap();
        g.value(fwd.loss).item()
    };

    let eps = 1e-5;
    let mut r = rng(seed + 1000);
    let mut probe = model.clone();
    let groups = ["enc.", "proj.", "dec."];
    let mut analytic = vec![Vec::new(); groups.len()];
    let mut numeric = vec![Vec::new(); groups.len()];
    for (k, &id) in fwd.params.iter().enumerate() {
        let name = &model.params.names()[k];
        let group = groups.iter().position(|p| name.starts_with(p)).unwrap();
        let shape = model.params.tensors()[k].shape().to_vec();
        let full = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
        for c in probe_coords(full.numel(), cap, &mut r) {
            let orig = probe.params.tensors()[k].data()[c];
            probe.params.tensors_mut()[k].data_mut()[c] = orig + eps;
            let up = eval(&probe);
            probe.params.tensors_mut()[k].data_mut()[c] = orig - eps;
            let down = eval(&probe);
            probe.params.tensors_mut()[k].data_mut()[c] = orig;
            numeric[group].push((up - down) / (2.0 * eps));
            analytic[group].push(full.data()[c]);
        }
    }
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

pub struct SmokeRun {
    pub losses: Vec<f64>,
    pub psnr_init: f64,
    pub psnr_trained: f64,
    pub seconds: f64,
}

impl SmokeRun {
    /// Mean loss over the 50 steps ending at 1-based `step`.
    pub fn moving_average(&self, step: usize) -> f64 {
        self.losses[step - 50..step].iter().sum::<f64>() / 50.0
    }
}

/// Peak-1 PSNR after clamping the reconstruction to `[0, 1]`.
pub fn psnr(reference: &Tensor, output: &Tensor) -> f64 {
    let mse = reference
        .data()
        .iter()
        .zip(output.data())
        .map(|(a, b)| (a - b.clamp(0.0, 1.0)).powi(2))
        .sum::<f64>()
        / reference.numel() as f64;
    10.0 * (1.0 / mse).log10()
}

/// 300 steps on 200 synthetic 32x32 images against a 512-row random frozen
/// local codebook, with PSNR of a held-out image before and after.
pub fn training_smoke(seed: u64) -> SmokeRun {
    let start = std::time::Instant::now();
    let cfg = ModelConfig::default();
    let mut r = rng(seed);
    let local = EmbeddingTable::from_tensor(&uniform(&[512, cfg.local_dim], &mut r)).unwrap();
    let global = EmbeddingTable::from_tensor(&uniform(&[256, cfg.global_dim], &mut r)).unwrap();
    let model = TokenizerModel::init(cfg.clone(), local, global, &mut r).unwrap();
    let extractor = ToyExtractor::new(cfg.global_dim, 4, seed);

    let images = synthetic_images(200, 32, seed);
    let features: Vec<Vec<f64>> = images.iter().map(|im| extractor.feature("", im).unwrap()).collect();
    let held = synthetic_images(1, 32, seed + 1).remove(0);
    let held_feature = extractor.feature("", &held).unwrap();
    let held_batch = held.reshape(&[1, 3, 32, 32]).unwrap();
    let reconstruct = |m: &TokenizerModel| {
        let maps = m.tokenize(&held_batch, &[held_feature.clone()]).unwrap();
        psnr(&held_batch, &m.detokenize(&maps).unwrap())
    };
    let psnr_init = reconstruct(&model);

    let config = TrainConfig {
        epochs: 12,
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, config, images, &features).unwrap();
    assert_eq!(trainer.total_steps(), 300);
    let losses = trainer.run(300, |_, _| {}).unwrap().into_iter().map(|l| l.loss).collect();
    SmokeRun {
        losses,
        psnr_init,
        psnr_trained: reconstruct(&trainer.model),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Local lexicon of `size` distinct strings `▁t0`, `▁t1`, ...
pub fn local_lexicon(size: usize) -> Lexicon {
    Lexicon::new((0..size).map(|i| format!("\u{2581}t{i}")).collect())
}

pub fn random_map(height: usize, width: usize, vocab: usize, seed: u64) -> TokenMap {
    let mut r = rng(seed);
    let local = (0..height * width).map(|_| r.gen_range(0..vocab as u32)).collect();
    let global = (0..5).map(|_| r.gen_range(0..vocab as u32)).collect();
    TokenMap::new(global, height, width, local).unwrap()
}

fn words(lex: &Lexicon, ids: &[u32]) -> String {
    ids.iter().map(|&i| lex.text(i).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Answers each fill call with the true tokens: masked positions are
/// visited in ascending order and grouped into contiguous runs of at most
/// `m`, one answer per run.
pub fn truth_for_mask(truth: &TokenMap, positions: &[usize], m: usize, lex: &Lexicon) -> (OracleBackend, usize) {
    let mut sorted = positions.to_vec();
    sorted.sort_unstable();
    let mut runs: Vec<Vec<u32>> = Vec::new();
    let mut prev: Option<usize> = None;
    for p in sorted {
        let extend = matches!((prev, runs.last()), (Some(q), Some(r)) if q + 1 == p && r.len() < m);
        if extend {
            runs.last_mut().unwrap().push(truth.local_ids[p]);
        } else {
            runs.push(vec![truth.local_ids[p]]);
        }
        prev = Some(p);
    }
    let n = runs.len();
    (OracleBackend::sequence(runs.iter().map(|r| words(lex, r))), n)
}

/// Answers each translation call with the next `m` clean tokens.
pub fn truth_for_translation(clean: &TokenMap, m: usize, lex: &Lexicon) -> (OracleBackend, usize) {
    let answers: Vec<String> = clean.local_ids.chunks(m).map(|c| words(lex, c)).collect();
    let n = answers.len();
    (OracleBackend::sequence(answers), n)
}
