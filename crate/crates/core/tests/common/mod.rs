#![allow(dead_code)]

pub mod dense;
pub mod grad;

use hiersparse::attention::Setting;
use hiersparse::model::{AttentionVariant, Integration, Model, ModelConfig};
use hiersparse::normalize::{Mask, Normalizer};
use hiersparse::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, normal_vec(rng, rows * cols)).unwrap()
}

/// Michelot's active-set projection onto the simplex: repeatedly drop
/// coordinates that fall below the running threshold.
fn michelot(v: &[f64]) -> Vec<f64> {
    let mut active: Vec<usize> = (0..v.len()).collect();
    loop {
        let tau = (active.iter().map(|&i| v[i]).sum::<f64>() - 1.0) / active.len() as f64;
        let keep: Vec<usize> = active.iter().copied().filter(|&i| v[i] > tau).collect();
        if keep.len() == active.len() {
            let mut p = vec![0.0; v.len()];
            for &i in &active {
                p[i] = v[i] - tau;
            }
            return p;
        }
        active = keep;
    }
}

/// Brute-force minimizer of `||p − z||²` on the simplex by projected
/// gradient descent from the barycenter.
pub fn simplex_projection_oracle(z: &[f64], iterations: usize) -> Vec<f64> {
    let n = z.len();
    let mut p = vec![1.0 / n as f64; n];
    let step = 0.25;
    for _ in 0..iterations {
        let moved: Vec<f64> = p.iter().zip(z).map(|(pi, zi)| pi - step * 2.0 * (pi - zi)).collect();
        let next = michelot(&moved);
        let delta = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        p = next;
        if delta == 0.0 {
            break;
        }
    }
    p
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Straight-line scaled dot-product attention over nested vectors.
pub fn dense_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, mask: Option<&Mask>, norm: Normalizer) -> Vec<Vec<f64>> {
    let dk = q.cols() as f64;
    (0..q.rows())
        .map(|i| {
            let mut scores = Vec::new();
            let mut open = Vec::new();
            for j in 0..k.rows() {
                if mask.is_some_and(|m| m.blocked(i, j)) {
                    continue;
                }
                let dot: f64 = (0..q.cols()).map(|c| q.at(i, c) * k.at(j, c)).sum();
                scores.push(dot / dk.sqrt());
                open.push(j);
            }
            let w = match norm {
                Normalizer::Softmax => softmax(&scores),
                Normalizer::Sparsemax => simplex_projection_oracle(&scores, 10_000),
            };
            (0..v.cols()).map(|c| w.iter().zip(&open).map(|(wj, &j)| wj * v.at(j, c)).sum()).collect()
        })
        .collect()
}

pub fn max_abs_diff_rows(t: &Tensor<f64>, rows: &[Vec<f64>]) -> f64 {
    let mut m: f64 = 0.0;
    for (i, r) in rows.iter().enumerate() {
        for (j, &x) in r.iter().enumerate() {
            m = m.max((t.at(i, j) - x).abs());
        }
    }
    m
}

pub fn tiny_config(attention: AttentionVariant, integration: Integration, setting: Setting) -> ModelConfig {
    ModelConfig {
        src_vocab: 10,
        tgt_vocab: 11,
        model_dim: 8,
        ff_dim: 12,
        layers: 1,
        heads: 2,
        attention,
        integration,
        setting,
        dropout_sentence: 0.0,
        dropout_context: 0.0,
        ..ModelConfig::default()
    }
}

/// Context model whose trainable weights are all redrawn from U(−a, a), so
/// that the gate and output gains are far from their initial values.
pub fn random_context_model(cfg: &ModelConfig, seed: u64, a: f64) -> Model<f64> {
    let mut r = rng(seed);
    let base = Model::<f64>::new_sentence(cfg.clone(), &mut r).unwrap();
    let mut m = Model::with_context(&base, cfg.clone(), &mut r).unwrap();
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        if m.params().name(id).starts_with("base.") {
            continue;
        }
        let t = m.params_mut().get_mut(id);
        for x in t.data_mut() {
            *x = r.random_range(-a..a);
        }
    }
    m
}

pub fn random_sentence(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(4..vocab)).collect()
}

pub fn random_doc(rng: &mut ChaCha8Rng, cfg: &ModelConfig, sentences: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let src = (0..sentences).map(|_| {
        let n = rng.random_range(1..5);
        random_sentence(rng, cfg.src_vocab, n)
    });
    let src: Vec<_> = src.collect();
    let tgt = (0..sentences)
        .map(|_| {
            let n = rng.random_range(1..5);
            random_sentence(rng, cfg.tgt_vocab, n)
        })
        .collect();
    (src, tgt)
}

pub fn all_configs() -> Vec<(AttentionVariant, Integration, Setting)> {
    let mut out = Vec::new();
    for a in AttentionVariant::ALL {
        for i in [Integration::Encoder, Integration::Decoder] {
            for s in [Setting::Online, Setting::Offline] {
                out.push((a, i, s));
            }
        }
    }
    out
}
