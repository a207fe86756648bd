#![allow(dead_code)]

use mdl::backbone::{BackboneParams, Task};
use mdl::embedding::EmbeddingState;
use mdl::ingest::{FeatureValue, SparseInstance};
use mdl::linalg::Mat;
use mdl::model::{loss_and_gradients, GraphSpec, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `m` fields of `d` features each; when `raw_last` the last field is numeric.
pub fn toy_model(m: usize, k: usize, d: usize, hidden: &[usize], task: Task, raw_last: bool, seed: u64) -> Model {
    let mut r = rng(seed);
    let cards: Vec<usize> = (0..m).map(|i| if raw_last && i == m - 1 { 1 } else { d }).collect();
    let total: usize = cards.iter().sum();
    let v = Mat::from_vec(k, total, (0..k * total).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let mut offsets = Vec::new();
    let mut acc = 0;
    for c in &cards {
        offsets.push(acc);
        acc += c;
    }
    let embedding = EmbeddingState {
        offsets,
        cardinalities: cards,
        raw: (0..m).map(|i| raw_last && i == m - 1).collect(),
        v,
    };
    let mut w0 = Mat::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            w0.as_mut_slice()[i * m + j] = if i == j { -1.0 } else { r.random_range(-0.5..0.5) };
        }
    }
    let mut backbone = BackboneParams::init(m, k, hidden, task, seed.wrapping_add(17), 0.7).unwrap();
    // Nonzero biases keep pre-activations off the ReLU kink at exactly 0.
    for l in &mut backbone.layers {
        for b in &mut l.b {
            *b = r.random_range(-0.3..0.3);
        }
    }
    Model { embedding, w0, backbone }
}

pub fn toy_instances(model: &Model, n: usize, seed: u64) -> Vec<SparseInstance> {
    let mut r = rng(seed);
    let task = model.backbone.task;
    (0..n)
        .map(|_| SparseInstance {
            features: (0..model.num_fields())
                .map(|i| {
                    if model.embedding.raw[i] {
                        FeatureValue::Value(r.random_range(-2.0..2.0))
                    } else {
                        FeatureValue::Index(r.random_range(0..model.embedding.cardinalities[i]) as u32)
                    }
                })
                .collect(),
            label: match task {
                Task::Binary => f64::from(r.random_bool(0.5)),
                Task::Regression => r.random_range(-1.0..1.0),
            },
        })
        .collect()
}

/// Largest per-block relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` between reverse-mode
/// gradients and central differences, over blocks with a non-negligible gradient.
/// The diagonal of the shared matrix (block 1) is skipped: it is fixed by projection.
pub fn gradient_error(model: &Model, spec: &GraphSpec, data: &[SparseInstance], h: f64) -> (f64, Vec<f64>) {
    let refs: Vec<&SparseInstance> = data.iter().collect();
    let scale = 1.0 / data.len() as f64;
    let (_, _, grads) = loss_and_gradients(model, spec, &refs, scale).unwrap();
    let m = model.num_fields();
    let mut per_block = Vec::new();
    let mut worst: f64 = 0.0;
    for (b, block) in grads.iter().enumerate() {
        let mut num = 0.0;
        let mut den_a = 0.0;
        let mut den_b = 0.0;
        for (j, &g) in block.iter().enumerate() {
            if b == 1 && j / m == j % m {
                continue;
            }
            let eval = |delta: f64| {
                let mut probe = model.clone();
                probe.blocks_mut()[b][j] += delta;
                loss_and_gradients(&probe, spec, &refs, scale).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            num += (fd - g) * (fd - g);
            den_a += fd * fd;
            den_b += g * g;
        }
        let den = den_a.sqrt().max(den_b.sqrt());
        let rel = if den < 1e-10 { num.sqrt() } else { num.sqrt() / den };
        per_block.push(rel);
        worst = worst.max(rel);
    }
    (worst, per_block)
}
