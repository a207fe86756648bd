//! Synthetic categorical data whose label depends on cross-field structure.
//!
//! Every feature `j` of field `i` owns a random unit direction `u_ij` in a
//! small latent space.
//!
//! Under [`LabelRule::Coherence`] an instance draws a latent `z` and, in every
//! field, picks the feature whose direction best matches `z` under Gumbel
//! noise, so the fields move together. For a random half of the instances the
//! last `broken` fields are instead drawn uniformly. The label marks the
//! coherent instances.
//!
//! Under [`LabelRule::Residual`] features are drawn uniformly and the label
//! says whether the last field's direction is well explained by a linear
//! combination of the other fields' directions (least-squares residual below
//! the median).
//!
//! Labels are flipped with probability `label_noise`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};

use crate::ingest::RawTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRule {
    Coherence,
    Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub rule: LabelRule,
    pub fields: usize,
    pub features: usize,
    pub instances: usize,
    pub latent_dim: usize,
    /// Fields re-drawn independently in incoherent instances.
    pub broken: usize,
    /// Gumbel scale of the feature choice; smaller is more deterministic.
    pub temperature: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            rule: LabelRule::Residual,
            fields: 5,
            features: 20,
            instances: 50_000,
            latent_dim: 3,
            broken: 2,
            temperature: 0.1,
            label_noise: 0.05,
            seed: 0,
        }
    }
}

/// Columns `f0..f{m-1}` holding tokens `v0..`, plus `label`.
pub fn planted_table(cfg: &PlantedConfig) -> RawTable {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = cfg.latent_dim;
    let directions: Vec<Vec<Vec<f64>>> = (0..cfg.fields)
        .map(|_| {
            (0..cfg.features)
                .map(|_| {
                    let v: Vec<f64> = (0..r).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect()
        })
        .collect();
    let gumbel = Gumbel::new(0.0, cfg.temperature.max(1e-12)).expect("positive scale");
    let mut columns: Vec<String> = (0..cfg.fields).map(|i| format!("f{i}")).collect();
    columns.push("label".into());
    let mut picks: Vec<Vec<usize>> = Vec::with_capacity(cfg.instances);
    let mut scores: Vec<f64> = Vec::with_capacity(cfg.instances);
    for _ in 0..cfg.instances {
        match cfg.rule {
            LabelRule::Coherence => {
                let z: Vec<f64> = (0..r).map(|_| StandardNormal.sample(&mut rng)).collect();
                let coherent = rng.random_bool(0.5);
                let row = directions
                    .iter()
                    .enumerate()
                    .map(|(i, dirs)| {
                        if !coherent && i >= cfg.fields - cfg.broken {
                            rng.random_range(0..cfg.features)
                        } else {
                            let mut best = (f64::NEG_INFINITY, 0);
                            for (j, u) in dirs.iter().enumerate() {
                                let s = u.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + gumbel.sample(&mut rng);
                                if s > best.0 {
                                    best = (s, j);
                                }
                            }
                            best.1
                        }
                    })
                    .collect();
                picks.push(row);
                scores.push(if coherent { 1.0 } else { -1.0 });
            }
            LabelRule::Residual => {
                let row: Vec<usize> = (0..cfg.fields).map(|_| rng.random_range(0..cfg.features)).collect();
                let others: Vec<&[f64]> = (0..cfg.fields - 1).map(|i| directions[i][row[i]].as_slice()).collect();
                let target = &directions[cfg.fields - 1][row[cfg.fields - 1]];
                scores.push(-least_squares_residual(&others, target));
                picks.push(row);
            }
        }
    }
    let threshold = match cfg.rule {
        LabelRule::Coherence => 0.0,
        LabelRule::Residual => {
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.get(sorted.len() / 2).copied().unwrap_or(0.0)
        }
    };
    let mut rows = Vec::with_capacity(cfg.instances);
    for (pick, score) in picks.into_iter().zip(scores) {
        let mut row: Vec<String> = pick.iter().map(|j| format!("v{j}")).collect();
        let positive = score > threshold;
        let flip = rng.random_bool(cfg.label_noise);
        row.push(if positive != flip { "1" } else { "0" }.into());
        rows.push(row);
    }
    RawTable { columns, rows }
}

/// `‖t − Xc‖²` for the least-squares `c`, with the columns of `X` given as slices.
fn least_squares_residual(cols: &[&[f64]], t: &[f64]) -> f64 {
    // Gram–Schmidt on the columns, then subtract the projection of `t`.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in cols {
        let mut v = c.to_vec();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-10 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut res = t.to_vec();
    for b in &basis {
        let d: f64 = res.iter().zip(b).map(|(x, y)| x * y).sum();
        for (x, y) in res.iter_mut().zip(b) {
            *x -= d * y;
        }
    }
    res.iter().map(|x| x * x).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let cfg = PlantedConfig {
            instances: 200,
            ..PlantedConfig::default()
        };
        let a = planted_table(&cfg);
        assert_eq!(a.columns.len(), 6);
        assert_eq!(a.rows.len(), 200);
        assert_eq!(a.rows, planted_table(&cfg).rows);
        let pos = a.rows.iter().filter(|r| r[5] == "1").count();
        assert!((60..140).contains(&pos));
        let c = planted_table(&PlantedConfig {
            rule: LabelRule::Coherence,
            ..cfg
        });
        let pos = c.rows.iter().filter(|r| r[5] == "1").count();
        assert!((60..140).contains(&pos));
    }

    #[test]
    fn residual_of_spanned_vector_is_zero() {
        let a = [1.0, 0.0, 0.0];
        let b = [1.0, 1.0, 0.0];
        assert!(least_squares_residual(&[&a, &b], &[3.0, -2.0, 0.0]) < 1e-20);
        assert!((least_squares_residual(&[&a, &b], &[0.0, 0.0, 2.0]) - 4.0).abs() < 1e-12);
    }
}
