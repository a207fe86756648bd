//! Task model: pairwise bilinear interactions `e_iᵀ Φ^{ij} e_j` concatenated
//! with `vec((μ/λ) ∘ W)`, fed to a ReLU MLP with one linear output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::linalg::{sigmoid, Mat, Tape, TapeError, Tensor, Var};

pub const DEFAULT_HIDDEN: [usize; 3] = [100, 100, 100];

#[derive(Debug, Error, PartialEq)]
pub enum BackboneError {
    #[error("binary task needs labels in {{0,1}}, got {0}")]
    BadBinaryLabel(f64),
    #[error("label must be finite, got {0}")]
    NonFiniteLabel(f64),
    #[error("{what}: expected {expected}, got {got}")]
    Width { what: &'static str, expected: usize, got: usize },
    #[error("need at least two fields, got {0}")]
    TooFewFields(usize),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Binary,
    Regression,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Binary => "binary",
            Task::Regression => "regression",
        }
    }

    pub fn parse(s: &str) -> Result<Self, BackboneError> {
        match s {
            "binary" => Ok(Task::Binary),
            "regression" => Ok(Task::Regression),
            other => Err(BackboneError::UnknownTask(other.to_string())),
        }
    }

    pub fn check_label(self, y: f64) -> Result<(), BackboneError> {
        match self {
            Task::Binary if y != 0.0 && y != 1.0 => Err(BackboneError::BadBinaryLabel(y)),
            Task::Regression if !y.is_finite() => Err(BackboneError::NonFiniteLabel(y)),
            _ => Ok(()),
        }
    }
}

/// Dense layer `x ↦ xW + b` with `W` stored `inputs × outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Mat,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    /// One `k × k` matrix per field pair `(i, j)`, `i < j`, lexicographic.
    pub phi: Vec<Mat>,
    /// Hidden layers followed by the single-output layer.
    pub layers: Vec<Dense>,
    pub task: Task,
}

pub fn num_pairs(m: usize) -> usize {
    m * m.saturating_sub(1) / 2
}

pub fn input_width(m: usize) -> usize {
    num_pairs(m) + m * m
}

impl BackboneParams {
    /// `Φ ~ N(0, phi_scale²)`, hidden weights `N(0, 2/fan_in)`, output weights
    /// `N(0, 1/fan_in)`, biases zero.
    pub fn init(m: usize, k: usize, hidden: &[usize], task: Task, seed: u64, phi_scale: f64) -> Result<Self, BackboneError> {
        if m < 2 {
            return Err(BackboneError::TooFewFields(m));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi_dist = Normal::new(0.0, phi_scale).map_err(|_| BackboneError::Width {
            what: "phi scale",
            expected: 0,
            got: 0,
        })?;
        let phi = (0..num_pairs(m))
            .map(|_| Mat::from_vec(k, k, (0..k * k).map(|_| phi_dist.sample(&mut rng)).collect()).expect("k×k"))
            .collect();
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_width(m);
        for (li, &width) in hidden.iter().chain(std::iter::once(&1)).enumerate() {
            let gain = if li < hidden.len() { 2.0 } else { 1.0 };
            let dist = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            let w = Mat::from_vec(fan_in, width, (0..fan_in * width).map(|_| dist.sample(&mut rng)).collect()).expect("sizes");
            layers.push(Dense { w, b: vec![0.0; width] });
            fan_in = width;
        }
        Ok(BackboneParams { phi, layers, task })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.b.len()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.phi.iter().all(Mat::is_finite)
            && self.layers.iter().all(|l| l.w.is_finite() && l.b.iter().all(|x| x.is_finite()))
    }
}

/// `e_iᵀ Φ^{ij} e_j` for all `i < j` in lexicographic order.
pub fn pairwise_features(e: &Mat, phi: &[Mat]) -> Result<Vec<f64>, BackboneError> {
    let m = e.cols();
    if phi.len() != num_pairs(m) {
        return Err(BackboneError::Width {
            what: "pair matrices",
            expected: num_pairs(m),
            got: phi.len(),
        });
    }
    let cols: Vec<Vec<f64>> = (0..m).map(|i| e.column(i)).collect();
    let mut out = Vec::with_capacity(phi.len());
    let mut p = 0;
    for i in 0..m {
        for j in i + 1..m {
            let v = crate::linalg::bilinear(&cols[i], &phi[p], &cols[j]).map_err(|_| BackboneError::Width {
                what: "pair matrix side",
                expected: e.rows(),
                got: phi[p].rows(),
            })?;
            out.push(v);
            p += 1;
        }
    }
    Ok(out)
}

/// Row-major `vec(W ∘ (μ/λ))`, column `c` of `W` scaled by `μ_c/λ`.
pub fn dependency_block(w: &Mat, mu: &[f64], lambda: f64) -> Vec<f64> {
    let ratio: Vec<f64> = mu.iter().map(|m| m / lambda).collect();
    w.hadamard_colscale(&ratio).expect("mu length matches W").into_vec()
}

/// MLP on one input row; returns the logit or the regression output.
pub fn mlp_forward(input: &[f64], params: &BackboneParams) -> Result<f64, BackboneError> {
    if input.len() != params.input_width() {
        return Err(BackboneError::Width {
            what: "MLP input",
            expected: params.input_width(),
            got: input.len(),
        });
    }
    let mut h = Mat::row_vector(input);
    let last = params.layers.len() - 1;
    for (li, layer) in params.layers.iter().enumerate() {
        let mut z = h.matmul(&layer.w).expect("widths chain");
        for (v, b) in z.as_mut_slice().iter_mut().zip(&layer.b) {
            *v += b;
        }
        h = if li < last { z.relu() } else { z };
    }
    Ok(h.as_slice()[0])
}

/// Forward pass for one instance given its refined `(W, μ)`.
pub fn backbone_forward(e: &Mat, w_t: &Mat, mu_t: &[f64], params: &BackboneParams, lambda: f64) -> Result<f64, BackboneError> {
    let m = e.cols();
    if w_t.shape() != (m, m) || mu_t.len() != m {
        return Err(BackboneError::Width {
            what: "dependency block",
            expected: m * m,
            got: w_t.rows() * w_t.cols(),
        });
    }
    let mut input = pairwise_features(e, &params.phi)?;
    input.extend(dependency_block(w_t, mu_t, lambda));
    mlp_forward(&input, params)
}

/// Per-instance training loss: stable binary cross-entropy on the logit, or squared error.
pub fn task_loss(output: f64, y: f64, task: Task) -> Result<f64, BackboneError> {
    task.check_label(y)?;
    Ok(match task {
        Task::Binary => crate::linalg::bce_with_logit(output, y),
        Task::Regression => (output - y) * (output - y),
    })
}

/// Prediction from a raw output: probability for binary, identity otherwise.
pub fn output_to_score(output: f64, task: Task) -> f64 {
    match task {
        Task::Binary => sigmoid(output),
        Task::Regression => output,
    }
}

/// Tape handles for the backbone parameters.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    /// `P × k × k`.
    pub phi: Var,
    /// `(1 × in × out, 1 × 1 × out)` per layer.
    pub layers: Vec<(Var, Var)>,
}

impl BackboneVars {
    pub fn register(tape: &mut Tape, params: &BackboneParams, trainable: bool) -> Result<Self, TapeError> {
        let mut add = |t: Tensor| if trainable { tape.leaf(t) } else { tape.constant(t) };
        let phi = add(Tensor::stack(&params.phi)?);
        let mut layers = Vec::with_capacity(params.layers.len());
        for l in &params.layers {
            let w = add(Tensor::from_mat(&l.w));
            let b = add(Tensor::from_vec(1, 1, l.b.len(), l.b.clone())?);
            layers.push((w, b));
        }
        Ok(BackboneVars { phi, layers })
    }
}

/// Batched forward on the tape. `e` is `n × k × m`, `dep` is `1 × n × m²`;
/// returns `1 × n × 1` raw outputs.
pub fn tape_forward(tape: &mut Tape, e: Var, dep: Var, vars: &BackboneVars) -> Result<Var, TapeError> {
    let pairs = tape.pairwise_bilinear(e, vars.phi)?;
    let mut h = tape.concat_cols(pairs, dep)?;
    let last = vars.layers.len() - 1;
    for (li, &(w, b)) in vars.layers.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        let z = tape.add_bias(z, b)?;
        h = if li < last { tape.relu(z)? } else { z };
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_phi_gives_dot_products() {
        let e = Mat::from_rows(&[&[1.0, 2.0, -1.0], &[0.5, 3.0, 4.0]]);
        let phi = vec![Mat::identity(2); 3];
        let f = pairwise_features(&e, &phi).unwrap();
        assert_eq!(f, vec![1.0 * 2.0 + 0.5 * 3.0, -1.0 + 0.5 * 4.0, -2.0 + 12.0]);
    }

    #[test]
    fn scalar_bilinear_example() {
        let e = Mat::from_rows(&[&[3.0, 4.0]]);
        assert_eq!(pairwise_features(&e, &[Mat::from_rows(&[&[2.0]])]).unwrap(), vec![24.0]);
    }

    #[test]
    fn pair_count_and_width() {
        assert_eq!(num_pairs(3), 3);
        assert_eq!(input_width(4), 6 + 16);
        let p = BackboneParams::init(4, 3, &DEFAULT_HIDDEN, Task::Binary, 1, 0.01).unwrap();
        assert_eq!(p.input_width(), 22);
        assert_eq!(p.layers.len(), 4);
        assert_eq!(p.layers[3].w.cols(), 1);
        assert!(p.layers.iter().all(|l| l.b.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut p = BackboneParams::init(3, 2, &[5, 5, 5], Task::Binary, 1, 0.5).unwrap();
        for l in &mut p.layers {
            l.w = Mat::zeros(l.w.rows(), l.w.cols());
        }
        let e = Mat::from_rows(&[&[1.0, -2.0, 0.3], &[4.0, 0.1, 9.0]]);
        let w = Mat::from_rows(&[&[-1.0, 2.0, 0.0], &[0.3, -1.0, 1.0], &[0.0, 0.5, -1.0]]);
        assert_eq!(backbone_forward(&e, &w, &[0.2, 0.3, 0.5], &p, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn mu_lambda_ratio_invariance() {
        let p = BackboneParams::init(3, 2, &[6, 6, 6], Task::Binary, 4, 0.5).unwrap();
        let e = Mat::from_rows(&[&[1.0, -2.0, 0.3], &[4.0, 0.1, 9.0]]);
        let w = Mat::from_rows(&[&[-1.0, 2.0, 0.0], &[0.3, -1.0, 1.0], &[0.0, 0.5, -1.0]]);
        let mu = [0.25, 0.25, 0.5];
        let a = backbone_forward(&e, &w, &mu, &p, 1.0).unwrap();
        let b = backbone_forward(&e, &w, &[1.0, 1.0, 2.0], &p, 4.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn losses() {
        assert!((task_loss(0.0, 1.0, Task::Binary).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(task_loss(2.0, 5.0, Task::Regression).unwrap(), 9.0);
        for z in [40.0, -40.0] {
            for y in [0.0, 1.0] {
                assert!(task_loss(z, y, Task::Binary).unwrap().is_finite());
            }
        }
        assert!((task_loss(-40.0, 1.0, Task::Binary).unwrap() - 40.0).abs() < 1e-12);
        assert_eq!(task_loss(0.0, 0.5, Task::Binary), Err(BackboneError::BadBinaryLabel(0.5)));
    }

    #[test]
    fn tape_forward_matches_plain() {
        let p = BackboneParams::init(3, 2, &[7, 7, 7], Task::Binary, 4, 0.5).unwrap();
        let es = [
            Mat::from_rows(&[&[1.0, -2.0, 0.3], &[4.0, 0.1, 9.0]]),
            Mat::from_rows(&[&[0.2, 0.5, -0.3], &[-1.0, 2.0, 0.7]]),
        ];
        let w = Mat::from_rows(&[&[-1.0, 2.0, 0.0], &[0.3, -1.0, 1.0], &[0.0, 0.5, -1.0]]);
        let mu = [0.25, 0.25, 0.5];
        let mut tape = Tape::new();
        let vars = BackboneVars::register(&mut tape, &p, true).unwrap();
        let e = tape.constant(Tensor::stack(&es).unwrap());
        let mut block = dependency_block(&w, &mu, 1.0);
        block.extend(dependency_block(&w, &mu, 1.0));
        let dep = tape.constant(Tensor::from_vec(1, 2, 9, block).unwrap());
        let out = tape_forward(&mut tape, e, dep, &vars).unwrap();
        for (i, e) in es.iter().enumerate() {
            let plain = backbone_forward(e, &w, &mu, &p, 1.0).unwrap();
            assert!((tape.value(out).as_slice()[i] - plain).abs() < 1e-12);
        }
    }
}
