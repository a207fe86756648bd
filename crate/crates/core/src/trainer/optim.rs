use super::config::OptimizerKind;
use super::TrainError;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADAGRAD_EPS: f64 = 1e-10;

/// Per-block optimizer statistics. Adam keeps first and second moments,
/// Adagrad keeps the squared-gradient accumulator in `second`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        OptimizerState {
            kind,
            step: 0,
            first: if kind == OptimizerKind::Adam { zeros() } else { Vec::new() },
            second: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], gamma: f64) -> Result<(), TrainError> {
        if params.len() != grads.len() || params.len() != self.second.len() {
            return Err(TrainError::Shape(format!(
                "{} parameter blocks, {} gradient blocks, {} state blocks",
                params.len(),
                grads.len(),
                self.second.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(TrainError::Shape(format!("block {i}: {} parameters, {} gradients", p.len(), g.len())));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGradient { block: i, index: j });
            }
        }
        match self.kind {
            OptimizerKind::Adam => self.adam(params, grads, gamma),
            OptimizerKind::Adagrad => self.adagrad(params, grads, gamma),
        }
        Ok(())
    }

    fn adam(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], gamma: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            for (((x, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= gamma * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }

    fn adagrad(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], gamma: f64) {
        self.step += 1;
        for ((p, g), acc) in params.iter_mut().zip(grads).zip(self.second.iter_mut()) {
            for ((x, &gi), a) in p.iter_mut().zip(g).zip(acc.iter_mut()) {
                *a += gi * gi;
                *x -= gamma * gi / (a.sqrt() + ADAGRAD_EPS);
            }
        }
    }
}

/// Rescales all blocks so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}
