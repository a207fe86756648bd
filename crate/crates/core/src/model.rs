//! The full differentiable pipeline for a batch: embedding lookup, `T`
//! unrolled refinement steps vectorized over the batch, backbone, loss.

use thiserror::Error;

use crate::backbone::{self, BackboneError, BackboneParams, BackboneVars, Task};
use crate::dependency::{project_diagonal, simplex_project, DependencyError, MuInit};
use crate::embedding::{init_embeddings, EmbeddingError, EmbeddingState};
use crate::ingest::{FieldSchema, SparseInstance};
use crate::linalg::{Gradients, Mat, Tape, TapeError, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Dependency(#[from] DependencyError),
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Per-instance refinement feeding the backbone.
    Mdl,
    /// No refinement and a zero dependency block.
    NoDep,
    /// No refinement; the shared matrix is regularized by the dependency loss.
    GlobalDep,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mdl => "mdl",
            Mode::NoDep => "no_dep",
            Mode::GlobalDep => "global_dep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mdl" => Some(Mode::Mdl),
            "no_dep" => Some(Mode::NoDep),
            "global_dep" => Some(Mode::GlobalDep),
            _ => None,
        }
    }
}

/// Everything the graph needs that is not a parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphSpec {
    pub steps: usize,
    pub eta: f64,
    pub lambda: f64,
    pub mu_init: MuInit,
    pub mode: Mode,
    pub zeta: f64,
    pub first_order: bool,
}

impl GraphSpec {
    /// Refinement steps actually unrolled under this mode.
    pub fn effective_steps(&self) -> usize {
        match self.mode {
            Mode::Mdl => self.steps,
            Mode::NoDep | Mode::GlobalDep => 0,
        }
    }

    /// Starting weights for the refinement.
    pub fn mu0(&self, m: usize) -> Result<Vec<f64>, DependencyError> {
        let mu = self.mu_init.vector(m, self.lambda);
        if self.mu_init == MuInit::Ones && self.effective_steps() > 0 {
            return Ok(simplex_project(&mu, self.lambda)?.mu);
        }
        Ok(mu)
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub embedding: EmbeddingState,
    /// Shared starting dependency matrix, diagonal pinned to `-1`.
    pub w0: Mat,
    pub backbone: BackboneParams,
}

impl Model {
    /// `V, Φ ~ N(0, init_scale²)`, `W^(0) = Π_w(0)`.
    pub fn init(schema: &FieldSchema, k: usize, hidden: &[usize], task: Task, seed: u64, init_scale: f64) -> Result<Self, ModelError> {
        let embedding = init_embeddings(schema, k, seed, init_scale)?;
        let m = schema.num_fields();
        let backbone = BackboneParams::init(m, k, hidden, task, seed ^ 0x005e_ed0f_bac4_b0e5, init_scale)?;
        Ok(Model {
            embedding,
            w0: project_diagonal(&Mat::zeros(m, m)),
            backbone,
        })
    }

    pub fn num_fields(&self) -> usize {
        self.w0.rows()
    }

    pub fn k(&self) -> usize {
        self.embedding.k()
    }

    /// Parameter blocks in their fixed order: `V`, `W^(0)`, each `Φ` pair,
    /// then each layer's weights and bias.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = vec![self.embedding.v.as_slice(), self.w0.as_slice()];
        out.extend(self.backbone.phi.iter().map(Mat::as_slice));
        for l in &self.backbone.layers {
            out.push(l.w.as_slice());
            out.push(&l.b);
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.embedding.v.as_mut_slice(), self.w0.as_mut_slice()];
        out.extend(self.backbone.phi.iter_mut().map(Mat::as_mut_slice));
        for l in &mut self.backbone.layers {
            out.push(l.w.as_mut_slice());
            out.push(&mut l.b);
        }
        out
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks().iter().map(|b| b.len()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Re-pins the diagonal of `W^(0)`.
    pub fn project(&mut self) {
        self.w0.set_diag(-1.0);
    }
}

/// Tape handles for every parameter block.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub v: Var,
    pub w0: Var,
    pub backbone: BackboneVars,
}

impl ParamVars {
    /// Gradient blocks in [`Model::blocks`] order.
    pub fn collect(&self, grads: &Gradients, model: &Model) -> Vec<Vec<f64>> {
        let mut out = vec![grads.wrt(self.v).into_vec(), grads.wrt(self.w0).into_vec()];
        let phi = grads.wrt(self.backbone.phi).into_vec();
        let kk = model.k() * model.k();
        out.extend(phi.chunks_exact(kk).map(<[f64]>::to_vec));
        for &(w, b) in &self.backbone.layers {
            out.push(grads.wrt(w).into_vec());
            out.push(grads.wrt(b).into_vec());
        }
        out
    }
}

/// A recorded batch.
pub struct BatchGraph {
    pub tape: Tape,
    pub params: ParamVars,
    /// `n × k × m` embeddings.
    pub e: Var,
    /// `n × m × m` matrices fed to the backbone.
    pub w_t: Var,
    /// `n × 1 × m` weights fed to the backbone.
    pub mu_t: Var,
    /// `1 × n × 1` raw outputs.
    pub outputs: Var,
    /// Present when labels were supplied.
    pub loss: Option<Var>,
    /// Per-instance task losses, present with `loss`.
    pub task_losses: Vec<f64>,
}

/// Labels and the factor applied to the summed batch objective.
pub struct Supervision<'a> {
    pub labels: &'a [f64],
    pub scale: f64,
}

/// One refinement step on batched tape values, `W` first, then `μ` with the new `W`.
fn inner_step(tape: &mut Tape, e: Var, et: Var, w: Var, mu: Var, spec: &GraphSpec) -> Result<(Var, Var), TapeError> {
    let ew = tape.matmul(e, w)?;
    let g = tape.matmul(et, ew)?;
    let g = tape.col_scale(mu, g)?;
    let step = tape.scale(g, spec.eta / spec.lambda)?;
    let w_new = tape.sub(w, step)?;
    let w_new = tape.diag_project(w_new)?;

    let ew = tape.matmul(e, w_new)?;
    let sq = tape.hadamard(ew, ew)?;
    let cs = tape.col_sum(sq)?;
    let step = tape.scale(cs, 0.5 * spec.eta)?;
    let mu_hat = tape.sub(mu, step)?;
    let mu_new = tape.simplex_project(mu_hat, spec.lambda)?;
    Ok((w_new, mu_new))
}

fn unroll(tape: &mut Tape, e: Var, w: Var, mu: Var, spec: &GraphSpec, steps: usize) -> Result<(Var, Var), TapeError> {
    if steps == 0 {
        return Ok((w, mu));
    }
    let et = tape.transpose(e)?;
    let (mut w, mut mu) = (w, mu);
    for _ in 0..steps {
        (w, mu) = inner_step(tape, e, et, w, mu, spec)?;
    }
    Ok((w, mu))
}

/// Records the forward pass for `batch`. With `trainable` false every
/// parameter enters as a constant and no gradient is kept.
pub fn build_graph(
    model: &Model,
    spec: &GraphSpec,
    batch: &[&SparseInstance],
    trainable: bool,
    supervision: Option<Supervision<'_>>,
) -> Result<BatchGraph, ModelError> {
    let n = batch.len();
    if n == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let m = model.num_fields();
    let mut tape = Tape::new();
    let add = |tape: &mut Tape, t: Tensor| if trainable { tape.leaf(t) } else { tape.constant(t) };
    let v = add(&mut tape, Tensor::from_mat(&model.embedding.v));
    let w0 = add(&mut tape, Tensor::from_mat(&model.w0));
    let backbone = BackboneVars::register(&mut tape, &model.backbone, trainable)?;

    let mut columns = Vec::with_capacity(n * m);
    let mut scales = Vec::with_capacity(n * m);
    for inst in batch {
        let (c, s) = model.embedding.lookup(inst)?;
        columns.extend(c);
        scales.extend(s);
    }
    let e = tape.gather_columns(v, columns, scales, m)?;
    let w0_pinned = tape.diag_project(w0)?;
    let w_start = tape.repeat_batch(w0_pinned, n)?;
    let mu0 = spec.mu0(m)?;
    let mu_start = tape.constant(Tensor::from_vec(1, 1, m, mu0.clone())?);
    let mu_start = tape.repeat_batch(mu_start, n)?;

    let steps = spec.effective_steps();
    let (w_t, mu_t) = if spec.first_order && steps > 0 {
        let e_c = tape.stop_gradient(e)?;
        let w_c = tape.stop_gradient(w_start)?;
        let (w_inner, mu_inner) = unroll(&mut tape, e_c, w_c, mu_start, spec, steps)?;
        let delta = tape.sub(w_inner, w_c)?;
        let delta = tape.stop_gradient(delta)?;
        let w_fo = tape.add(w_start, delta)?;
        let w_fo = tape.diag_project(w_fo)?;
        let mu_fo = tape.stop_gradient(mu_inner)?;
        (w_fo, mu_fo)
    } else {
        unroll(&mut tape, e, w_start, mu_start, spec, steps)?
    };

    let dep = match spec.mode {
        Mode::NoDep => tape.constant(Tensor::zeros(1, n, m * m)),
        Mode::Mdl | Mode::GlobalDep => {
            let ratio = tape.scale(mu_t, 1.0 / spec.lambda)?;
            let weighted = tape.col_scale(ratio, w_t)?;
            tape.flatten_batch(weighted)?
        }
    };
    let outputs = backbone::tape_forward(&mut tape, e, dep, &backbone)?;

    let mut loss = None;
    let mut task_losses = Vec::new();
    if let Some(sup) = supervision {
        let task = model.backbone.task;
        for &y in sup.labels {
            task.check_label(y)?;
        }
        let raw = match task {
            Task::Binary => tape.bce_with_logits_sum(outputs, sup.labels.to_vec())?,
            Task::Regression => tape.squared_error_sum(outputs, sup.labels.to_vec())?,
        };
        task_losses = tape
            .value(outputs)
            .as_slice()
            .iter()
            .zip(sup.labels)
            .map(|(&o, &y)| backbone::task_loss(o, y, task))
            .collect::<Result<_, _>>()?;
        let mut total = raw;
        if spec.mode == Mode::GlobalDep && spec.zeta != 0.0 {
            let ew = tape.matmul(e, w_start)?;
            let sq = tape.hadamard(ew, ew)?;
            let cs = tape.col_sum(sq)?;
            let weighted = tape.hadamard(cs, mu_start)?;
            let dl = tape.sum(weighted)?;
            let dl = tape.scale(dl, spec.zeta / (2.0 * spec.lambda))?;
            total = tape.add(total, dl)?;
        }
        loss = Some(tape.scale(total, sup.scale)?);
    }

    Ok(BatchGraph {
        tape,
        params: ParamVars { v, w0, backbone },
        e,
        w_t,
        mu_t,
        outputs,
        loss,
        task_losses,
    })
}

/// Raw outputs for `batch` (logits for binary tasks).
pub fn forward_outputs(model: &Model, spec: &GraphSpec, batch: &[&SparseInstance]) -> Result<Vec<f64>, ModelError> {
    let g = build_graph(model, spec, batch, false, None)?;
    Ok(g.tape.value(g.outputs).as_slice().to_vec())
}

/// `(loss, per-instance task losses, gradient blocks)`.
pub type LossAndGradients = (f64, Vec<f64>, Vec<Vec<f64>>);

/// Loss value and gradient blocks for `batch`, the loss being the summed
/// objective times `scale`.
pub fn loss_and_gradients(
    model: &Model,
    spec: &GraphSpec,
    batch: &[&SparseInstance],
    scale: f64,
) -> Result<LossAndGradients, ModelError> {
    let labels: Vec<f64> = batch.iter().map(|x| x.label).collect();
    let g = build_graph(
        model,
        spec,
        batch,
        true,
        Some(Supervision {
            labels: &labels,
            scale,
        }),
    )?;
    let loss = g.loss.expect("supervised graph has a loss");
    let value = g.tape.value(loss).as_slice()[0];
    let grads = g.tape.backward(loss)?;
    Ok((value, g.task_losses, g.params.collect(&grads, model)))
}
