//! Label-free test-time refinement, metrics and dependency export.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::backbone::{output_to_score, Task};
use crate::ingest::SparseInstance;
use crate::linalg::Mat;
use crate::model::{build_graph, forward_outputs, GraphSpec, Model, ModelError};
use crate::trainer::ModelCheckpoint;

pub const LOGLOSS_CLAMP: f64 = 1e-15;
/// Instances per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no instances to evaluate")]
    Empty,
    #[error("{0} scores but {1} labels")]
    Length(usize, usize),
    #[error("AUC is undefined when all labels belong to one class")]
    SingleClass,
    #[error("schema hash mismatch: checkpoint has {expected}, data uses {got}")]
    SchemaMismatch { expected: String, got: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Length(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Area under the ROC curve as the Mann-Whitney statistic with midranks,
/// so tied scores count one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let midrank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&idx| labels[idx] > 0.5).count();
        rank_sum_pos += midrank * pos_in_group as f64;
        i = j;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// Mean binary cross-entropy with scores clamped to `[1e-15, 1 − 1e-15]`.
pub fn logloss_mean(scores: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check_lengths(scores, labels)?;
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let s = s.clamp(LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP);
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        })
        .sum();
    Ok(total / scores.len() as f64)
}

pub fn mse_mean(preds: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds, labels)?;
    let total: f64 = preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(total / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub task: Task,
    pub logloss: Option<f64>,
    /// `None` when the labels hold a single class.
    pub auc: Option<f64>,
    pub mse: Option<f64>,
}

impl EvalReport {
    pub fn from_scores(scores: &[f64], labels: &[f64], task: Task) -> Result<Self, EvalError> {
        check_lengths(scores, labels)?;
        Ok(match task {
            Task::Binary => EvalReport {
                n: scores.len(),
                task,
                logloss: Some(logloss_mean(scores, labels)?),
                auc: match auc(scores, labels) {
                    Ok(a) => Some(a),
                    Err(EvalError::SingleClass) => None,
                    Err(e) => return Err(e),
                },
                mse: None,
            },
            Task::Regression => EvalReport {
                n: scores.len(),
                task,
                logloss: None,
                auc: None,
                mse: Some(mse_mean(scores, labels)?),
            },
        })
    }

    /// The quantity early stopping minimizes: logloss or MSE.
    pub fn objective(&self) -> f64 {
        self.logloss.or(self.mse).unwrap_or(f64::NAN)
    }

    /// AUC for binary tasks, MSE for regression.
    pub fn headline(&self) -> f64 {
        match self.task {
            Task::Binary => self.auc.unwrap_or(f64::NAN),
            Task::Regression => self.mse.unwrap_or(f64::NAN),
        }
    }

    pub fn summary_line(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        match self.task {
            Task::Binary => format!("n={} logloss={} auc={}", self.n, fmt(self.logloss), fmt(self.auc)),
            Task::Regression => format!("n={} mse={}", self.n, fmt(self.mse)),
        }
    }

    pub fn key_values(&self) -> String {
        let mut out = String::new();
        writeln!(out, "n={}", self.n).unwrap();
        writeln!(out, "task={}", self.task.as_str()).unwrap();
        for (k, v) in [("logloss", self.logloss), ("auc", self.auc), ("mse", self.mse)] {
            if let Some(v) = v {
                writeln!(out, "{k}={v}").unwrap();
            }
        }
        out
    }
}

/// Scores for every instance: refine from the shared matrix using only the
/// dependency loss, then the backbone; sigmoid for binary tasks.
///
/// Work is cut into fixed chunks of [`EVAL_CHUNK`] instances spread over
/// `threads` workers; each instance's result does not depend on its chunk.
pub fn predict_scores(model: &Model, spec: &GraphSpec, data: &[SparseInstance], threads: usize) -> Result<Vec<f64>, EvalError> {
    let refs: Vec<&SparseInstance> = data.iter().collect();
    let chunks: Vec<&[&SparseInstance]> = refs.chunks(EVAL_CHUNK).collect();
    let task = model.backbone.task;
    let results = crate::parallel::map_indexed(chunks.len(), threads, |i| forward_outputs(model, spec, chunks[i]));
    let mut out = Vec::with_capacity(data.len());
    for r in results {
        out.extend(r?.into_iter().map(|o| output_to_score(o, task)));
    }
    Ok(out)
}

pub fn evaluate(model: &Model, spec: &GraphSpec, data: &[SparseInstance], threads: usize) -> Result<EvalReport, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Empty);
    }
    let scores = predict_scores(model, spec, data, threads)?;
    let labels: Vec<f64> = data.iter().map(|x| x.label).collect();
    EvalReport::from_scores(&scores, &labels, model.backbone.task)
}

/// Single-instance prediction from a checkpoint.
pub fn predict(inst: &SparseInstance, ckpt: &ModelCheckpoint) -> Result<f64, EvalError> {
    let out = forward_outputs(&ckpt.model, &ckpt.config.graph_spec(), &[inst])?;
    Ok(output_to_score(out[0], ckpt.model.backbone.task))
}

/// Refined `(W^(T), μ^(T))` for one instance.
pub fn refined_dependencies(inst: &SparseInstance, model: &Model, spec: &GraphSpec) -> Result<(Mat, Vec<f64>), EvalError> {
    let g = build_graph(model, spec, &[inst], false, None)?;
    let w = g.tape.value(g.w_t).mat(0);
    let mu = g.tape.value(g.mu_t).item(0).to_vec();
    Ok((w, mu))
}

/// Divides off-diagonal entries by their largest magnitude (1 if all zero);
/// the diagonal is left as is.
pub fn normalize_off_diagonal(w: &Mat) -> Mat {
    let m = w.rows();
    let mut scale: f64 = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                scale = scale.max(w[(i, j)].abs());
            }
        }
    }
    if scale == 0.0 {
        scale = 1.0;
    }
    let mut out = w.clone();
    let data = out.as_mut_slice();
    for i in 0..m {
        for j in 0..m {
            if i != j {
                data[i * m + j] /= scale;
            }
        }
    }
    out
}

/// CSV with header `matrix,field,<field names>` and one row per matrix row,
/// first the shared matrix (`global`), then the refined and `μ`-weighted one (`local`).
pub fn dependency_csv(global: &Mat, local: &Mat, names: &[String]) -> String {
    let mut out = String::new();
    write!(out, "matrix,field").unwrap();
    for n in names {
        write!(out, ",{}", csv_field(n)).unwrap();
    }
    out.push('\n');
    for (tag, w) in [("global", global), ("local", local)] {
        let w = normalize_off_diagonal(w);
        for (i, n) in names.iter().enumerate() {
            write!(out, "{tag},{}", csv_field(n)).unwrap();
            for v in w.row(i) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes [`dependency_csv`] for `inst` under `ckpt` to `path`.
pub fn dump_dependencies(inst: &SparseInstance, ckpt: &ModelCheckpoint, path: &Path) -> Result<(), EvalError> {
    let spec = ckpt.config.graph_spec();
    let (w, mu) = refined_dependencies(inst, &ckpt.model, &spec)?;
    let local = w.hadamard_colscale(&mu).expect("m entries");
    std::fs::write(path, dependency_csv(&ckpt.model.w0, &local, &ckpt.schema.field_names()))?;
    Ok(())
}
