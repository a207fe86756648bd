//! The embedding matrix `V` and per-instance lookup `E = [V_1 x_1, …, V_m x_m]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::ingest::{FeatureValue, FieldKind, FieldSchema, SparseInstance};
use crate::linalg::Mat;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding dimension must be at least 1")]
    ZeroDimension,
    #[error("init scale must be finite and non-negative, got {0}")]
    BadScale(f64),
    #[error("field {field}: feature index {index} out of range 0..{cardinality}")]
    IndexOutOfRange { field: usize, index: usize, cardinality: usize },
    #[error("field {0}: expected a {1} entry")]
    KindMismatch(usize, &'static str),
    #[error("instance has {got} fields, embedding expects {expected}")]
    Arity { expected: usize, got: usize },
    #[error("V has shape {got:?}, expected {expected:?}")]
    Shape { expected: (usize, usize), got: (usize, usize) },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingState {
    /// Column range of field `i` is `offsets[i]..offsets[i] + cardinalities[i]`.
    pub offsets: Vec<usize>,
    pub cardinalities: Vec<usize>,
    /// Whether field `i` carries a raw numeric value rather than an index.
    pub raw: Vec<bool>,
    /// `k × Σ d_i`.
    pub v: Mat,
}

impl EmbeddingState {
    pub fn from_parts(schema: &FieldSchema, v: Mat) -> Result<Self, EmbeddingError> {
        let cardinalities = schema.cardinalities();
        let total: usize = cardinalities.iter().sum();
        if v.rows() == 0 || v.cols() != total {
            return Err(EmbeddingError::Shape {
                expected: (v.rows().max(1), total),
                got: v.shape(),
            });
        }
        let mut offsets = Vec::with_capacity(cardinalities.len());
        let mut acc = 0;
        for d in &cardinalities {
            offsets.push(acc);
            acc += d;
        }
        Ok(EmbeddingState {
            offsets,
            cardinalities,
            raw: schema.fields.iter().map(|f| f.kind == FieldKind::NumericRaw).collect(),
            v,
        })
    }

    pub fn k(&self) -> usize {
        self.v.rows()
    }

    pub fn num_fields(&self) -> usize {
        self.offsets.len()
    }

    /// Selected column of `V` and its multiplier for every field.
    pub fn lookup(&self, inst: &SparseInstance) -> Result<(Vec<usize>, Vec<f64>), EmbeddingError> {
        let m = self.num_fields();
        if inst.features.len() != m {
            return Err(EmbeddingError::Arity {
                expected: m,
                got: inst.features.len(),
            });
        }
        let mut cols = Vec::with_capacity(m);
        let mut scales = Vec::with_capacity(m);
        for (i, f) in inst.features.iter().enumerate() {
            match (*f, self.raw[i]) {
                (FeatureValue::Index(j), false) => {
                    let j = j as usize;
                    if j >= self.cardinalities[i] {
                        return Err(EmbeddingError::IndexOutOfRange {
                            field: i,
                            index: j,
                            cardinality: self.cardinalities[i],
                        });
                    }
                    cols.push(self.offsets[i] + j);
                    scales.push(1.0);
                }
                (FeatureValue::Value(x), true) => {
                    cols.push(self.offsets[i]);
                    scales.push(x);
                }
                (_, true) => return Err(EmbeddingError::KindMismatch(i, "numeric value")),
                (_, false) => return Err(EmbeddingError::KindMismatch(i, "feature index")),
            }
        }
        Ok((cols, scales))
    }
}

/// `V` with i.i.d. `N(0, scale²)` entries drawn from a seeded stream.
pub fn init_embeddings(schema: &FieldSchema, k: usize, seed: u64, scale: f64) -> Result<EmbeddingState, EmbeddingError> {
    if k == 0 {
        return Err(EmbeddingError::ZeroDimension);
    }
    if !scale.is_finite() || scale < 0.0 {
        return Err(EmbeddingError::BadScale(scale));
    }
    let total = schema.total_features();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).expect("scale checked above");
    let data = (0..k * total).map(|_| normal.sample(&mut rng)).collect();
    let v = Mat::from_vec(k, total, data).expect("sizes agree");
    EmbeddingState::from_parts(schema, v)
}

/// `k × m` matrix whose column `i` is field `i`'s embedding.
pub fn embed(inst: &SparseInstance, state: &EmbeddingState) -> Result<Mat, EmbeddingError> {
    let (cols, scales) = state.lookup(inst)?;
    let (k, m) = (state.k(), cols.len());
    let mut e = Mat::zeros(k, m);
    let d = state.v.cols();
    let v = state.v.as_slice();
    let out = e.as_mut_slice();
    for (i, (&c, &s)) in cols.iter().zip(&scales).enumerate() {
        for r in 0..k {
            out[r * m + i] = s * v[r * d + c];
        }
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_schema, FieldDecl, RawTable};

    fn schema() -> FieldSchema {
        let csv = "a,b,x,label\np,q,1.0,1\nr,q,2.0,0\n";
        let t = RawTable::from_reader(csv.as_bytes(), b',').unwrap();
        build_schema(
            t.records(),
            &[
                FieldDecl::new("a", FieldKind::Categorical, 1),
                FieldDecl::new("b", FieldKind::Categorical, 1),
                FieldDecl::new("x", FieldKind::NumericRaw, 0),
            ],
            "label",
        )
        .unwrap()
    }

    #[test]
    fn offsets_cover_columns() {
        let s = schema();
        let st = init_embeddings(&s, 3, 1, 0.01).unwrap();
        assert!(st.offsets.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(st.offsets.last().unwrap() + st.cardinalities.last().unwrap(), st.v.cols());
    }

    #[test]
    fn zero_scale_and_determinism() {
        let s = schema();
        assert!(init_embeddings(&s, 4, 9, 0.0).unwrap().v.as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(init_embeddings(&s, 4, 9, 0.01).unwrap(), init_embeddings(&s, 4, 9, 0.01).unwrap());
        assert_ne!(init_embeddings(&s, 4, 9, 0.01).unwrap(), init_embeddings(&s, 4, 10, 0.01).unwrap());
        assert_eq!(init_embeddings(&s, 0, 9, 0.01), Err(EmbeddingError::ZeroDimension));
    }

    #[test]
    fn sample_variance_matches_scale() {
        let s = schema();
        let scale = 0.01;
        let st = init_embeddings(&s, 2000, 3, scale).unwrap();
        let x = st.v.as_slice();
        assert!(x.len() >= 10_000);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        assert!((var / (scale * scale) - 1.0).abs() < 0.2, "{var}");
    }

    #[test]
    fn selects_columns_and_scales_raw() {
        let s = schema();
        let st = init_embeddings(&s, 3, 5, 1.0).unwrap();
        let inst = SparseInstance {
            features: vec![FeatureValue::Index(1), FeatureValue::Index(0), FeatureValue::Value(2.0)],
            label: 0.0,
        };
        let e = embed(&inst, &st).unwrap();
        for r in 0..3 {
            assert_eq!(e[(r, 0)], st.v[(r, st.offsets[0] + 1)]);
            assert_eq!(e[(r, 1)], st.v[(r, st.offsets[1])]);
            assert_eq!(e[(r, 2)], 2.0 * st.v[(r, st.offsets[2])]);
        }
        let doubled = EmbeddingState {
            v: st.v.scale(2.0),
            ..st.clone()
        };
        assert_eq!(embed(&inst, &doubled).unwrap(), e.scale(2.0));
    }

    #[test]
    fn rejects_out_of_range() {
        let s = schema();
        let st = init_embeddings(&s, 3, 5, 1.0).unwrap();
        let inst = SparseInstance {
            features: vec![FeatureValue::Index(99), FeatureValue::Index(0), FeatureValue::Value(2.0)],
            label: 0.0,
        };
        assert!(matches!(embed(&inst, &st), Err(EmbeddingError::IndexOutOfRange { field: 0, .. })));
    }
}
