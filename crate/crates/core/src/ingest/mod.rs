//! Raw tabular data to field-indexed sparse instances.
//!
//! A [`FieldSchema`] maps every raw token of every field to a feature index
//! that is contiguous within the field. Tokens seen fewer than `min_count`
//! times in the data the schema is built from collapse into one rare slot,
//! and each categorical field reserves an out-of-vocabulary slot for tokens
//! never seen at build time.

mod cache;
mod schema;
mod split;
mod table;

pub use cache::{read_cache, write_cache, CACHE_MAGIC, CACHE_VERSION};
pub use schema::{
    build_schema, encode_instance, log_bin_numeric, FieldDecl, FieldKind, FieldSchema, FieldSpec, LogBin,
    FeatureValue, SparseInstance, MISSING_TOKEN, NEGATIVE_TOKEN, OOV_TOKEN, RARE_TOKEN,
};
pub use split::{split_and_batch, Batches, DatasetSplit, SplitRatios};
pub use table::{encode_table, read_csv, RawRecord, RawTable};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("input has no data rows")]
    EmptyInput,
    #[error("duplicate field name {0:?}")]
    DuplicateField(String),
    #[error("at least two fields are required, got {0}")]
    TooFewFields(usize),
    #[error("row {row}: unknown column {column:?}")]
    UnknownColumn { row: usize, column: String },
    #[error("row {row}: missing column {column:?}")]
    MissingColumn { row: usize, column: String },
    #[error("row {row}: field {field:?}: malformed number {value:?}")]
    MalformedNumber { row: usize, field: String, value: String },
    #[error("row {row}: malformed label {value:?}")]
    MalformedLabel { row: usize, value: String },
    #[error("numeric value must be finite, got {0}")]
    NonFinite(f64),
    #[error("feature index {index} out of range for field {field:?} with {cardinality} features")]
    IndexOutOfRange { field: String, index: usize, cardinality: usize },
    #[error("instance has {got} entries but schema has {expected} fields")]
    Arity { expected: usize, got: usize },
    #[error("schema file line {line}: {msg}")]
    SchemaFormat { line: usize, msg: String },
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("split {0} is empty")]
    EmptySplit(&'static str),
    #[error("cache: {0}")]
    Cache(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
