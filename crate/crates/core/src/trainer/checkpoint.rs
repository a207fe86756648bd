//! Checkpoint file.
//!
//! Little-endian throughout: magic `MDL1`, `u32` format version, a
//! length-prefixed UTF-8 header of `key=value` lines (format facts, schema
//! hash, model shape, best validation objective, then the training config),
//! the length-prefixed schema text, the parameter blocks as length-prefixed
//! `f64` arrays in the order `V`, `W^(0)`, `Φ` pairs, each layer's weights
//! then bias, and finally the optimizer: kind byte, `u64` step, and its
//! statistic blocks.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::backbone::{num_pairs, BackboneParams, Dense};
use crate::embedding::EmbeddingState;
use crate::ingest::FieldSchema;
use crate::linalg::Mat;
use crate::model::Model;

use super::config::{OptimizerKind, TrainConfig};
use super::optim::OptimizerState;
use super::TrainError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDL1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub schema: FieldSchema,
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    /// Validation objective of the kept parameters.
    pub best_val: f64,
    pub best_epoch: usize,
}

fn err(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

fn put_block(out: &mut Vec<u8>, data: &[f64]) {
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| err("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<&'a str, TrainError> {
        let n = self.u64()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| err("header is not UTF-8"))
    }

    fn block(&mut self, expected: usize) -> Result<Vec<f64>, TrainError> {
        let n = self.u64()? as usize;
        if n != expected {
            return Err(err(format!("block holds {n} values, expected {expected}")));
        }
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| err("block too large"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl ModelCheckpoint {
    fn header(&self) -> String {
        let mut h = format!(
            "format={CHECKPOINT_VERSION}\nschema_hash={}\nfields={}\nfeatures={}\nbest_epoch={}\nbest_val={}\n",
            self.schema.content_hash(),
            self.model.num_fields(),
            self.model.embedding.v.cols(),
            self.best_epoch,
            self.best_val,
        );
        h.push_str(&self.config.to_text());
        h
    }

    pub fn schema_hash(&self) -> String {
        self.schema.content_hash()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for text in [self.header(), self.schema.to_text()] {
            out.extend_from_slice(&(text.len() as u64).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        for b in self.model.blocks() {
            put_block(&mut out, b);
        }
        out.push(match self.optimizer.kind {
            OptimizerKind::Adam => 0,
            OptimizerKind::Adagrad => 1,
        });
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        for b in self.optimizer.first.iter().chain(&self.optimizer.second) {
            put_block(&mut out, b);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(err("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported format version {version}")));
        }
        let header = r.text()?;
        let schema_text = r.text()?;
        let schema = FieldSchema::from_text(schema_text).map_err(|e| err(e.to_string()))?;

        let mut facts: HashMap<&str, &str> = HashMap::new();
        let mut config = TrainConfig::default();
        for line in header.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("bad header line {line:?}")))?;
            match k {
                "format" | "schema_hash" | "fields" | "features" | "best_epoch" | "best_val" => {
                    facts.insert(k, v);
                }
                _ => config.set(k, v)?,
            }
        }
        let fact = |k: &str| facts.get(k).copied().ok_or_else(|| err(format!("header lacks {k}")));
        if fact("schema_hash")? != schema.content_hash() {
            return Err(err("embedded schema does not match its hash"));
        }
        let best_val: f64 = fact("best_val")?.parse().map_err(|_| err("bad best_val"))?;
        let best_epoch: usize = fact("best_epoch")?.parse().map_err(|_| err("bad best_epoch"))?;

        let (m, k, d) = (schema.num_fields(), config.k, schema.total_features());
        let v = Mat::from_vec(k, d, r.block(k * d)?).map_err(|e| err(e.to_string()))?;
        let w0 = Mat::from_vec(m, m, r.block(m * m)?).map_err(|e| err(e.to_string()))?;
        let mut phi = Vec::with_capacity(num_pairs(m));
        for _ in 0..num_pairs(m) {
            phi.push(Mat::from_vec(k, k, r.block(k * k)?).map_err(|e| err(e.to_string()))?);
        }
        let mut layers = Vec::new();
        let mut fan_in = crate::backbone::input_width(m);
        for &width in config.hidden.iter().chain(std::iter::once(&1)) {
            let w = Mat::from_vec(fan_in, width, r.block(fan_in * width)?).map_err(|e| err(e.to_string()))?;
            let b = r.block(width)?;
            layers.push(Dense { w, b });
            fan_in = width;
        }
        let embedding = EmbeddingState::from_parts(&schema, v).map_err(|e| err(e.to_string()))?;
        let model = Model {
            embedding,
            w0,
            backbone: BackboneParams {
                phi,
                layers,
                task: config.task,
            },
        };

        let kind = match r.u8()? {
            0 => OptimizerKind::Adam,
            1 => OptimizerKind::Adagrad,
            other => return Err(err(format!("unknown optimizer tag {other}"))),
        };
        let step = r.u64()?;
        let sizes = model.block_sizes();
        let mut read_all = || sizes.iter().map(|&n| r.block(n)).collect::<Result<Vec<_>, _>>();
        let first = if kind == OptimizerKind::Adam { read_all()? } else { Vec::new() };
        let second = read_all()?;
        if r.pos != buf.len() {
            return Err(err("trailing bytes"));
        }
        for i in 0..m {
            if model.w0[(i, i)] != -1.0 {
                return Err(err("shared dependency matrix diagonal is not -1"));
            }
        }
        Ok(ModelCheckpoint {
            schema,
            config,
            model,
            optimizer: OptimizerState { kind, step, first, second },
            best_val,
            best_epoch,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
