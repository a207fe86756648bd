//! Binary cache of encoded instances, keyed by the schema content hash.
//!
//! Layout, little-endian: magic, `u32` version, `u32` hash length and hash
//! bytes, `u32` field count, one kind byte per field (0 index, 1 value),
//! `u64` instance count, then per instance the field entries (`u32` or `f64`)
//! followed by the `f64` label.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::schema::{FeatureValue, FieldKind, FieldSchema, SparseInstance};
use super::IngestError;

pub const CACHE_MAGIC: &[u8; 4] = b"MDLC";
pub const CACHE_VERSION: u32 = 1;

fn cache_err(msg: impl Into<String>) -> IngestError {
    IngestError::Cache(msg.into())
}

pub fn write_cache(path: &Path, schema: &FieldSchema, data: &[SparseInstance]) -> Result<(), IngestError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
        let hash = schema.content_hash();
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&(hash.len() as u32).to_le_bytes())?;
        w.write_all(hash.as_bytes())?;
        w.write_all(&(schema.num_fields() as u32).to_le_bytes())?;
        for f in &schema.fields {
            w.write_all(&[u8::from(f.kind == FieldKind::NumericRaw)])?;
        }
        w.write_all(&(data.len() as u64).to_le_bytes())?;
        for inst in data {
            schema.check_instance(inst)?;
            for v in &inst.features {
                match *v {
                    FeatureValue::Index(i) => w.write_all(&i.to_le_bytes())?,
                    FeatureValue::Value(x) => w.write_all(&x.to_le_bytes())?,
                }
            }
            w.write_all(&inst.label.to_le_bytes())?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], IngestError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| cache_err("truncated file"))?;
    Ok(buf)
}

/// Reads a cache written for `schema`. A different schema hash is an error,
/// so stale caches are never silently reused.
pub fn read_cache(path: &Path, schema: &FieldSchema) -> Result<Vec<SparseInstance>, IngestError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    if &read_array::<4>(&mut r)? != CACHE_MAGIC {
        return Err(cache_err("bad magic"));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CACHE_VERSION {
        return Err(cache_err(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(read_array(&mut r)?) as usize;
    if hlen > 1024 {
        return Err(cache_err("implausible hash length"));
    }
    let mut hash = vec![0u8; hlen];
    r.read_exact(&mut hash).map_err(|_| cache_err("truncated file"))?;
    if hash != schema.content_hash().as_bytes() {
        return Err(cache_err("schema hash mismatch"));
    }
    let m = u32::from_le_bytes(read_array(&mut r)?) as usize;
    if m != schema.num_fields() {
        return Err(cache_err("field count mismatch"));
    }
    let mut raw = Vec::with_capacity(m);
    for f in &schema.fields {
        let flag = read_array::<1>(&mut r)?[0];
        if flag != u8::from(f.kind == FieldKind::NumericRaw) {
            return Err(cache_err("field kind mismatch"));
        }
        raw.push(flag == 1);
    }
    let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let mut out = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let mut features = Vec::with_capacity(m);
        for &is_raw in &raw {
            features.push(if is_raw {
                FeatureValue::Value(f64::from_le_bytes(read_array(&mut r)?))
            } else {
                FeatureValue::Index(u32::from_le_bytes(read_array(&mut r)?))
            });
        }
        let label = f64::from_le_bytes(read_array(&mut r)?);
        let inst = SparseInstance { features, label };
        schema.check_instance(&inst)?;
        out.push(inst);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(cache_err("trailing bytes"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_schema, encode_table, FieldDecl, RawTable};

    #[test]
    fn round_trip_and_hash_guard() {
        let csv = "a,b,label\nx,1.5,1\ny,,0\nx,-2,1\n";
        let t = RawTable::from_reader(csv.as_bytes(), b',').unwrap();
        let decls = vec![
            FieldDecl::new("a", FieldKind::Categorical, 1),
            FieldDecl::new("b", FieldKind::NumericRaw, 0),
        ];
        let s = build_schema(t.records(), &decls, "label").unwrap();
        let data = encode_table(&t, &s, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        write_cache(&p, &s, &data).unwrap();
        assert_eq!(read_cache(&p, &s).unwrap(), data);

        let other = build_schema(
            t.records(),
            &[FieldDecl::new("a", FieldKind::Categorical, 2), decls[1].clone()],
            "label",
        )
        .unwrap();
        assert!(matches!(read_cache(&p, &other), Err(IngestError::Cache(_))));
    }
}
