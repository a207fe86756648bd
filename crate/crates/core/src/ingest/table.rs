use std::path::Path;

use super::schema::{FieldSchema, SparseInstance};
use super::IngestError;

/// A fully buffered delimited file. Row numbers in errors are 1-based data
/// rows, the header excluded.
#[derive(Debug, Clone, Default)]
pub struct RawTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy)]
pub struct RawRecord<'a> {
    pub row: usize,
    pub columns: &'a [String],
    pub values: &'a [String],
}

impl RawTable {
    pub fn records(&self) -> impl Iterator<Item = RawRecord<'_>> + '_ {
        self.rows.iter().enumerate().map(move |(i, values)| RawRecord {
            row: i + 1,
            columns: &self.columns,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn from_reader<R: std::io::Read>(reader: R, delimiter: u8) -> Result<RawTable, IngestError> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .has_headers(true)
            .flexible(false)
            .from_reader(reader);
        let columns: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(RawTable { columns, rows })
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), IngestError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a delimited file; `.tsv` files are tab separated, everything else comma separated.
pub fn read_csv(path: &Path) -> Result<RawTable, IngestError> {
    let delimiter = match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") => b'\t',
        _ => b',',
    };
    let file = std::fs::File::open(path)?;
    RawTable::from_reader(std::io::BufReader::new(file), delimiter)
}

/// Encodes every row, splitting the work into `threads` contiguous chunks.
/// Output order always matches input order.
pub fn encode_table(table: &RawTable, schema: &FieldSchema, threads: usize) -> Result<Vec<SparseInstance>, IngestError> {
    let Some(first) = table.records().next() else {
        return Ok(Vec::new());
    };
    let (fields, label) = schema.column_positions(&first)?;
    let encode_range = |start: usize, end: usize| -> Result<Vec<SparseInstance>, IngestError> {
        table.rows[start..end]
            .iter()
            .enumerate()
            .map(|(i, values)| {
                let rec = RawRecord {
                    row: start + i + 1,
                    columns: &table.columns,
                    values,
                };
                schema.encode_mapped(&rec, &fields, label)
            })
            .collect()
    };
    let threads = threads.max(1).min(table.len());
    if threads == 1 {
        return encode_range(0, table.len());
    }
    let chunk = table.len().div_ceil(threads);
    let parts: Vec<Result<Vec<SparseInstance>, IngestError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let start = (t * chunk).min(table.len());
                let end = ((t + 1) * chunk).min(table.len());
                let f = &encode_range;
                s.spawn(move || f(start, end))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("encoder thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(table.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_schema, FieldDecl, FieldKind};

    #[test]
    fn parallel_encoding_matches_serial() {
        let mut csv = String::from("a,b,label\n");
        for i in 0..103 {
            csv.push_str(&format!("t{},{},{}\n", i % 7, i % 5, i % 2));
        }
        let t = RawTable::from_reader(csv.as_bytes(), b',').unwrap();
        let decls = vec![
            FieldDecl::new("a", FieldKind::Categorical, 1),
            FieldDecl::new("b", FieldKind::NumericBinned, 1),
        ];
        let s = build_schema(t.records(), &decls, "label").unwrap();
        let serial = encode_table(&t, &s, 1).unwrap();
        for threads in [2, 3, 8] {
            assert_eq!(encode_table(&t, &s, threads).unwrap(), serial);
        }
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let csv = "a,b,label\nx,y,1\nx,1\n";
        assert!(matches!(RawTable::from_reader(csv.as_bytes(), b','), Err(IngestError::Csv(_))));
    }
}
