use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::table::RawRecord;
use super::IngestError;

pub const RARE_TOKEN: &str = "<rare>";
pub const OOV_TOKEN: &str = "<oov>";
pub const MISSING_TOKEN: &str = "<missing>";
pub const NEGATIVE_TOKEN: &str = "neg";

const SCHEMA_HEADER: &str = "# mdl-schema v1";
const LOG_BIN_RULE: &str = "floor(ln(1+v)); v<0 -> neg";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Categorical,
    /// Numbers turned into tokens by [`log_bin_numeric`].
    NumericBinned,
    /// Numbers kept as a scalar multiplying a single embedding column.
    NumericRaw,
}

impl FieldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::Categorical => "categorical",
            FieldKind::NumericBinned => "numeric-binned",
            FieldKind::NumericRaw => "numeric-raw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "categorical" => Some(FieldKind::Categorical),
            "numeric-binned" => Some(FieldKind::NumericBinned),
            "numeric-raw" => Some(FieldKind::NumericRaw),
            _ => None,
        }
    }
}

/// A field requested for schema building.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldDecl {
    pub name: String,
    pub kind: FieldKind,
    pub min_count: u64,
}

impl FieldDecl {
    pub fn new(name: impl Into<String>, kind: FieldKind, min_count: u64) -> Self {
        FieldDecl {
            name: name.into(),
            kind,
            min_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub min_count: u64,
    /// Every token seen at build time. Kept tokens own their index; tokens
    /// below `min_count` all map to `rare_index`.
    pub vocab: HashMap<String, u32>,
    pub rare_index: Option<u32>,
    pub oov_index: u32,
    pub cardinality: usize,
}

impl FieldSpec {
    /// All vocabulary entries ordered by index then token, specials included.
    fn entries(&self) -> Vec<(String, u32)> {
        let mut out: Vec<(String, u32)> = self.vocab.iter().map(|(t, &i)| (escape_token(t), i)).collect();
        if let Some(r) = self.rare_index {
            out.push((RARE_TOKEN.to_string(), r));
        }
        if self.kind != FieldKind::NumericRaw {
            out.push((OOV_TOKEN.to_string(), self.oov_index));
        }
        out.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        out
    }

    fn lookup(&self, token: &str) -> u32 {
        self.vocab.get(token).copied().unwrap_or(self.oov_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSchema {
    pub fields: Vec<FieldSpec>,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureValue {
    Index(u32),
    Value(f64),
}

/// One instance: exactly one entry per field, plus its label.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseInstance {
    pub features: Vec<FeatureValue>,
    pub label: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogBin {
    Bin(u32),
    Negative,
}

impl LogBin {
    pub fn token(self) -> String {
        match self {
            LogBin::Bin(b) => b.to_string(),
            LogBin::Negative => NEGATIVE_TOKEN.to_string(),
        }
    }
}

/// `floor(ln(1 + v))` for `v ≥ 0`; negative values get their own token.
pub fn log_bin_numeric(v: f64) -> Result<LogBin, IngestError> {
    if !v.is_finite() {
        return Err(IngestError::NonFinite(v));
    }
    if v < 0.0 {
        return Ok(LogBin::Negative);
    }
    Ok(LogBin::Bin(v.ln_1p().floor() as u32))
}

fn parse_number(row: usize, field: &str, raw: &str) -> Result<f64, IngestError> {
    let v: f64 = raw.trim().parse().map_err(|_| IngestError::MalformedNumber {
        row,
        field: field.to_string(),
        value: raw.to_string(),
    })?;
    if !v.is_finite() {
        return Err(IngestError::MalformedNumber {
            row,
            field: field.to_string(),
            value: raw.to_string(),
        });
    }
    Ok(v)
}

/// Raw cell to vocabulary token. `None` for numeric-raw fields.
fn tokenize(kind: FieldKind, row: usize, field: &str, raw: &str) -> Result<Option<String>, IngestError> {
    if raw.is_empty() {
        return Ok(match kind {
            FieldKind::NumericRaw => None,
            _ => Some(MISSING_TOKEN.to_string()),
        });
    }
    match kind {
        FieldKind::Categorical => Ok(Some(raw.to_string())),
        FieldKind::NumericBinned => {
            let v = parse_number(row, field, raw)?;
            Ok(Some(log_bin_numeric(v)?.token()))
        }
        FieldKind::NumericRaw => {
            parse_number(row, field, raw)?;
            Ok(None)
        }
    }
}

/// Resolves each declared field (and the label) to its column position.
struct ColumnMap {
    fields: Vec<usize>,
    label: usize,
}

fn map_columns(record: &RawRecord<'_>, decls: &[FieldDecl], label: &str) -> Result<ColumnMap, IngestError> {
    let mut pos: HashMap<&str, usize> = HashMap::with_capacity(record.columns.len());
    for (i, c) in record.columns.iter().enumerate() {
        if c != label && !decls.iter().any(|d| &d.name == c) {
            return Err(IngestError::UnknownColumn {
                row: record.row,
                column: c.clone(),
            });
        }
        pos.insert(c.as_str(), i);
    }
    let find = |name: &str| {
        pos.get(name).copied().ok_or_else(|| IngestError::MissingColumn {
            row: record.row,
            column: name.to_string(),
        })
    };
    let fields = decls.iter().map(|d| find(&d.name)).collect::<Result<_, _>>()?;
    Ok(ColumnMap {
        fields,
        label: find(label)?,
    })
}

/// Builds vocabularies from token counts over `rows`.
///
/// Per categorical or binned field: tokens with count ≥ `min_count` get
/// indices `0..` by descending count (ties by token), then one rare slot if any
/// token fell below the threshold, then the out-of-vocabulary slot.
pub fn build_schema<'a, I>(rows: I, decls: &[FieldDecl], label: &str) -> Result<FieldSchema, IngestError>
where
    I: IntoIterator<Item = RawRecord<'a>>,
{
    let mut seen = HashSet::new();
    for d in decls {
        if !seen.insert(d.name.as_str()) || d.name == label {
            return Err(IngestError::DuplicateField(d.name.clone()));
        }
    }
    if decls.len() < 2 {
        return Err(IngestError::TooFewFields(decls.len()));
    }

    let mut counts: Vec<HashMap<String, u64>> = vec![HashMap::new(); decls.len()];
    let mut layout: Option<(Vec<String>, ColumnMap)> = None;
    let mut n_rows = 0usize;
    for record in rows {
        n_rows += 1;
        let same = layout.as_ref().is_some_and(|(cols, _)| cols.as_slice() == record.columns);
        if !same {
            layout = Some((record.columns.to_vec(), map_columns(&record, decls, label)?));
        }
        let (_, map) = layout.as_ref().expect("layout set above");
        for (f, d) in decls.iter().enumerate() {
            let raw = &record.values[map.fields[f]];
            if let Some(tok) = tokenize(d.kind, record.row, &d.name, raw)? {
                *counts[f].entry(tok).or_insert(0) += 1;
            }
        }
    }
    if n_rows == 0 {
        return Err(IngestError::EmptyInput);
    }

    let fields = decls
        .iter()
        .zip(counts)
        .map(|(d, counts)| {
            if d.kind == FieldKind::NumericRaw {
                return FieldSpec {
                    name: d.name.clone(),
                    kind: d.kind,
                    min_count: d.min_count,
                    vocab: HashMap::new(),
                    rare_index: None,
                    oov_index: 0,
                    cardinality: 1,
                };
            }
            let mut kept: Vec<(String, u64)> = Vec::new();
            let mut rare: Vec<String> = Vec::new();
            for (tok, c) in counts {
                if c >= d.min_count {
                    kept.push((tok, c));
                } else {
                    rare.push(tok);
                }
            }
            kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let mut vocab: HashMap<String, u32> = kept
                .into_iter()
                .enumerate()
                .map(|(i, (tok, _))| (tok, i as u32))
                .collect();
            let mut next = vocab.len() as u32;
            let rare_index = (!rare.is_empty()).then(|| {
                next += 1;
                next - 1
            });
            if let Some(r) = rare_index {
                vocab.extend(rare.into_iter().map(|t| (t, r)));
            }
            let oov_index = next;
            FieldSpec {
                name: d.name.clone(),
                kind: d.kind,
                min_count: d.min_count,
                cardinality: oov_index as usize + 1,
                vocab,
                rare_index,
                oov_index,
            }
        })
        .collect();

    Ok(FieldSchema {
        fields,
        label: label.to_string(),
    })
}

/// Encodes one record. Tokens rare at build time map to the field's rare
/// index, tokens never seen map to its out-of-vocabulary index.
pub fn encode_instance(record: &RawRecord<'_>, schema: &FieldSchema) -> Result<SparseInstance, IngestError> {
    let decls = schema.decls();
    let map = map_columns(record, &decls, &schema.label)?;
    schema.encode_mapped(record, &map.fields, map.label)
}

impl FieldSchema {
    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.cardinality).collect()
    }

    pub fn total_features(&self) -> usize {
        self.fields.iter().map(|f| f.cardinality).sum()
    }

    pub fn field_names(&self) -> Vec<String> {
        self.fields.iter().map(|f| f.name.clone()).collect()
    }

    pub fn decls(&self) -> Vec<FieldDecl> {
        self.fields
            .iter()
            .map(|f| FieldDecl::new(f.name.clone(), f.kind, f.min_count))
            .collect()
    }

    pub(crate) fn column_positions(&self, record: &RawRecord<'_>) -> Result<(Vec<usize>, usize), IngestError> {
        let map = map_columns(record, &self.decls(), &self.label)?;
        Ok((map.fields, map.label))
    }

    pub(crate) fn encode_mapped(&self, record: &RawRecord<'_>, fields: &[usize], label: usize) -> Result<SparseInstance, IngestError> {
        let mut features = Vec::with_capacity(self.fields.len());
        for (spec, &col) in self.fields.iter().zip(fields) {
            let raw = &record.values[col];
            let value = match spec.kind {
                FieldKind::NumericRaw => FeatureValue::Value(if raw.is_empty() {
                    0.0
                } else {
                    parse_number(record.row, &spec.name, raw)?
                }),
                kind => {
                    let tok = tokenize(kind, record.row, &spec.name, raw)?.expect("token for categorical kinds");
                    FeatureValue::Index(spec.lookup(&tok))
                }
            };
            features.push(value);
        }
        let raw_label = &record.values[label];
        let label_value: f64 = raw_label.trim().parse().map_err(|_| IngestError::MalformedLabel {
            row: record.row,
            value: raw_label.clone(),
        })?;
        if !label_value.is_finite() {
            return Err(IngestError::MalformedLabel {
                row: record.row,
                value: raw_label.clone(),
            });
        }
        Ok(SparseInstance {
            features,
            label: label_value,
        })
    }

    /// Validates that an instance matches this schema.
    pub fn check_instance(&self, inst: &SparseInstance) -> Result<(), IngestError> {
        if inst.features.len() != self.fields.len() {
            return Err(IngestError::Arity {
                expected: self.fields.len(),
                got: inst.features.len(),
            });
        }
        for (spec, v) in self.fields.iter().zip(&inst.features) {
            if let FeatureValue::Index(i) = v {
                if *i as usize >= spec.cardinality || spec.kind == FieldKind::NumericRaw {
                    return Err(IngestError::IndexOutOfRange {
                        field: spec.name.clone(),
                        index: *i as usize,
                        cardinality: spec.cardinality,
                    });
                }
            }
        }
        Ok(())
    }

    /// Canonical text form, also the schema file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{SCHEMA_HEADER}").unwrap();
        writeln!(out, "# label={}", self.label).unwrap();
        writeln!(out, "# log_bin={LOG_BIN_RULE}").unwrap();
        for f in &self.fields {
            let entries = f.entries();
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                escape_token(&f.name),
                f.kind.as_str(),
                f.min_count,
                f.cardinality,
                entries.len()
            )
            .unwrap();
            for (tok, idx) in entries {
                writeln!(out, "{tok}\t{idx}").unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<FieldSchema, IngestError> {
        let err = |line: usize, msg: String| IngestError::SchemaFormat { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();
        let mut label = None;
        while let Some(&(lineno, line)) = lines.peek() {
            let Some(rest) = line.strip_prefix('#') else { break };
            if let Some(l) = rest.trim().strip_prefix("label=") {
                label = Some(l.to_string());
            }
            let _ = lineno;
            lines.next();
        }
        let label = label.unwrap_or_else(|| "label".to_string());
        let mut fields = Vec::new();
        while let Some((lineno, line)) = lines.next() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 5 {
                return Err(err(lineno, format!("expected field line with 5 columns, got {}", parts.len())));
            }
            let kind = FieldKind::parse(parts[1]).ok_or_else(|| err(lineno, format!("unknown kind {:?}", parts[1])))?;
            let min_count: u64 = parts[2].parse().map_err(|_| err(lineno, "bad min_count".into()))?;
            let cardinality: usize = parts[3].parse().map_err(|_| err(lineno, "bad cardinality".into()))?;
            let n_entries: usize = parts[4].parse().map_err(|_| err(lineno, "bad entry count".into()))?;
            let name = unescape_token(parts[0]);
            let mut vocab = HashMap::new();
            let mut rare_index = None;
            let mut oov_index = None;
            if kind == FieldKind::NumericRaw {
                if cardinality != 1 || n_entries != 0 {
                    return Err(err(lineno, "numeric-raw fields have cardinality 1 and no entries".into()));
                }
                oov_index = Some(0);
            }
            let mut present = vec![false; cardinality];
            for _ in 0..n_entries {
                let (vl, vline) = lines.next().ok_or_else(|| err(lineno, "truncated vocabulary".into()))?;
                let (tok, idx) = vline
                    .rsplit_once('\t')
                    .ok_or_else(|| err(vl, "expected token<TAB>index".into()))?;
                let idx: u32 = idx.parse().map_err(|_| err(vl, "bad index".into()))?;
                if idx as usize >= cardinality {
                    return Err(err(vl, format!("index {idx} out of range")));
                }
                present[idx as usize] = true;
                match tok {
                    RARE_TOKEN => rare_index = Some(idx),
                    OOV_TOKEN => oov_index = Some(idx),
                    _ => {
                        if vocab.insert(unescape_token(tok), idx).is_some() {
                            return Err(err(vl, "repeated token".into()));
                        }
                    }
                }
            }
            if kind != FieldKind::NumericRaw && present.iter().any(|p| !p) {
                return Err(err(lineno, "vocabulary leaves an index unassigned".into()));
            }
            let oov_index = oov_index.ok_or_else(|| err(lineno, "missing <oov> entry".into()))?;
            fields.push(FieldSpec {
                name,
                kind,
                min_count,
                vocab,
                rare_index,
                oov_index,
                cardinality,
            });
        }
        let mut seen = HashSet::new();
        for f in &fields {
            if !seen.insert(f.name.clone()) {
                return Err(IngestError::DuplicateField(f.name.clone()));
            }
        }
        if fields.len() < 2 {
            return Err(IngestError::TooFewFields(fields.len()));
        }
        Ok(FieldSchema { fields, label })
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        let mut s = String::with_capacity(64);
        for b in digest.iter() {
            write!(s, "{b:02x}").unwrap();
        }
        s
    }

    /// Ordered token→index pairs of one field, for inspection.
    pub fn vocabulary(&self, field: usize) -> BTreeMap<u32, String> {
        let mut out = BTreeMap::new();
        for (tok, idx) in self.fields[field].entries() {
            out.entry(idx).or_insert(tok);
        }
        out
    }
}

fn escape_token(tok: &str) -> String {
    let mut out = String::with_capacity(tok.len());
    if tok.starts_with('<') {
        out.push('\\');
    }
    for ch in tok.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_token(tok: &str) -> String {
    let mut out = String::with_capacity(tok.len());
    let mut chars = tok.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}
