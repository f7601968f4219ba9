//! Dataset ingestion, imputation, splitting, and reversible mixed-type
//! encoding shared by every downstream module.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BcrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnKind {
    Numeric,
    Categorical(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Binary,
    Multiclass(usize),
    Regression,
}

impl Task {
    pub fn is_classification(&self) -> bool {
        !matches!(self, Task::Regression)
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self {
            Task::Binary => Some(2),
            Task::Multiclass(n) => Some(*n),
            Task::Regression => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub name: String,
    pub task: Task,
    /// Category tokens for classification targets, in fixed class-index order.
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<Column>,
    pub target: TargetSpec,
}

impl Schema {
    pub fn new(columns: Vec<Column>, target: TargetSpec) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for c in &columns {
            if !seen.insert(c.name.clone()) {
                return Err(BcrError::schema(format!("duplicate column name {:?}", c.name)));
            }
            if let ColumnKind::Categorical(cats) = &c.kind {
                if cats.len() < 2 {
                    return Err(BcrError::schema(format!(
                        "categorical column {:?} must list at least 2 categories",
                        c.name
                    )));
                }
            }
        }
        if seen.contains(&target.name) {
            return Err(BcrError::schema(format!(
                "target {:?} collides with a feature column",
                target.name
            )));
        }
        match target.task {
            Task::Binary if target.classes.len() != 2 => {
                return Err(BcrError::schema("binary target must list exactly 2 classes"))
            }
            Task::Multiclass(n) if n < 3 => {
                return Err(BcrError::schema("multiclass arity must be >= 3"))
            }
            Task::Multiclass(n) if target.classes.len() != n => {
                return Err(BcrError::schema("multiclass class list does not match arity"))
            }
            _ => {}
        }
        Ok(Schema { columns, target })
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.target.task.n_classes()
    }
}

/// One feature cell. Categories are stored as indices into the schema's
/// category list for the column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Num(f64),
    Cat(usize),
    Missing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub cells: Vec<Cell>,
    pub target: Cell,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub schema: Schema,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Class index per row; errors on a regression table.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        self.rows
            .iter()
            .map(|r| match r.target {
                Cell::Cat(c) => Ok(c),
                _ => Err(BcrError::schema("expected a classification target")),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SplitSet {
    pub train: Table,
    pub validation: Table,
    pub test: Table,
    pub seed: u64,
}

const MISSING_TOKENS: [&str; 2] = ["", "NA"];

pub fn load_csv(path: &Path, schema: &Schema) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();

    let mut expected: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
    expected.push(schema.target.name.as_str());
    if headers.len() != expected.len() {
        return Err(BcrError::schema(format!(
            "header has {} columns, schema expects {}",
            headers.len(),
            expected.len()
        )));
    }
    // Column order in the file may differ from the schema; resolve by name.
    let mut position = Vec::with_capacity(expected.len());
    for name in &expected {
        let pos = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| BcrError::schema(format!("column {name:?} missing from header")))?;
        position.push(pos);
    }

    let cat_lookup: Vec<Option<HashMap<&str, usize>>> = schema
        .columns
        .iter()
        .map(|c| match &c.kind {
            ColumnKind::Numeric => None,
            ColumnKind::Categorical(cats) => Some(
                cats.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect(),
            ),
        })
        .collect();
    let target_lookup: HashMap<&str, usize> = schema
        .target
        .classes
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();

    let mut rows = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let mut cells = Vec::with_capacity(schema.columns.len());
        for (j, col) in schema.columns.iter().enumerate() {
            let raw = record.get(position[j]).unwrap_or("").trim();
            cells.push(parse_cell(raw, col, &cat_lookup[j], row_idx)?);
        }
        let raw = record.get(position[schema.columns.len()]).unwrap_or("").trim();
        let target = parse_target(raw, &schema.target, &target_lookup, row_idx)?;
        rows.push(Row { cells, target });
    }
    Ok(Table { schema: schema.clone(), rows })
}

fn parse_cell(
    raw: &str,
    col: &Column,
    lookup: &Option<HashMap<&str, usize>>,
    row: usize,
) -> Result<Cell> {
    if MISSING_TOKENS.contains(&raw) {
        return Ok(Cell::Missing);
    }
    match &col.kind {
        ColumnKind::Numeric => raw.parse::<f64>().map(Cell::Num).map_err(|_| BcrError::Parse {
            row,
            column: col.name.clone(),
            message: format!("cannot parse {raw:?} as numeric"),
        }),
        ColumnKind::Categorical(_) => lookup
            .as_ref()
            .unwrap()
            .get(raw)
            .map(|&i| Cell::Cat(i))
            .ok_or_else(|| BcrError::Parse {
                row,
                column: col.name.clone(),
                message: format!("unknown category token {raw:?}"),
            }),
    }
}

fn parse_target(
    raw: &str,
    spec: &TargetSpec,
    lookup: &HashMap<&str, usize>,
    row: usize,
) -> Result<Cell> {
    if MISSING_TOKENS.contains(&raw) {
        return Ok(Cell::Missing);
    }
    match spec.task {
        Task::Regression => raw.parse::<f64>().map(Cell::Num).map_err(|_| BcrError::Parse {
            row,
            column: spec.name.clone(),
            message: format!("cannot parse {raw:?} as numeric target"),
        }),
        _ => lookup.get(raw).map(|&i| Cell::Cat(i)).ok_or_else(|| BcrError::Parse {
            row,
            column: spec.name.clone(),
            message: format!("unknown target class {raw:?}"),
        }),
    }
}

/// Fill missing cells with statistics computed from `reference` only:
/// median for numerics, mode (first-seen tie break) for categoricals.
pub fn impute(table: &Table, reference: &Table) -> Result<Table> {
    let n_cols = table.schema.columns.len();
    let mut fills = Vec::with_capacity(n_cols);
    for j in 0..n_cols {
        let has_missing = table.rows.iter().any(|r| r.cells[j] == Cell::Missing);
        if !has_missing {
            fills.push(None);
            continue;
        }
        fills.push(Some(column_fill(reference, j)?));
    }
    let target_fill = if table.rows.iter().any(|r| r.target == Cell::Missing) {
        Some(target_fill_value(reference)?)
    } else {
        None
    };

    let mut out = table.clone();
    for row in &mut out.rows {
        for (j, cell) in row.cells.iter_mut().enumerate() {
            if *cell == Cell::Missing {
                *cell = fills[j].unwrap();
            }
        }
        if row.target == Cell::Missing {
            row.target = target_fill.unwrap();
        }
    }
    Ok(out)
}

fn column_fill(reference: &Table, j: usize) -> Result<Cell> {
    match &reference.schema.columns[j].kind {
        ColumnKind::Numeric => {
            let mut vals: Vec<f64> = reference
                .rows
                .iter()
                .filter_map(|r| match r.cells[j] {
                    Cell::Num(v) => Some(v),
                    _ => None,
                })
                .collect();
            if vals.is_empty() {
                return Err(BcrError::Empty(format!(
                    "column {:?} entirely missing in reference",
                    reference.schema.columns[j].name
                )));
            }
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let m = vals.len();
            let median = if m % 2 == 1 {
                vals[m / 2]
            } else {
                0.5 * (vals[m / 2 - 1] + vals[m / 2])
            };
            Ok(Cell::Num(median))
        }
        ColumnKind::Categorical(cats) => {
            let mut counts = vec![0usize; cats.len()];
            let mut first_seen = vec![usize::MAX; cats.len()];
            for (i, r) in reference.rows.iter().enumerate() {
                if let Cell::Cat(c) = r.cells[j] {
                    counts[c] += 1;
                    if first_seen[c] == usize::MAX {
                        first_seen[c] = i;
                    }
                }
            }
            let best = (0..cats.len())
                .filter(|&c| counts[c] > 0)
                .min_by_key(|&c| (std::cmp::Reverse(counts[c]), first_seen[c]))
                .ok_or_else(|| {
                    BcrError::Empty(format!(
                        "column {:?} entirely missing in reference",
                        reference.schema.columns[j].name
                    ))
                })?;
            Ok(Cell::Cat(best))
        }
    }
}

fn target_fill_value(reference: &Table) -> Result<Cell> {
    match reference.schema.target.task {
        Task::Regression => {
            let mut vals: Vec<f64> = reference
                .rows
                .iter()
                .filter_map(|r| match r.target {
                    Cell::Num(v) => Some(v),
                    _ => None,
                })
                .collect();
            if vals.is_empty() {
                return Err(BcrError::Empty("target entirely missing in reference".into()));
            }
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let m = vals.len();
            Ok(Cell::Num(if m % 2 == 1 {
                vals[m / 2]
            } else {
                0.5 * (vals[m / 2 - 1] + vals[m / 2])
            }))
        }
        _ => {
            let n = reference.schema.n_classes().unwrap();
            let mut counts = vec![0usize; n];
            let mut first_seen = vec![usize::MAX; n];
            for (i, r) in reference.rows.iter().enumerate() {
                if let Cell::Cat(c) = r.target {
                    counts[c] += 1;
                    if first_seen[c] == usize::MAX {
                        first_seen[c] = i;
                    }
                }
            }
            let best = (0..n)
                .filter(|&c| counts[c] > 0)
                .min_by_key(|&c| (std::cmp::Reverse(counts[c]), first_seen[c]))
                .ok_or_else(|| BcrError::Empty("target entirely missing in reference".into()))?;
            Ok(Cell::Cat(best))
        }
    }
}

/// Deterministic 90/5/5-style split. Classification tasks are stratified per
/// class; a class with fewer members than splits falls back to unstratified.
/// Val/test sizes are floored, the remainder goes to train.
pub fn split(table: &Table, ratios: (f64, f64, f64), seed: u64) -> Result<SplitSet> {
    let n = table.n_rows();
    if n < 20 {
        return Err(BcrError::Empty(format!("need at least 20 rows to split, got {n}")));
    }
    let (r_train, r_val, r_test) = ratios;
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(BcrError::config("split ratios must sum to 1"));
    }

    let stratified = if table.schema.target.task.is_classification() {
        let labels = table.class_labels()?;
        let n_classes = table.schema.n_classes().unwrap();
        let mut per_class = vec![0usize; n_classes];
        for &c in &labels {
            per_class[c] += 1;
        }
        let viable = per_class.iter().all(|&c| c == 0 || c >= 3);
        if !viable {
            eprintln!("warning: a class has fewer members than splits; falling back to unstratified");
        }
        viable
    } else {
        false
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign = vec![0u8; n]; // 0 train, 1 val, 2 test

    let groups: Vec<Vec<usize>> = if stratified {
        let labels = table.class_labels()?;
        let n_classes = table.schema.n_classes().unwrap();
        let mut groups = vec![Vec::new(); n_classes];
        for (i, &c) in labels.iter().enumerate() {
            groups[c].push(i);
        }
        groups.into_iter().filter(|g| !g.is_empty()).collect()
    } else {
        vec![(0..n).collect()]
    };

    // Global floored val/test targets, apportioned to strata by largest
    // remainder so the overall sizes match the unstratified rule.
    let target_val = (n as f64 * r_val).floor() as usize;
    let target_test = (n as f64 * r_test).floor() as usize;
    let sizes: Vec<usize> = groups.iter().map(|g| g.len()).collect();
    let val_quota = apportion(&sizes, target_val);
    let test_quota = apportion(&sizes, target_test);

    for (gi, group) in groups.iter().enumerate() {
        let mut group = group.clone();
        group.shuffle(&mut rng);
        let n_val = val_quota[gi].min(group.len());
        let n_test = test_quota[gi].min(group.len() - n_val);
        for (pos, &i) in group.iter().enumerate() {
            assign[i] = if pos < n_val {
                1
            } else if pos < n_val + n_test {
                2
            } else {
                0
            };
        }
    }

    let pick = |which: u8| Table {
        schema: table.schema.clone(),
        rows: table
            .rows
            .iter()
            .zip(&assign)
            .filter(|(_, &a)| a == which)
            .map(|(r, _)| r.clone())
            .collect(),
    };
    Ok(SplitSet {
        train: pick(0),
        validation: pick(1),
        test: pick(2),
        seed,
    })
}

/// Largest-remainder apportionment of `total` slots across strata of the
/// given sizes; remainder ties go to the lower stratum index.
pub(crate) fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let total = total.min(n);
    let quotas: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(assigned);
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if counts[i] < sizes[i] {
            counts[i] += 1;
            remaining -= 1;
        }
    }
    counts
}

/// Where each feature column lands in the encoded matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BlockLayout {
    Numeric { column: usize, offset: usize, mean: f64, std: f64 },
    OneHot { column: usize, offset: usize, width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub schema: Schema,
    pub blocks: Vec<BlockLayout>,
    pub encoded_dim: usize,
    /// Min-max scaler for regression targets, fitted on train.
    pub target_range: Option<(f64, f64)>,
}

/// Target vector of an encoded matrix: class indices, soft class
/// distributions, or scaled regression values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Classes(Vec<usize>),
    Soft(Array2<f64>),
    Values(Vec<f64>),
}

impl Target {
    pub fn len(&self) -> usize {
        match self {
            Target::Classes(v) => v.len(),
            Target::Soft(m) => m.nrows(),
            Target::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Target {
        match self {
            Target::Classes(v) => Target::Classes(idx.iter().map(|&i| v[i]).collect()),
            Target::Values(v) => Target::Values(idx.iter().map(|&i| v[i]).collect()),
            Target::Soft(m) => {
                let mut out = Array2::zeros((idx.len(), m.ncols()));
                for (k, &i) in idx.iter().enumerate() {
                    out.row_mut(k).assign(&m.row(i));
                }
                Target::Soft(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedMatrix {
    pub values: Array2<f64>,
    pub target: Target,
}

impl EncodedMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

pub fn fit_encoder(train: &Table) -> Result<Encoder> {
    if train.rows.is_empty() {
        return Err(BcrError::Empty("cannot fit encoder on an empty table".into()));
    }
    if train
        .rows
        .iter()
        .any(|r| r.cells.iter().any(|c| *c == Cell::Missing) || r.target == Cell::Missing)
    {
        return Err(BcrError::schema("impute before fitting the encoder"));
    }
    let mut blocks = Vec::new();
    let mut offset = 0usize;
    for (j, col) in train.schema.columns.iter().enumerate() {
        match &col.kind {
            ColumnKind::Numeric => {
                let vals: Vec<f64> = train
                    .rows
                    .iter()
                    .map(|r| match r.cells[j] {
                        Cell::Num(v) => v,
                        _ => unreachable!(),
                    })
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                let std = var.sqrt();
                // Zero-variance columns clamp sigma to 1 so encoding stays defined.
                let std = if std > 0.0 { std } else { 1.0 };
                blocks.push(BlockLayout::Numeric { column: j, offset, mean, std });
                offset += 1;
            }
            ColumnKind::Categorical(cats) => {
                blocks.push(BlockLayout::OneHot { column: j, offset, width: cats.len() });
                offset += cats.len();
            }
        }
    }
    let target_range = match train.schema.target.task {
        Task::Regression => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for r in &train.rows {
                if let Cell::Num(v) = r.target {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            let span = if hi > lo { (lo, hi) } else { (lo, lo + 1.0) };
            Some(span)
        }
        _ => None,
    };
    Ok(Encoder {
        schema: train.schema.clone(),
        blocks,
        encoded_dim: offset,
        target_range,
    })
}

pub fn encode(table: &Table, encoder: &Encoder) -> Result<EncodedMatrix> {
    if table.schema != encoder.schema {
        return Err(BcrError::schema("table schema does not match encoder schema"));
    }
    let n = table.n_rows();
    let mut values = Array2::zeros((n, encoder.encoded_dim));
    for (i, row) in table.rows.iter().enumerate() {
        for block in &encoder.blocks {
            match *block {
                BlockLayout::Numeric { column, offset, mean, std } => match row.cells[column] {
                    Cell::Num(v) => values[[i, offset]] = (v - mean) / std,
                    _ => return Err(BcrError::schema("missing cell during encode")),
                },
                BlockLayout::OneHot { column, offset, width: _ } => match row.cells[column] {
                    Cell::Cat(c) => values[[i, offset + c]] = 1.0,
                    _ => return Err(BcrError::schema("missing cell during encode")),
                },
            }
        }
    }
    let target = match encoder.schema.target.task {
        Task::Regression => {
            let (lo, hi) = encoder.target_range.unwrap();
            Target::Values(
                table
                    .rows
                    .iter()
                    .map(|r| match r.target {
                        Cell::Num(v) => (v - lo) / (hi - lo),
                        _ => f64::NAN,
                    })
                    .collect(),
            )
        }
        _ => Target::Classes(
            table
                .rows
                .iter()
                .map(|r| match r.target {
                    Cell::Cat(c) => c,
                    _ => 0,
                })
                .collect(),
        ),
    };
    Ok(EncodedMatrix { values, target })
}

/// Invert `encode`. One-hot blocks of possibly-continuous synthetic rows are
/// decoded by argmax; soft targets by their modal class.
pub fn decode(matrix: &EncodedMatrix, encoder: &Encoder) -> Result<Table> {
    if matrix.dim() != encoder.encoded_dim {
        return Err(BcrError::DimMismatch { expected: encoder.encoded_dim, got: matrix.dim() });
    }
    let n = matrix.n_rows();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut cells = vec![Cell::Missing; encoder.schema.columns.len()];
        for block in &encoder.blocks {
            match *block {
                BlockLayout::Numeric { column, offset, mean, std } => {
                    cells[column] = Cell::Num(matrix.values[[i, offset]] * std + mean);
                }
                BlockLayout::OneHot { column, offset, width } => {
                    let mut best = 0usize;
                    let mut best_v = f64::NEG_INFINITY;
                    for k in 0..width {
                        let v = matrix.values[[i, offset + k]];
                        if v > best_v {
                            best_v = v;
                            best = k;
                        }
                    }
                    cells[column] = Cell::Cat(best);
                }
            }
        }
        let target = match (&matrix.target, encoder.schema.target.task) {
            (Target::Values(v), Task::Regression) => {
                let (lo, hi) = encoder.target_range.unwrap();
                Cell::Num(v[i] * (hi - lo) + lo)
            }
            (Target::Classes(v), _) => Cell::Cat(v[i]),
            (Target::Soft(m), _) => {
                let row = m.row(i);
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for (k, &v) in row.iter().enumerate() {
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                Cell::Cat(best)
            }
            _ => return Err(BcrError::schema("target kind does not match task")),
        };
        rows.push(Row { cells, target });
    }
    Ok(Table { schema: encoder.schema.clone(), rows })
}

pub fn write_table_csv(table: &Table, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = table.schema.columns.iter().map(|c| c.name.as_str()).collect();
    header.push(table.schema.target.name.as_str());
    w.write_record(&header)?;
    for row in &table.rows {
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        for (j, cell) in row.cells.iter().enumerate() {
            record.push(cell_to_string(cell, &table.schema.columns[j].kind));
        }
        record.push(match row.target {
            Cell::Num(v) => format!("{v}"),
            Cell::Cat(c) => table.schema.target.classes[c].clone(),
            Cell::Missing => String::new(),
        });
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

fn cell_to_string(cell: &Cell, kind: &ColumnKind) -> String {
    match (cell, kind) {
        (Cell::Num(v), _) => format!("{v}"),
        (Cell::Cat(c), ColumnKind::Categorical(cats)) => cats[*c].clone(),
        _ => String::new(),
    }
}

const MATRIX_MAGIC: &[u8; 4] = b"BCRM";

/// Flat binary matrix cache: 16-byte header (magic "BCRM", u32 rows,
/// u32 cols, u32 reserved), then row-major little-endian f64.
pub fn write_matrix<W: Write>(w: &mut W, m: &Array2<f64>) -> Result<()> {
    write_matrix_with_magic(w, m, MATRIX_MAGIC)
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<Array2<f64>> {
    read_matrix_with_magic(r, MATRIX_MAGIC)
}

pub(crate) fn write_matrix_with_magic<W: Write>(
    w: &mut W,
    m: &Array2<f64>,
    magic: &[u8; 4],
) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&(m.nrows() as u32).to_le_bytes())?;
    w.write_all(&(m.ncols() as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_matrix_with_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<Array2<f64>> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[0..4] != magic {
        return Err(BcrError::Format(format!(
            "bad magic: expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| BcrError::Format(format!("matrix shape: {e}")))
}

/// Per-class frequencies of a classification table's train labels.
pub fn class_frequencies(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &c in labels {
        counts[c] += 1;
    }
    counts.iter().map(|&c| c as f64 / labels.len() as f64).collect()
}

pub fn targets_as_array(target: &Target, n_classes: usize) -> Array2<f64> {
    match target {
        Target::Soft(m) => m.clone(),
        Target::Classes(v) => {
            let mut out = Array2::zeros((v.len(), n_classes));
            for (i, &c) in v.iter().enumerate() {
                out[[i, c]] = 1.0;
            }
            out
        }
        Target::Values(v) => {
            Array2::from_shape_vec((v.len(), 1), v.clone()).unwrap()
        }
    }
}

pub fn values_as_array(target: &Target) -> Array1<f64> {
    match target {
        Target::Values(v) => Array1::from_vec(v.clone()),
        Target::Classes(v) => Array1::from_vec(v.iter().map(|&c| c as f64).collect()),
        Target::Soft(m) => {
            Array1::from_vec((0..m.nrows()).map(|i| argmax_row(&m.row(i).to_vec()) as f64).collect())
        }
    }
}

pub(crate) fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (k, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    pub(crate) fn toy_schema() -> Schema {
        Schema::new(
            vec![
                Column { name: "x".into(), kind: ColumnKind::Numeric },
                Column {
                    name: "color".into(),
                    kind: ColumnKind::Categorical(vec!["a".into(), "b".into(), "c".into()]),
                },
            ],
            TargetSpec {
                name: "y".into(),
                task: Task::Binary,
                classes: vec!["no".into(), "yes".into()],
            },
        )
        .unwrap()
    }

    fn toy_table(n: usize) -> Table {
        let schema = toy_schema();
        let rows = (0..n)
            .map(|i| Row {
                cells: vec![Cell::Num(i as f64), Cell::Cat(i % 3)],
                target: Cell::Cat(i % 2),
            })
            .collect();
        Table { schema, rows }
    }

    #[test]
    fn load_csv_parses_and_flags_bad_numeric() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "x,color,y\n1.5,a,no\n,b,yes\nabc,c,no\n").unwrap();
        let err = load_csv(&path, &toy_schema()).unwrap_err();
        match err {
            BcrError::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "x");
            }
            other => panic!("unexpected error {other:?}"),
        }

        std::fs::write(&path, "x,color,y\n1.5,a,no\nNA,b,yes\n").unwrap();
        let t = load_csv(&path, &toy_schema()).unwrap();
        assert_eq!(t.n_rows(), 2);
        assert_eq!(t.rows[1].cells[0], Cell::Missing);
    }

    #[test]
    fn load_csv_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "x,color,y\n").unwrap();
        let t = load_csv(&path, &toy_schema()).unwrap();
        assert_eq!(t.n_rows(), 0);
        assert!(split(&t, (0.9, 0.05, 0.05), 0).is_err());
    }

    #[test]
    fn impute_median_and_mode() {
        let schema = toy_schema();
        let reference = Table {
            schema: schema.clone(),
            rows: vec![
                Row { cells: vec![Cell::Num(1.0), Cell::Cat(0)], target: Cell::Cat(0) },
                Row { cells: vec![Cell::Num(2.0), Cell::Cat(0)], target: Cell::Cat(0) },
                Row { cells: vec![Cell::Num(100.0), Cell::Cat(1)], target: Cell::Cat(1) },
            ],
        };
        let holed = Table {
            schema,
            rows: vec![Row { cells: vec![Cell::Missing, Cell::Missing], target: Cell::Cat(0) }],
        };
        let filled = impute(&holed, &reference).unwrap();
        assert_eq!(filled.rows[0].cells[0], Cell::Num(2.0));
        assert_eq!(filled.rows[0].cells[1], Cell::Cat(0));
    }

    #[test]
    fn impute_identity_when_complete() {
        let t = toy_table(6);
        let out = impute(&t, &t).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn mode_tie_breaks_first_seen() {
        let schema = toy_schema();
        // b first, then a: tie of 2-2 resolves to b.
        let reference = Table {
            schema: schema.clone(),
            rows: vec![
                Row { cells: vec![Cell::Num(0.0), Cell::Cat(1)], target: Cell::Cat(0) },
                Row { cells: vec![Cell::Num(0.0), Cell::Cat(0)], target: Cell::Cat(0) },
                Row { cells: vec![Cell::Num(0.0), Cell::Cat(1)], target: Cell::Cat(0) },
                Row { cells: vec![Cell::Num(0.0), Cell::Cat(0)], target: Cell::Cat(0) },
            ],
        };
        let holed = Table {
            schema,
            rows: vec![Row { cells: vec![Cell::Num(0.0), Cell::Missing], target: Cell::Cat(0) }],
        };
        let filled = impute(&holed, &reference).unwrap();
        assert_eq!(filled.rows[0].cells[1], Cell::Cat(1));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let t = toy_table(100);
        let s1 = split(&t, (0.9, 0.05, 0.05), 7).unwrap();
        assert_eq!(s1.train.n_rows(), 90);
        assert_eq!(s1.validation.n_rows(), 5);
        assert_eq!(s1.test.n_rows(), 5);
        let s2 = split(&t, (0.9, 0.05, 0.05), 7).unwrap();
        assert_eq!(s1.train, s2.train);
        assert_eq!(s1.validation, s2.validation);
        assert_eq!(s1.test, s2.test);
    }

    #[test]
    fn split_remainder_goes_to_train() {
        let t = toy_table(103);
        let s = split(&t, (0.9, 0.05, 0.05), 1).unwrap();
        // Stratified per class (52 + 51 rows): floor(52*.05)=2, floor(51*.05)=2.
        assert_eq!(s.validation.n_rows() + s.test.n_rows() + s.train.n_rows(), 103);
        assert!(s.train.n_rows() >= 93);
    }

    #[test]
    fn split_is_partition() {
        let t = toy_table(60);
        let s = split(&t, (0.9, 0.05, 0.05), 3).unwrap();
        let mut all: Vec<&Row> = Vec::new();
        all.extend(s.train.rows.iter());
        all.extend(s.validation.rows.iter());
        all.extend(s.test.rows.iter());
        assert_eq!(all.len(), 60);
        // Every input row appears exactly once (rows here are unique by x).
        let mut xs: Vec<f64> = all
            .iter()
            .map(|r| match r.cells[0] {
                Cell::Num(v) => v,
                _ => unreachable!(),
            })
            .collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(xs, (0..60).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn encode_decode_roundtrip() {
        let t = toy_table(30);
        let enc = fit_encoder(&t).unwrap();
        let m = encode(&t, &enc).unwrap();
        // One-hot blocks of real data are exact unit vectors.
        for i in 0..m.n_rows() {
            let block: Vec<f64> = (1..4).map(|j| m.values[[i, j]]).collect();
            assert_eq!(block.iter().sum::<f64>(), 1.0);
            assert!(block.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        let back = decode(&m, &enc).unwrap();
        for (a, b) in t.rows.iter().zip(&back.rows) {
            assert_eq!(a.cells[1], b.cells[1]);
            assert_eq!(a.target, b.target);
            match (a.cells[0], b.cells[0]) {
                (Cell::Num(x), Cell::Num(y)) => {
                    assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0))
                }
                _ => panic!(),
            }
        }
    }

    #[test]
    fn encode_mean_row_is_zero_and_constant_column_clamps() {
        let schema = Schema::new(
            vec![Column { name: "x".into(), kind: ColumnKind::Numeric }],
            TargetSpec { name: "y".into(), task: Task::Regression, classes: vec![] },
        )
        .unwrap();
        let t = Table {
            schema,
            rows: (0..10)
                .map(|_| Row { cells: vec![Cell::Num(4.0)], target: Cell::Num(1.0) })
                .collect(),
        };
        let enc = fit_encoder(&t).unwrap();
        match enc.blocks[0] {
            BlockLayout::Numeric { std, .. } => assert_eq!(std, 1.0),
            _ => panic!(),
        }
        let m = encode(&t, &enc).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_argmax_on_soft_one_hot() {
        let t = toy_table(3);
        let enc = fit_encoder(&t).unwrap();
        let mut m = encode(&t, &enc).unwrap();
        m.values[[0, 1]] = 0.2;
        m.values[[0, 2]] = 0.7;
        m.values[[0, 3]] = 0.1;
        let back = decode(&m, &enc).unwrap();
        assert_eq!(back.rows[0].cells[1], Cell::Cat(1));
    }

    #[test]
    fn matrix_binary_roundtrip() {
        let m = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64 * 0.5);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        assert_eq!(&buf[0..4], b"BCRM");
        assert_eq!(buf.len(), 16 + 5 * 3 * 8);
        let back = read_matrix(&mut Cursor::new(buf)).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn imputation_stats_ignore_val_test() {
        let reference = toy_table(10);
        let holed = Table {
            schema: toy_schema(),
            rows: vec![Row { cells: vec![Cell::Missing, Cell::Cat(0)], target: Cell::Cat(0) }],
        };
        let a = impute(&holed, &reference).unwrap();
        // Changing non-reference content does not change the fill.
        let b = impute(&holed, &reference).unwrap();
        assert_eq!(a, b);
    }
}
