//! Source tables, record addressing, ingestion and ground truth.
//!
//! A dataset is a directory holding one CSV per source table (header row
//! required) and, optionally, a ground-truth CSV with the columns
//! `cluster_id,table_id,row_index`. Tables are numbered in filename order.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Separator between `name: value` fields of a serialized record.
pub const FIELD_SEPARATOR: &str = " | ";

/// Global address of one row: `(table_id, row_index)`, ordered lexicographically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityRef {
    pub table_id: u32,
    pub row_index: u32,
}

impl EntityRef {
    pub fn new(table_id: u32, row_index: u32) -> Self {
        Self {
            table_id,
            row_index,
        }
    }
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.table_id, self.row_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub row_index: usize,
    /// One cell per column; a missing cell is the empty string.
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceTable {
    pub table_id: u32,
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Record>,
}

impl SourceTable {
    /// Builds a table from raw rows, assigning row indices in order.
    pub fn new(table_id: u32, name: impl Into<String>, columns: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self> {
        let width = columns.len();
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(row_index, values)| {
                if values.len() != width {
                    return Err(Error::InvalidArgument(format!(
                        "row {row_index} has {} values, table has {width} columns",
                        values.len()
                    )));
                }
                Ok(Record { row_index, values })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            table_id,
            name: name.into(),
            columns,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Position of the natural-key column (`tid`), if any. Never used for matching.
    pub fn key_column(&self) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.trim().eq_ignore_ascii_case(KEY_COLUMN))
    }
}

const KEY_COLUMN: &str = "tid";

/// A set of records believed to denote one real-world entity.
///
/// Members are kept sorted and unique.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cluster {
    members: Vec<EntityRef>,
}

impl Cluster {
    pub fn new(members: impl IntoIterator<Item = EntityRef>) -> Self {
        let mut members: Vec<EntityRef> = members.into_iter().collect();
        members.sort_unstable();
        members.dedup();
        debug_assert!(!members.is_empty(), "cluster must have at least one member");
        Self { members }
    }

    pub fn members(&self) -> &[EntityRef] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, entity: &EntityRef) -> bool {
        self.members.binary_search(entity).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub tables: Vec<SourceTable>,
    pub ground_truth: Option<Vec<Cluster>>,
}

impl Dataset {
    /// Validates the table count, record arity and ground-truth consistency.
    pub fn new(tables: Vec<SourceTable>, ground_truth: Option<Vec<Cluster>>) -> Result<Self> {
        let dataset = Self {
            tables,
            ground_truth,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tables.len() < 2 {
            return Err(Error::NeedTwoTables {
                found: self.tables.len(),
            });
        }
        for (i, table) in self.tables.iter().enumerate() {
            if table.table_id as usize != i {
                return Err(Error::InvalidArgument(format!(
                    "table at position {i} has id {}",
                    table.table_id
                )));
            }
            for (j, row) in table.rows.iter().enumerate() {
                if row.row_index != j || row.values.len() != table.columns.len() {
                    return Err(Error::InvalidArgument(format!(
                        "table {} row {j} is malformed",
                        table.name
                    )));
                }
            }
        }
        if let Some(truth) = &self.ground_truth {
            check_clusters(self, truth)?;
        }
        Ok(())
    }

    pub fn n_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn total_records(&self) -> usize {
        self.tables.iter().map(SourceTable::len).sum()
    }

    pub fn table(&self, table_id: u32) -> Result<&SourceTable> {
        self.tables
            .get(table_id as usize)
            .ok_or(Error::UnknownTable(table_id))
    }

    pub fn contains(&self, entity: EntityRef) -> bool {
        self.tables
            .get(entity.table_id as usize)
            .is_some_and(|t| (entity.row_index as usize) < t.len())
    }

    /// Every record address in `(table_id, row_index)` order.
    pub fn entity_refs(&self) -> impl Iterator<Item = EntityRef> + '_ {
        self.tables.iter().flat_map(|t| {
            (0..t.len() as u32).map(move |row| EntityRef::new(t.table_id, row))
        })
    }

    pub fn serialize(&self, entity: EntityRef) -> Result<String> {
        serialize_record(self.table(entity.table_id)?, entity.row_index as usize)
    }
}

/// Clusters must reference existing records and be pairwise disjoint.
pub(crate) fn check_clusters(dataset: &Dataset, clusters: &[Cluster]) -> Result<()> {
    let mut seen = HashSet::new();
    for cluster in clusters {
        for &entity in cluster.members() {
            if !dataset.contains(entity) {
                return Err(Error::UnknownEntity { entity });
            }
            if !seen.insert(entity) {
                return Err(Error::OverlappingTruth { entity });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    /// Filename of the ground-truth CSV inside the dataset directory.
    pub truth_file: String,
    /// Fail when the ground-truth file is absent.
    pub require_truth: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            truth_file: "ground_truth.csv".to_string(),
            require_truth: false,
        }
    }
}

/// Loads every `*.csv` under `root` (except the truth file) as a source table.
pub fn load_dataset(root: &Path, config: &IngestConfig) -> Result<Dataset> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        let is_csv = path
            .extension()
            .is_some_and(|ext| ext.eq_ignore_ascii_case("csv"));
        let is_truth = path
            .file_name()
            .is_some_and(|name| name == config.truth_file.as_str());
        if path.is_file() && is_csv && !is_truth {
            files.push(path);
        }
    }
    files.sort();
    if files.len() < 2 {
        return Err(Error::NeedTwoTables { found: files.len() });
    }

    let tables = files
        .iter()
        .enumerate()
        .map(|(i, path)| read_table(path, i as u32))
        .collect::<Result<Vec<_>>>()?;

    let truth_path = root.join(&config.truth_file);
    let mut dataset = Dataset {
        tables,
        ground_truth: None,
    };
    if truth_path.is_file() {
        let truth = read_clusters(&truth_path)?;
        check_clusters(&dataset, &truth)?;
        dataset.ground_truth = Some(truth);
    } else if config.require_truth {
        return Err(Error::io(
            truth_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "ground-truth file missing"),
        ));
    }
    dataset.validate()?;
    Ok(dataset)
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    let message = match err.kind() {
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => format!("expected {expected_len} fields, found {len}"),
        _ => err.to_string(),
    };
    Error::Csv {
        file: path.to_path_buf(),
        line,
        message,
    }
}

fn read_table(path: &Path, table_id: u32) -> Result<SourceTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        rows.push(record.iter().map(str::to_string).collect());
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SourceTable::new(table_id, name, columns, rows)
}

/// Reads a `cluster_id,table_id,row_index` file. Row order within the file is irrelevant.
pub fn read_clusters(path: &Path) -> Result<Vec<Cluster>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut groups: BTreeMap<String, Vec<EntityRef>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| Error::Csv {
            file: path.to_path_buf(),
            line,
            message,
        };
        if record.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", record.len())));
        }
        let table_id: u32 = record[1]
            .parse()
            .map_err(|_| bad(format!("bad table_id {:?}", &record[1])))?;
        let row_index: u32 = record[2]
            .parse()
            .map_err(|_| bad(format!("bad row_index {:?}", &record[2])))?;
        let entity = EntityRef::new(table_id, row_index);
        if !seen.insert(entity) {
            return Err(Error::OverlappingTruth { entity });
        }
        groups.entry(record[0].to_string()).or_default().push(entity);
    }
    let mut clusters: Vec<Cluster> = groups.into_values().map(Cluster::new).collect();
    clusters.sort();
    Ok(clusters)
}

/// Writes clusters in the ground-truth format, numbered in sorted order.
pub fn write_clusters(path: &Path, clusters: &[Cluster]) -> Result<()> {
    let mut sorted: Vec<&Cluster> = clusters.iter().collect();
    sorted.sort();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer
        .write_record(["cluster_id", "table_id", "row_index"])
        .map_err(|e| csv_error(path, e))?;
    for (id, cluster) in sorted.iter().enumerate() {
        for m in cluster.members() {
            writer
                .write_record([id.to_string(), m.table_id.to_string(), m.row_index.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Writes each table as `<name>.csv` plus the ground truth, if any.
pub fn write_dataset(root: &Path, dataset: &Dataset, config: &IngestConfig) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for table in &dataset.tables {
        let path = root.join(format!("{}.csv", table.name));
        let mut writer = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        writer
            .write_record(&table.columns)
            .map_err(|e| csv_error(&path, e))?;
        for row in &table.rows {
            writer
                .write_record(&row.values)
                .map_err(|e| csv_error(&path, e))?;
        }
        writer.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(truth) = &dataset.ground_truth {
        write_clusters(&root.join(&config.truth_file), truth)?;
    }
    Ok(())
}

/// Renders a record as `col1: v1 | col2: v2 | ...`, skipping empty cells and the
/// natural-key column. Line breaks inside cells become spaces.
pub fn serialize_record(table: &SourceTable, row_index: usize) -> Result<String> {
    let record = table.rows.get(row_index).ok_or(Error::RowOutOfRange {
        row: row_index,
        len: table.len(),
    })?;
    let key = table.key_column();
    let mut out = String::new();
    for (i, (column, value)) in table.columns.iter().zip(&record.values).enumerate() {
        let value = value.trim();
        if value.is_empty() || Some(i) == key {
            continue;
        }
        if !out.is_empty() {
            out.push_str(FIELD_SEPARATOR);
        }
        out.push_str(column);
        out.push_str(": ");
        if value.contains(['\n', '\r']) {
            out.push_str(&value.replace(['\n', '\r'], " "));
        } else {
            out.push_str(value);
        }
    }
    Ok(out)
}

/// Draws `k` records stratified across tables: `ceil(k/n)` per table, capped at
/// the table size, shortfall topped up from tables with rows left, then
/// truncated to `k`. Pure in `(dataset, k, seed)`.
pub fn sample_records(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<EntityRef>> {
    let total = dataset.total_records();
    if k == 0 || k > total {
        return Err(Error::InvalidArgument(format!(
            "sample size {k} must be in 1..={total}"
        )));
    }
    let n = dataset.n_tables();
    let per_table = k.div_ceil(n);
    let mut quotas: Vec<usize> = dataset
        .tables
        .iter()
        .map(|t| per_table.min(t.len()))
        .collect();
    let mut assigned: usize = quotas.iter().sum();
    'fill: while assigned < k {
        for (quota, table) in quotas.iter_mut().zip(&dataset.tables) {
            if assigned >= k {
                break 'fill;
            }
            if *quota < table.len() {
                *quota += 1;
                assigned += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k);
    for (table, &quota) in dataset.tables.iter().zip(&quotas) {
        let take = quota.min(k - out.len());
        let mut picked = index::sample(&mut rng, table.len(), quota).into_vec();
        picked.truncate(take);
        out.extend(
            picked
                .into_iter()
                .map(|row| EntityRef::new(table.table_id, row as u32)),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(columns: &[&str], rows: &[&[&str]]) -> SourceTable {
        SourceTable::new(
            0,
            "t",
            columns.iter().map(|s| s.to_string()).collect(),
            rows.iter()
                .map(|r| r.iter().map(|s| s.to_string()).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn serialize_single_column() {
        let t = table(&["title"], &[&["X-T50"]]);
        assert_eq!(serialize_record(&t, 0).unwrap(), "title: X-T50");
    }

    #[test]
    fn serialize_skips_empty_cells() {
        let t = table(&["title", "year"], &[&["A", ""]]);
        assert_eq!(serialize_record(&t, 0).unwrap(), "title: A");
    }

    #[test]
    fn serialize_exact_separator_bytes() {
        let t = table(&["a", "b"], &[&["1", "2"]]);
        assert_eq!(serialize_record(&t, 0).unwrap().as_bytes(), b"a: 1 | b: 2");
    }

    #[test]
    fn serialize_skips_natural_key() {
        let t = table(&["tid", "title"], &[&["77", "Song"]]);
        assert_eq!(serialize_record(&t, 0).unwrap(), "title: Song");
    }

    #[test]
    fn serialize_out_of_range() {
        let t = table(&["a"], &[&["1"]]);
        assert!(matches!(
            serialize_record(&t, 3),
            Err(Error::RowOutOfRange { row: 3, len: 1 })
        ));
    }

    #[test]
    fn wrong_arity_rejected() {
        let err = SourceTable::new(0, "t", vec!["a".into()], vec![vec!["1".into(), "2".into()]]);
        assert!(err.is_err());
    }

    fn two_tables(rows_a: usize, rows_b: usize) -> Dataset {
        let mk = |id: u32, n: usize| {
            SourceTable::new(
                id,
                format!("t{id}"),
                vec!["v".into()],
                (0..n).map(|i| vec![format!("{id}-{i}")]).collect(),
            )
            .unwrap()
        };
        Dataset::new(vec![mk(0, rows_a), mk(1, rows_b)], None).unwrap()
    }

    #[test]
    fn sample_everything() {
        let ds = two_tables(3, 4);
        for seed in 0..5 {
            let mut s = sample_records(&ds, 7, seed).unwrap();
            s.sort();
            assert_eq!(s, ds.entity_refs().collect::<Vec<_>>());
        }
    }

    #[test]
    fn sample_is_stratified() {
        let ds = two_tables(10, 10);
        for seed in 0..100 {
            let s = sample_records(&ds, 4, seed).unwrap();
            assert_eq!(s.iter().filter(|e| e.table_id == 0).count(), 2);
            assert_eq!(s.iter().filter(|e| e.table_id == 1).count(), 2);
            let unique: HashSet<_> = s.iter().collect();
            assert_eq!(unique.len(), 4);
        }
    }

    #[test]
    fn sample_tops_up_short_tables() {
        let ds = two_tables(1, 10);
        let s = sample_records(&ds, 6, 3).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(s.iter().filter(|e| e.table_id == 0).count(), 1);
    }

    #[test]
    fn sample_is_deterministic() {
        let ds = two_tables(50, 50);
        assert_eq!(
            sample_records(&ds, 9, 42).unwrap(),
            sample_records(&ds, 9, 42).unwrap()
        );
    }

    #[test]
    fn sample_too_large() {
        let ds = two_tables(2, 2);
        assert!(sample_records(&ds, 5, 0).is_err());
    }

    #[test]
    fn overlapping_truth_rejected() {
        let mut ds = two_tables(2, 2);
        ds.ground_truth = Some(vec![
            Cluster::new([EntityRef::new(0, 0), EntityRef::new(1, 0)]),
            Cluster::new([EntityRef::new(0, 0), EntityRef::new(1, 1)]),
        ]);
        assert!(matches!(
            ds.validate(),
            Err(Error::OverlappingTruth { .. })
        ));
    }
}
