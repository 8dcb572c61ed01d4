//! Schema catalogs: the source and target column sets being matched.
//!
//! A catalog is a list of tables, each an ordered list of columns with a
//! name and a free-text description. Tables flagged `ordered` carry a
//! meaningful presentation order (documentation, survey or form order) that
//! the context tree uses as a continuity signal.
//!
//! Every column gets a synthetic identifier (`C1`, `C2`, ...) assigned in
//! file order. When a catalog is masked, prompts show only these identifiers
//! and every raw name mentioned in descriptions is rewritten to the owning
//! column's identifier.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::MatchTrace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Source => "source",
            Side::Target => "target",
        })
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Side::Source),
            "target" => Ok(Side::Target),
            other => Err(Error::InvalidParams(format!("unknown side {other:?}"))),
        }
    }
}

/// Opaque table identifier, cheap to clone.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TableId(Arc<str>);

impl TableId {
    pub fn new(id: impl AsRef<str>) -> Self {
        TableId(Arc::from(id.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Identity of one column: side, table and position within the table.
///
/// The derived ordering (side, table id, ordinal) is the tie-breaking order
/// used everywhere a deterministic order over columns is needed.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ColumnRef {
    pub side: Side,
    pub table_id: TableId,
    pub ordinal: usize,
}

impl ColumnRef {
    pub fn new(side: Side, table_id: impl AsRef<str>, ordinal: usize) -> Self {
        ColumnRef {
            side,
            table_id: TableId::new(table_id),
            ordinal,
        }
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}#{}", self.side, self.table_id, self.ordinal)
    }
}

/// Synthetic column identifier, rendered as `C<n>` with `n >= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cid(u32);

impl Cid {
    pub fn new(n: u32) -> Option<Self> {
        (n > 0).then_some(Cid(n))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl fmt::Display for Cid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}", self.0)
    }
}

impl FromStr for Cid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix('C')
            .filter(|digits| !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|digits| digits.parse::<u32>().ok())
            .and_then(Cid::new)
            .ok_or_else(|| Error::InvalidParams(format!("not a column id: {s:?}")))
    }
}

impl Serialize for Cid {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Cid {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub column: ColumnRef,
    pub raw_name: String,
    pub description: String,
    pub cid: Cid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableMeta {
    pub table_id: TableId,
    pub name: String,
    pub description: String,
    pub ordered: bool,
    pub columns: Vec<ColumnRef>,
}

impl TableMeta {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

/// On-disk catalog layout. Also the programmatic way to build a catalog.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CatalogFile {
    pub side: Option<Side>,
    pub tables: Vec<TableFile>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TableFile {
    pub table_id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub ordered: bool,
    pub columns: Vec<ColumnFile>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ColumnFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
}

impl ColumnFile {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        ColumnFile {
            name: name.into(),
            description: description.into(),
        }
    }
}

/// Immutable, indexed view of one side's columns.
#[derive(Clone, Debug)]
pub struct SchemaCatalog {
    side: Side,
    tables: Vec<TableMeta>,
    columns: Vec<ColumnMeta>,
    by_ref: HashMap<ColumnRef, usize>,
    by_cid: HashMap<Cid, usize>,
    tables_by_id: HashMap<TableId, usize>,
    masked: bool,
}

/// Load a catalog JSON file. Ordinals and CIDs follow file order.
pub fn load_catalog(path: impl AsRef<Path>, side: Side) -> Result<SchemaCatalog> {
    SchemaCatalog::from_file(read_catalog_file(path)?, side)
}

/// Parse a catalog file without resolving it, e.g. to read its declared side.
pub fn read_catalog_file(path: impl AsRef<Path>) -> Result<CatalogFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

impl SchemaCatalog {
    pub fn from_file(file: CatalogFile, side: Side) -> Result<Self> {
        if let Some(declared) = file.side {
            if declared != side {
                return Err(Error::SideMismatch {
                    expected: side.to_string(),
                    found: declared.to_string(),
                });
            }
        }
        let mut tables = Vec::with_capacity(file.tables.len());
        let mut columns = Vec::new();
        let mut seen_tables = HashSet::new();
        for table in file.tables {
            if !seen_tables.insert(table.table_id.clone()) {
                return Err(Error::DuplicateTable(table.table_id));
            }
            let table_id = TableId::new(&table.table_id);
            let mut names = HashSet::new();
            let mut refs = Vec::with_capacity(table.columns.len());
            for (ordinal, col) in table.columns.into_iter().enumerate() {
                if col.name.trim().is_empty() {
                    return Err(Error::InvalidParams(format!(
                        "column {ordinal} of table {:?} has an empty name",
                        table.table_id
                    )));
                }
                if !names.insert(col.name.clone()) {
                    return Err(Error::DuplicateColumn {
                        table: table.table_id.clone(),
                        name: col.name,
                    });
                }
                let column = ColumnRef {
                    side,
                    table_id: table_id.clone(),
                    ordinal,
                };
                refs.push(column.clone());
                columns.push(ColumnMeta {
                    column,
                    raw_name: col.name,
                    description: col.description,
                    cid: Cid(0),
                });
            }
            tables.push(TableMeta {
                name: if table.name.is_empty() {
                    table.table_id.clone()
                } else {
                    table.name
                },
                table_id,
                description: table.description,
                ordered: table.ordered,
                columns: refs,
            });
        }
        if columns.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        let mut catalog = SchemaCatalog {
            side,
            tables,
            columns,
            by_ref: HashMap::new(),
            by_cid: HashMap::new(),
            tables_by_id: HashMap::new(),
            masked: false,
        };
        catalog.assign_cids();
        Ok(catalog)
    }

    fn assign_cids(&mut self) {
        self.by_ref.clear();
        self.by_cid.clear();
        self.tables_by_id.clear();
        for (idx, meta) in self.columns.iter_mut().enumerate() {
            meta.cid = Cid(idx as u32 + 1);
            self.by_ref.insert(meta.column.clone(), idx);
            self.by_cid.insert(meta.cid, idx);
        }
        for (idx, table) in self.tables.iter().enumerate() {
            self.tables_by_id.insert(table.table_id.clone(), idx);
        }
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn is_masked(&self) -> bool {
        self.masked
    }

    pub fn tables(&self) -> &[TableMeta] {
        &self.tables
    }

    pub fn table(&self, id: &TableId) -> Option<&TableMeta> {
        self.tables_by_id.get(id).map(|&i| &self.tables[i])
    }

    /// All columns in catalog (file) order.
    pub fn columns(&self) -> &[ColumnMeta] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn column(&self, column: &ColumnRef) -> Option<&ColumnMeta> {
        self.by_ref.get(column).map(|&i| &self.columns[i])
    }

    pub fn require(&self, column: &ColumnRef) -> Result<&ColumnMeta> {
        self.column(column)
            .ok_or_else(|| Error::UnknownColumn(column.to_string()))
    }

    pub fn by_cid(&self, cid: Cid) -> Option<&ColumnMeta> {
        self.by_cid.get(&cid).map(|&i| &self.columns[i])
    }

    /// Position of a column in the flattened catalog sequence.
    pub fn position(&self, column: &ColumnRef) -> Option<usize> {
        self.by_ref.get(column).copied()
    }

    /// Name to show in prompts: the CID when masked, the raw name otherwise.
    pub fn display_name(&self, meta: &ColumnMeta) -> String {
        if self.masked {
            meta.cid.to_string()
        } else {
            meta.raw_name.clone()
        }
    }

    /// Resolve `table.column` (raw names) to a column reference.
    pub fn find(&self, table_id: &str, name: &str) -> Option<&ColumnMeta> {
        let table = self.table(&TableId::new(table_id))?;
        table
            .columns
            .iter()
            .map(|c| &self.columns[self.by_ref[c]])
            .find(|m| m.raw_name == name)
    }

    /// Every stored free text: table names and descriptions, column
    /// descriptions.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.tables
            .iter()
            .flat_map(|t| [t.name.as_str(), t.description.as_str()])
            .chain(self.columns.iter().map(|c| c.description.as_str()))
    }
}

/// Replace raw column identifiers with CIDs across the whole catalog.
///
/// CIDs are reassigned in catalog order starting at `C1`. A raw name that is
/// shared by several tables resolves to the same-table column when referenced
/// from inside that table, and to the first owner in catalog order otherwise.
/// Applying this to an already-masked catalog returns it unchanged.
pub fn mask_catalog(catalog: &SchemaCatalog) -> SchemaCatalog {
    if catalog.masked {
        return catalog.clone();
    }
    let mut masked = catalog.clone();
    masked.assign_cids();

    let mut global: HashMap<&str, Cid> = HashMap::new();
    for meta in &masked.columns {
        global.entry(meta.raw_name.as_str()).or_insert(meta.cid);
    }

    let mut new_tables = masked.tables.clone();
    let mut new_descriptions: Vec<(usize, String)> = Vec::new();
    for (t_idx, table) in masked.tables.iter().enumerate() {
        let mut map = global.clone();
        for c in &table.columns {
            let meta = &masked.columns[masked.by_ref[c]];
            map.insert(meta.raw_name.as_str(), meta.cid);
        }
        let replacements = Replacements::new(map.into_iter().map(|(k, v)| (k.to_string(), v.to_string())));
        new_tables[t_idx].name = replacements.apply(&table.name);
        new_tables[t_idx].description = replacements.apply(&table.description);
        for c in &table.columns {
            let idx = masked.by_ref[c];
            new_descriptions.push((idx, replacements.apply(&masked.columns[idx].description)));
        }
    }
    masked.tables = new_tables;
    for (idx, text) in new_descriptions {
        masked.columns[idx].description = text;
    }
    masked.masked = true;
    masked
}

pub(crate) fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Whole-token identifier substitution, longest identifier first.
#[derive(Clone, Debug)]
pub struct Replacements {
    pairs: Vec<(String, String)>,
}

impl Replacements {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        let mut pairs: Vec<_> = pairs.into_iter().filter(|(k, _)| !k.is_empty()).collect();
        pairs.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Replacements { pairs }
    }

    /// Single left-to-right pass; substituted text is never rescanned.
    pub fn apply(&self, text: &str) -> String {
        let mut out = String::with_capacity(text.len());
        let mut i = 0;
        let mut prev: Option<char> = None;
        'scan: while i < text.len() {
            let rest = &text[i..];
            if !prev.is_some_and(is_ident_char) {
                for (from, to) in &self.pairs {
                    if rest.starts_with(from.as_str())
                        && !rest[from.len()..].chars().next().is_some_and(is_ident_char)
                    {
                        out.push_str(to);
                        i += from.len();
                        prev = from.chars().last();
                        continue 'scan;
                    }
                }
            }
            let c = rest.chars().next().expect("non-empty rest");
            out.push(c);
            prev = Some(c);
            i += c.len_utf8();
        }
        out
    }
}

/// Count whole-token occurrences of `needle` in `haystack`.
pub fn count_token(haystack: &str, needle: &str) -> usize {
    if needle.is_empty() {
        return 0;
    }
    haystack
        .match_indices(needle)
        .filter(|(i, _)| {
            let before = haystack[..*i].chars().next_back();
            let after = haystack[i + needle.len()..].chars().next();
            !before.is_some_and(is_ident_char) && !after.is_some_and(is_ident_char)
        })
        .count()
}

/// One forced-choice query: a source column and its target shortlist. An
/// empty shortlist asks the pipeline to retrieve one by embedding cosine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchQuery {
    pub source: ColumnRef,
    pub shortlist: Vec<ColumnRef>,
    pub ground_truth: Option<ColumnRef>,
}

impl MatchQuery {
    pub fn validate(&self, source: &SchemaCatalog, target: &SchemaCatalog) -> Result<()> {
        source.require(&self.source)?;
        for t in &self.shortlist {
            target.require(t)?;
        }
        if let Some(truth) = &self.ground_truth {
            target.require(truth)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatchResult {
    pub query: MatchQuery,
    pub chosen: ColumnRef,
    pub ranked: Vec<ColumnRef>,
    pub trace: MatchTrace,
}

impl MatchResult {
    /// 1-based rank of the ground truth in `ranked`, if present.
    pub fn truth_rank(&self) -> Option<usize> {
        let truth = self.query.ground_truth.as_ref()?;
        self.ranked.iter().position(|c| c == truth).map(|p| p + 1)
    }
}
