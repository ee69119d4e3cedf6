//! Item universe, attribute universe, and the per-item attribute
//! indicator distributions shared by every other module.
//!
//! An item with m attributes gets a row with weight 1/m on each of them,
//! so every row of the item-attribute matrix sums to one.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("item {0:?} has an empty attribute set")]
    EmptyAttributeSet(String),
    #[error("duplicate item id {0:?} in attribute records")]
    DuplicateItemId(String),
    #[error("item index {index} out of range (item count {count})")]
    ItemIndexOutOfRange { index: usize, count: usize },
    #[error("unknown item id {0:?}")]
    UnknownItemId(String),
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("line {line}: malformed attribute record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("sequence for user {user:?} references item index {index} >= item count {count}")]
    SequenceItemOutOfRange {
        user: String,
        index: usize,
        count: usize,
    },
    #[error("sequence for user {0:?} is empty")]
    EmptySequence(String),
    #[error("sequence for user {user:?}: timestamps length {got} != items length {want}")]
    TimestampLengthMismatch {
        user: String,
        got: usize,
        want: usize,
    },
    #[error("sequence for user {user:?}: timestamps decrease at position {position}")]
    TimestampsNotSorted { user: String, position: usize },
}

/// Item catalog: dense item/attribute indexing plus the row-stochastic
/// item-attribute matrix p(g|x).
///
/// Immutable after construction; freely shareable across threads.
#[derive(Debug, Clone)]
pub struct ItemCatalog {
    item_count: usize,
    attribute_count: usize,
    /// Row-major `item_count x attribute_count`; row x holds p(g|x).
    attr_rows: Vec<f64>,
    item_ids: Vec<String>,
    item_index: HashMap<String, usize>,
    attribute_names: Vec<String>,
    attribute_index: HashMap<String, usize>,
    /// Nonzero attribute indices per item, in attribute-index order.
    attr_sets: Vec<Vec<usize>>,
}

impl ItemCatalog {
    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn attribute_count(&self) -> usize {
        self.attribute_count
    }

    /// The item's row of p(g|x), unmodified.
    pub fn attribute_row(&self, item: usize) -> Result<&[f64], CatalogError> {
        if item >= self.item_count {
            return Err(CatalogError::ItemIndexOutOfRange {
                index: item,
                count: self.item_count,
            });
        }
        let start = item * self.attribute_count;
        Ok(&self.attr_rows[start..start + self.attribute_count])
    }

    /// Attribute indices with nonzero weight for the item.
    pub fn attribute_set(&self, item: usize) -> Result<&[usize], CatalogError> {
        if item >= self.item_count {
            return Err(CatalogError::ItemIndexOutOfRange {
                index: item,
                count: self.item_count,
            });
        }
        Ok(&self.attr_sets[item])
    }

    /// Full row-major item-attribute matrix, `item_count x attribute_count`.
    pub fn attr_matrix(&self) -> &[f64] {
        &self.attr_rows
    }

    pub fn item_id(&self, index: usize) -> Option<&str> {
        self.item_ids.get(index).map(|s| s.as_str())
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    pub fn attribute_name(&self, index: usize) -> Option<&str> {
        self.attribute_names.get(index).map(|s| s.as_str())
    }

    pub fn attribute_index_of(&self, name: &str) -> Option<usize> {
        self.attribute_index.get(name).copied()
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    /// Serializes the catalog in the attribute-file format, one line per
    /// item in dense-index order. Reloading yields an identical catalog.
    pub fn to_attribute_file(&self) -> String {
        let mut out = String::new();
        for (item, labels) in self.attr_sets.iter().enumerate() {
            let names: Vec<&str> = labels
                .iter()
                .map(|&g| self.attribute_names[g].as_str())
                .collect();
            out.push_str(&self.item_ids[item]);
            out.push('\t');
            out.push_str(&names.join("|"));
            out.push('\n');
        }
        out
    }
}

/// Builds a catalog from `(external item id, attribute labels)` records.
///
/// Dense indices are assigned in first-appearance order of the records,
/// for both items and attributes, so rebuilt catalogs are deterministic.
pub fn build_catalog<S: AsRef<str>>(
    records: &[(S, Vec<S>)],
) -> Result<ItemCatalog, CatalogError> {
    let mut item_ids: Vec<String> = Vec::with_capacity(records.len());
    let mut item_index: HashMap<String, usize> = HashMap::with_capacity(records.len());
    let mut attribute_names: Vec<String> = Vec::new();
    let mut attribute_index: HashMap<String, usize> = HashMap::new();
    let mut per_item_attrs: Vec<Vec<usize>> = Vec::with_capacity(records.len());

    for (id, labels) in records {
        let id = id.as_ref();
        if item_index.contains_key(id) {
            return Err(CatalogError::DuplicateItemId(id.to_string()));
        }
        // Dedupe labels within a record while preserving first appearance.
        let mut attrs: Vec<usize> = Vec::with_capacity(labels.len());
        for label in labels {
            let label = label.as_ref();
            let g = *attribute_index.entry(label.to_string()).or_insert_with(|| {
                attribute_names.push(label.to_string());
                attribute_names.len() - 1
            });
            if !attrs.contains(&g) {
                attrs.push(g);
            }
        }
        if attrs.is_empty() {
            return Err(CatalogError::EmptyAttributeSet(id.to_string()));
        }
        attrs.sort_unstable();
        item_index.insert(id.to_string(), item_ids.len());
        item_ids.push(id.to_string());
        per_item_attrs.push(attrs);
    }

    let item_count = item_ids.len();
    let attribute_count = attribute_names.len();
    let mut attr_rows = vec![0.0; item_count * attribute_count];
    for (item, attrs) in per_item_attrs.iter().enumerate() {
        let w = 1.0 / attrs.len() as f64;
        for &g in attrs {
            attr_rows[item * attribute_count + g] = w;
        }
    }

    Ok(ItemCatalog {
        item_count,
        attribute_count,
        attr_rows,
        item_ids,
        item_index,
        attribute_names,
        attribute_index,
        attr_sets: per_item_attrs,
    })
}

/// Attribute file layout accepted by [`load_attribute_records`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributeFileFormat {
    /// `item_id<TAB>label1|label2|...`
    Tsv,
    /// MovieLens `movies.dat`: `id::title::Genre1|Genre2`
    MovieLens,
    /// Sniff per file: `::` in the first data line selects MovieLens.
    Auto,
}

/// Parses an attribute file into `(item id, labels)` records, in file order.
pub fn load_attribute_records(
    path: &Path,
    format: AttributeFileFormat,
) -> Result<Vec<(String, Vec<String>)>, CatalogError> {
    let text = fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_attribute_records(&text, format)
}

pub fn parse_attribute_records(
    text: &str,
    format: AttributeFileFormat,
) -> Result<Vec<(String, Vec<String>)>, CatalogError> {
    let format = match format {
        AttributeFileFormat::Auto => {
            let first = text.lines().find(|l| !l.trim().is_empty());
            match first {
                Some(l) if l.contains("::") => AttributeFileFormat::MovieLens,
                _ => AttributeFileFormat::Tsv,
            }
        }
        f => f,
    };

    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, labels_field) = match format {
            AttributeFileFormat::Tsv => {
                let mut parts = line.splitn(2, '\t');
                let id = parts.next().unwrap_or("");
                let labels = parts.next().ok_or(CatalogError::MalformedRecord {
                    line: lineno + 1,
                    reason: "expected `item_id<TAB>labels`".to_string(),
                })?;
                (id, labels)
            }
            AttributeFileFormat::MovieLens => {
                let parts: Vec<&str> = line.split("::").collect();
                if parts.len() < 3 {
                    return Err(CatalogError::MalformedRecord {
                        line: lineno + 1,
                        reason: "expected `id::title::genres`".to_string(),
                    });
                }
                (parts[0], parts[parts.len() - 1])
            }
            AttributeFileFormat::Auto => unreachable!(),
        };
        let labels: Vec<String> = labels_field
            .split('|')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| s.to_string())
            .collect();
        records.push((id.trim().to_string(), labels));
    }
    Ok(records)
}

/// One user's time-ordered interaction history over dense item indices,
/// oldest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSequence {
    user_id: String,
    items: Vec<usize>,
    timestamps: Option<Vec<i64>>,
}

impl InteractionSequence {
    pub fn new(
        user_id: impl Into<String>,
        items: Vec<usize>,
        timestamps: Option<Vec<i64>>,
        catalog: &ItemCatalog,
    ) -> Result<Self, CatalogError> {
        let user_id = user_id.into();
        if items.is_empty() {
            return Err(CatalogError::EmptySequence(user_id));
        }
        for &item in &items {
            if item >= catalog.item_count() {
                return Err(CatalogError::SequenceItemOutOfRange {
                    user: user_id,
                    index: item,
                    count: catalog.item_count(),
                });
            }
        }
        if let Some(ts) = &timestamps {
            if ts.len() != items.len() {
                return Err(CatalogError::TimestampLengthMismatch {
                    user: user_id,
                    got: ts.len(),
                    want: items.len(),
                });
            }
            if let Some(pos) = ts.windows(2).position(|w| w[1] < w[0]) {
                return Err(CatalogError::TimestampsNotSorted {
                    user: user_id,
                    position: pos + 1,
                });
            }
        }
        Ok(Self {
            user_id,
            items,
            timestamps,
        })
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn timestamps(&self) -> Option<&[i64]> {
        self.timestamps.as_deref()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl fmt::Display for InteractionSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} items", self.user_id, self.items.len())
    }
}
