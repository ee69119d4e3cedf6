//! Interaction-log parsing and corpus preparation: behavior filtering,
//! iterated k-core filtering, and the leave-one-out split with prefix
//! augmentation.
//!
//! Per user with items `[x1..xn]` (time-ordered): the last item is the
//! test target, the second-to-last the validation target, and every
//! earlier prefix `([x1..xj], x(j+1))` for `j <= n-3` becomes a training
//! pair. Every stored prefix is independently truncated to its most
//! recent `max_len` items.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{CatalogError, InteractionSequence, ItemCatalog};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("k-core thresholds must be >= 1 (got k_user={0}, k_item={1})")]
    BadCoreThreshold(usize, usize),
    #[error("dataset exhausted: no interactions survive {0}-core/{1}-core filtering")]
    DatasetExhausted(usize, usize),
    #[error("max_len must be >= 1")]
    BadMaxLen,
    #[error("{count} interaction item ids missing from the attribute catalog, e.g. {examples:?}")]
    MissingItems { count: usize, examples: Vec<String> },
    #[error("no user has >= 3 interactions; cannot build a leave-one-out split")]
    NoEligibleUsers,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("interaction file has no header line")]
    MissingHeader,
    #[error("header must name user_id and item_id and timestamp, got {0:?}")]
    BadHeader(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

/// One raw interaction as read from a log file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawInteraction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
    pub behavior: Option<String>,
}

impl RawInteraction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: i64) -> Self {
        Self {
            user_id: user.into(),
            item_id: item.into(),
            timestamp,
            behavior: None,
        }
    }

    pub fn with_behavior(mut self, behavior: impl Into<String>) -> Self {
        self.behavior = Some(behavior.into());
        self
    }
}

/// Keeps only interactions whose behavior equals `keep_label`. With no
/// label every record passes through untouched.
pub fn behavior_filter(
    interactions: &[RawInteraction],
    keep_label: Option<&str>,
) -> Vec<RawInteraction> {
    match keep_label {
        None => interactions.to_vec(),
        Some(label) => interactions
            .iter()
            .filter(|r| r.behavior.as_deref() == Some(label))
            .cloned()
            .collect(),
    }
}

/// Iterated k-core filtering: removes users with fewer than `k_user`
/// interactions and items with fewer than `k_item`, repeating until a
/// fixed point. Preserves the input's relative order.
pub fn kcore_filter(
    interactions: &[RawInteraction],
    k_user: usize,
    k_item: usize,
) -> Result<Vec<RawInteraction>, IngestError> {
    if k_user == 0 || k_item == 0 {
        return Err(IngestError::BadCoreThreshold(k_user, k_item));
    }
    let mut kept: Vec<&RawInteraction> = interactions.iter().collect();
    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for r in &kept {
            *user_counts.entry(r.user_id.as_str()).or_default() += 1;
            *item_counts.entry(r.item_id.as_str()).or_default() += 1;
        }
        let before = kept.len();
        kept.retain(|r| {
            user_counts[r.user_id.as_str()] >= k_user && item_counts[r.item_id.as_str()] >= k_item
        });
        if kept.len() == before {
            break;
        }
    }
    if kept.is_empty() {
        return Err(IngestError::DatasetExhausted(k_user, k_item));
    }
    Ok(kept.into_iter().cloned().collect())
}

/// One supervised case: an input prefix and the dense index of its next
/// item.
#[derive(Debug, Clone)]
pub struct SplitPair {
    pub prefix: InteractionSequence,
    pub target: usize,
}

/// Corpus-level summary emitted alongside a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub users: usize,
    pub skipped_users: usize,
    pub items: usize,
    pub attributes: usize,
    pub interactions: usize,
    pub train_pairs: usize,
    pub validation_cases: usize,
    pub test_cases: usize,
    pub mean_sequence_length: f64,
    pub max_len: usize,
}

/// Leave-one-out split with prefix augmentation.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<SplitPair>,
    pub validation: Vec<SplitPair>,
    pub test: Vec<SplitPair>,
    pub catalog: ItemCatalog,
    pub max_len: usize,
    pub stats: SplitStats,
}

/// Builds the split from filtered interactions. Interactions referencing
/// items outside the catalog are rejected with an explicit list; users
/// left with fewer than three interactions are skipped and counted.
/// Users are processed in id order; each user's records are stable-sorted
/// by timestamp so ties keep file order.
pub fn split_and_augment(
    interactions: &[RawInteraction],
    max_len: usize,
    catalog: &ItemCatalog,
) -> Result<DatasetSplit, IngestError> {
    if max_len == 0 {
        return Err(IngestError::BadMaxLen);
    }

    let mut missing: Vec<String> = Vec::new();
    let mut seen_missing: HashSet<&str> = HashSet::new();
    for r in interactions {
        if catalog.item_index(&r.item_id).is_none() && seen_missing.insert(r.item_id.as_str()) {
            missing.push(r.item_id.clone());
        }
    }
    if !missing.is_empty() {
        let count = missing.len();
        missing.truncate(8);
        return Err(IngestError::MissingItems {
            count,
            examples: missing,
        });
    }

    let mut per_user: BTreeMap<&str, Vec<(i64, usize)>> = BTreeMap::new();
    for r in interactions {
        let dense = catalog.item_index(&r.item_id).expect("checked above");
        per_user
            .entry(r.user_id.as_str())
            .or_default()
            .push((r.timestamp, dense));
    }

    let truncate = |items: &[usize]| -> Vec<usize> {
        let start = items.len().saturating_sub(max_len);
        items[start..].to_vec()
    };

    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    let mut skipped_users = 0usize;
    let mut total_len = 0usize;
    let mut kept_users = 0usize;
    let mut item_seen: HashSet<usize> = HashSet::new();

    for (user, mut events) in per_user {
        events.sort_by_key(|&(ts, _)| ts); // stable: ties keep file order
        let items: Vec<usize> = events.iter().map(|&(_, item)| item).collect();
        let n = items.len();
        if n < 3 {
            skipped_users += 1;
            continue;
        }
        kept_users += 1;
        total_len += n;
        item_seen.extend(items.iter().copied());

        let make = |prefix_items: &[usize], target: usize| -> Result<SplitPair, IngestError> {
            let seq = InteractionSequence::new(user, truncate(prefix_items), None, catalog)?;
            Ok(SplitPair {
                prefix: seq,
                target,
            })
        };

        test.push(make(&items[..n - 1], items[n - 1])?);
        validation.push(make(&items[..n - 2], items[n - 2])?);
        for j in 1..=n.saturating_sub(3) {
            train.push(make(&items[..j], items[j])?);
        }
    }

    if kept_users == 0 {
        return Err(IngestError::NoEligibleUsers);
    }

    let stats = SplitStats {
        users: kept_users,
        skipped_users,
        items: item_seen.len(),
        attributes: catalog.attribute_count(),
        interactions: total_len,
        train_pairs: train.len(),
        validation_cases: validation.len(),
        test_cases: test.len(),
        mean_sequence_length: total_len as f64 / kept_users as f64,
        max_len,
    };

    Ok(DatasetSplit {
        train,
        validation,
        test,
        catalog: catalog.clone(),
        max_len,
        stats,
    })
}

/// Interaction file layout accepted by [`parse_interactions`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InteractionFileFormat {
    /// MovieLens `ratings.dat`: `user::item::rating::timestamp`. Every
    /// row counts as an interaction; the rating value is not thresholded.
    MovieLensRatings,
    /// Delimited text (tab or comma, sniffed from the header) with a
    /// header naming `user_id`, `item_id`, `timestamp` and optionally
    /// `behavior`.
    Delimited,
    /// Sniff per file: `::` in the first data line selects MovieLens.
    Auto,
}

pub fn load_interactions(
    path: &Path,
    format: InteractionFileFormat,
) -> Result<Vec<RawInteraction>, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_interactions(&text, format)
}

pub fn parse_interactions(
    text: &str,
    format: InteractionFileFormat,
) -> Result<Vec<RawInteraction>, IngestError> {
    let format = match format {
        InteractionFileFormat::Auto => {
            let first = text.lines().find(|l| !l.trim().is_empty());
            match first {
                Some(l) if l.contains("::") => InteractionFileFormat::MovieLensRatings,
                _ => InteractionFileFormat::Delimited,
            }
        }
        f => f,
    };
    match format {
        InteractionFileFormat::MovieLensRatings => parse_ratings_dat(text),
        InteractionFileFormat::Delimited => parse_delimited(text),
        InteractionFileFormat::Auto => unreachable!(),
    }
}

fn parse_ratings_dat(text: &str) -> Result<Vec<RawInteraction>, IngestError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split("::").collect();
        if parts.len() != 4 {
            return Err(IngestError::Parse {
                line: lineno + 1,
                reason: format!("expected `user::item::rating::timestamp`, got {line:?}"),
            });
        }
        let timestamp: i64 = parts[3].trim().parse().map_err(|_| IngestError::Parse {
            line: lineno + 1,
            reason: format!("bad timestamp {:?}", parts[3]),
        })?;
        out.push(RawInteraction::new(parts[0], parts[1], timestamp));
    }
    Ok(out)
}

fn parse_delimited(text: &str) -> Result<Vec<RawInteraction>, IngestError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or(IngestError::MissingHeader)?;
    let delim = if header.contains('\t') { '\t' } else { ',' };
    let columns: Vec<String> = header
        .trim_end_matches('\r')
        .split(delim)
        .map(|c| c.trim().to_ascii_lowercase())
        .collect();
    let find = |name: &str| columns.iter().position(|c| c == name);
    let (Some(user_col), Some(item_col), Some(ts_col)) =
        (find("user_id"), find("item_id"), find("timestamp"))
    else {
        return Err(IngestError::BadHeader(header.to_string()));
    };
    let behavior_col = find("behavior");

    let mut out = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delim).collect();
        let need = [user_col, item_col, ts_col]
            .into_iter()
            .chain(behavior_col)
            .max()
            .unwrap();
        if fields.len() <= need {
            return Err(IngestError::Parse {
                line: lineno + 1,
                reason: format!("expected at least {} fields, got {}", need + 1, fields.len()),
            });
        }
        let timestamp: i64 = fields[ts_col].trim().parse().map_err(|_| IngestError::Parse {
            line: lineno + 1,
            reason: format!("bad timestamp {:?}", fields[ts_col]),
        })?;
        let mut rec = RawInteraction::new(fields[user_col].trim(), fields[item_col].trim(), timestamp);
        if let Some(bc) = behavior_col {
            let b = fields[bc].trim();
            if !b.is_empty() {
                rec.behavior = Some(b.to_string());
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// Writes pairs as `user<TAB>i1,i2,...<TAB>target` over dense indices,
/// one line per case, in split order. Deterministic byte-for-byte.
pub fn split_pairs_to_string(pairs: &[SplitPair]) -> String {
    let mut out = String::new();
    for pair in pairs {
        let items: Vec<String> = pair.prefix.items().iter().map(|i| i.to_string()).collect();
        out.push_str(pair.prefix.user_id());
        out.push('\t');
        out.push_str(&items.join(","));
        out.push('\t');
        out.push_str(&pair.target.to_string());
        out.push('\n');
    }
    out
}

pub fn split_pairs_from_str(
    text: &str,
    catalog: &ItemCatalog,
) -> Result<Vec<SplitPair>, IngestError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(IngestError::Parse {
                line: lineno + 1,
                reason: "expected `user<TAB>items<TAB>target`".to_string(),
            });
        }
        let items: Result<Vec<usize>, _> = parts[1].split(',').map(|s| s.trim().parse()).collect();
        let items = items.map_err(|_| IngestError::Parse {
            line: lineno + 1,
            reason: format!("bad item list {:?}", parts[1]),
        })?;
        let target: usize = parts[2].trim().parse().map_err(|_| IngestError::Parse {
            line: lineno + 1,
            reason: format!("bad target {:?}", parts[2]),
        })?;
        let prefix = InteractionSequence::new(parts[0], items, None, catalog)?;
        out.push(SplitPair { prefix, target });
    }
    Ok(out)
}
