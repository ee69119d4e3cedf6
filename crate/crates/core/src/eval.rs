//! Accuracy, calibration and diversity metrics, plus the per-sequence
//! latency harness.
//!
//! Corpus metrics are plain means of per-sequence values. Ranking scores
//! are used as-is: items already present in the input sequence are not
//! filtered out of the ranking, so ranks always match raw score order.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{CatalogError, InteractionSequence, ItemCatalog};
use crate::distribution::{
    ckl, history_distribution, list_distribution, DistributionError,
};
use crate::ingest::SplitPair;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("improvement is undefined for a zero baseline")]
    ZeroBase,
    #[error("intra-list distance needs K >= 2, got {0}")]
    IldNeedsTwo(usize),
    #[error("latency harness needs >= 3 repetitions, got {0}")]
    TooFewRepetitions(usize),
    #[error("scorer returned {got} items, need {need}")]
    ListTooShort { need: usize, got: usize },
    #[error("no evaluation cases")]
    NoCases,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

/// 1 if the target sits anywhere in the list, else 0.
pub fn recall_at_k(rec_list: &[usize], target: usize) -> f64 {
    if rec_list.contains(&target) {
        1.0
    } else {
        0.0
    }
}

/// Reciprocal of the target's 1-based rank, 0 when absent.
pub fn mrr_at_k(rec_list: &[usize], target: usize) -> f64 {
    match rec_list.iter().position(|&i| i == target) {
        Some(pos) => 1.0 / (pos + 1) as f64,
        None => 0.0,
    }
}

/// Smoothed KL divergence from the history distribution to the list
/// distribution.
pub fn ckl_at_k(
    rec_list: &[usize],
    seq: &InteractionSequence,
    catalog: &ItemCatalog,
    alpha: f64,
) -> Result<f64, EvalError> {
    let p = history_distribution(seq, catalog)?;
    let q = list_distribution(rec_list, catalog)?;
    Ok(ckl(&p, &q, alpha)?)
}

/// Intra-list distance: mean pairwise (1 - Jaccard) over the items'
/// attribute sets.
pub fn ild_at_k(rec_list: &[usize], catalog: &ItemCatalog) -> Result<f64, EvalError> {
    let k = rec_list.len();
    if k < 2 {
        return Err(EvalError::IldNeedsTwo(k));
    }
    let sets: Vec<&[usize]> = rec_list
        .iter()
        .map(|&i| catalog.attribute_set(i))
        .collect::<Result<_, _>>()?;
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            // Attribute sets are sorted; merge-count the intersection.
            let (a, b) = (sets[i], sets[j]);
            let mut inter = 0usize;
            let (mut x, mut y) = (0usize, 0usize);
            while x < a.len() && y < b.len() {
                match a[x].cmp(&b[y]) {
                    std::cmp::Ordering::Less => x += 1,
                    std::cmp::Ordering::Greater => y += 1,
                    std::cmp::Ordering::Equal => {
                        inter += 1;
                        x += 1;
                        y += 1;
                    }
                }
            }
            let union = a.len() + b.len() - inter;
            total += 1.0 - inter as f64 / union as f64;
        }
    }
    Ok(total * 2.0 / (k * (k - 1)) as f64)
}

/// Relative improvement of `metric_new` over `metric_base`.
pub fn improvement(metric_new: f64, metric_base: f64) -> Result<f64, EvalError> {
    if metric_base == 0.0 {
        return Err(EvalError::ZeroBase);
    }
    Ok((metric_new - metric_base) / metric_base)
}

/// Per-cutoff corpus means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub k: usize,
    pub recall: f64,
    pub mrr: f64,
    pub ckl: f64,
    /// Absent for K < 2, where pairwise distance is undefined.
    pub ild: Option<f64>,
}

/// Evaluation summary: one row per cutoff plus corpus size, timing and a
/// configuration echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub sequences: usize,
    pub mean_seconds_per_sequence: Option<f64>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-column text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>6} {:>10} {:>10} {:>10} {:>10}\n",
            "K", "Recall", "MRR", "C_KL", "ILD"
        ));
        for row in &self.rows {
            let ild = row
                .ild
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".to_string());
            out.push_str(&format!(
                "{:>6} {:>10.4} {:>10.4} {:>10.4} {:>10}\n",
                row.k, row.recall, row.mrr, row.ckl, ild
            ));
        }
        out.push_str(&format!("sequences: {}\n", self.sequences));
        if let Some(t) = self.mean_seconds_per_sequence {
            out.push_str(&format!("mean time per sequence: {t:.6e} s\n"));
        }
        out
    }
}

/// Runs a scorer over every test case and averages the per-sequence
/// metrics at each cutoff. The scorer must return a ranked list at least
/// as long as the largest cutoff. With `threads > 1` the cases fan out
/// over a local thread pool; per-case values are reduced in case order,
/// so the result does not depend on scheduling.
pub fn evaluate_corpus<F>(
    cases: &[SplitPair],
    catalog: &ItemCatalog,
    cutoffs: &[usize],
    alpha: f64,
    threads: usize,
    scorer: F,
) -> Result<EvalReport, EvalError>
where
    F: Fn(&InteractionSequence) -> Result<Vec<usize>, EvalError> + Sync,
{
    if cases.is_empty() {
        return Err(EvalError::NoCases);
    }
    let max_k = cutoffs.iter().copied().max().unwrap_or(0);

    let eval_one = |case: &SplitPair| -> Result<Vec<(f64, f64, f64, Option<f64>)>, EvalError> {
        let list = scorer(&case.prefix)?;
        if list.len() < max_k {
            return Err(EvalError::ListTooShort {
                need: max_k,
                got: list.len(),
            });
        }
        cutoffs
            .iter()
            .map(|&k| {
                let top = &list[..k];
                let recall = recall_at_k(top, case.target);
                let mrr = mrr_at_k(top, case.target);
                let c = ckl_at_k(top, &case.prefix, catalog, alpha)?;
                let ild = if k >= 2 {
                    Some(ild_at_k(top, catalog)?)
                } else {
                    None
                };
                Ok((recall, mrr, c, ild))
            })
            .collect()
    };

    let per_case: Vec<Vec<(f64, f64, f64, Option<f64>)>> = if threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        pool.install(|| cases.par_iter().map(eval_one).collect::<Result<_, _>>())?
    } else {
        cases.iter().map(eval_one).collect::<Result<_, _>>()?
    };

    let n = cases.len() as f64;
    let rows = cutoffs
        .iter()
        .enumerate()
        .map(|(slot, &k)| {
            let mut recall = 0.0;
            let mut mrr = 0.0;
            let mut c = 0.0;
            let mut ild_sum = 0.0;
            for case in &per_case {
                let (r, m, d, i) = case[slot];
                recall += r;
                mrr += m;
                c += d;
                ild_sum += i.unwrap_or(0.0);
            }
            MetricRow {
                k,
                recall: recall / n,
                mrr: mrr / n,
                ckl: c / n,
                ild: (k >= 2).then_some(ild_sum / n),
            }
        })
        .collect();

    Ok(EvalReport {
        rows,
        sequences: cases.len(),
        mean_seconds_per_sequence: None,
        config: serde_json::Value::Null,
    })
}

/// Mean wall-clock seconds per sequence for `scorer`, measured with a
/// monotonic clock. One untimed warm-up pass over all sequences, then
/// `repetitions` timed passes, strictly single-threaded.
pub fn bench_latency<F, R>(
    mut scorer: F,
    sequences: &[InteractionSequence],
    repetitions: usize,
) -> Result<f64, EvalError>
where
    F: FnMut(&InteractionSequence) -> R,
{
    if repetitions < 3 {
        return Err(EvalError::TooFewRepetitions(repetitions));
    }
    if sequences.is_empty() {
        return Err(EvalError::NoCases);
    }
    for seq in sequences {
        std::hint::black_box(scorer(seq));
    }
    let start = Instant::now();
    for _ in 0..repetitions {
        for seq in sequences {
            std::hint::black_box(scorer(seq));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok(elapsed / (repetitions * sequences.len()) as f64)
}

/// Writes recommendation lists as `user_id<TAB>item1,item2,...` with
/// external item ids, one line per sequence.
pub fn rec_lists_to_string(
    lists: &[(String, Vec<usize>)],
    catalog: &ItemCatalog,
) -> Result<String, EvalError> {
    let mut out = String::new();
    for (user, items) in lists {
        out.push_str(user);
        out.push('\t');
        for (pos, &item) in items.iter().enumerate() {
            if pos > 0 {
                out.push(',');
            }
            out.push_str(
                catalog
                    .item_id(item)
                    .ok_or(CatalogError::ItemIndexOutOfRange {
                        index: item,
                        count: catalog.item_count(),
                    })?,
            );
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn load_rec_lists(
    path: &Path,
    catalog: &ItemCatalog,
) -> Result<Vec<(String, Vec<usize>)>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_rec_lists(&text, catalog)
}

pub fn parse_rec_lists(
    text: &str,
    catalog: &ItemCatalog,
) -> Result<Vec<(String, Vec<usize>)>, EvalError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (user, rest) = line.split_once('\t').ok_or(EvalError::Parse {
            line: lineno + 1,
            reason: "expected `user_id<TAB>item1,item2,...`".to_string(),
        })?;
        let items: Result<Vec<usize>, EvalError> = rest
            .split(',')
            .map(|id| {
                catalog.item_index(id.trim()).ok_or(EvalError::Parse {
                    line: lineno + 1,
                    reason: format!("unknown item id {id:?}"),
                })
            })
            .collect();
        out.push((user.to_string(), items?));
    }
    Ok(out)
}
