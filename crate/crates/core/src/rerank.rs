//! Post-processing re-ranking baselines over top-Z candidate lists.
//!
//! The greedy re-ranker builds the final list one item at a time; at each
//! step it adds the candidate that maximizes
//!
//! ```text
//! (1-λ) · Σ_{j ∈ RL ∪ {i}} score_j  -  λ · C_KL(p_hist, q(RL ∪ {i}))
//! ```
//!
//! with the same α-smoothed divergence the evaluator reports, so the
//! re-ranker optimizes exactly what is measured. The coverage-adaptive
//! variant scales λ by the fraction of attributes the history touches.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::catalog::{CatalogError, InteractionSequence, ItemCatalog};
use crate::distribution::{history_distribution, AttributeDistribution, DistributionError};

pub const DEFAULT_CANDIDATES: usize = 100;

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("empty candidate list")]
    EmptyCandidates,
    #[error("candidate items and scores differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("candidate scores must be nonincreasing (position {0})")]
    ScoresNotSorted(usize),
    #[error("duplicate candidate item at position {0}")]
    DuplicateItem(usize),
    #[error("K = {k} exceeds candidate count Z = {z}")]
    KExceedsCandidates { k: usize, z: usize },
    #[error("K must be >= 1")]
    ZeroK,
    #[error("lambda must lie in [0, 1], got {0}")]
    BadLambda(f64),
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

/// Top-Z candidates sorted by score, highest first, items distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateList {
    items: Vec<usize>,
    scores: Vec<f64>,
}

impl CandidateList {
    pub fn new(items: Vec<usize>, scores: Vec<f64>) -> Result<Self, RerankError> {
        if items.is_empty() {
            return Err(RerankError::EmptyCandidates);
        }
        if items.len() != scores.len() {
            return Err(RerankError::LengthMismatch(items.len(), scores.len()));
        }
        if let Some(pos) = scores.windows(2).position(|w| w[1] > w[0]) {
            return Err(RerankError::ScoresNotSorted(pos + 1));
        }
        let mut seen = std::collections::HashSet::new();
        for (pos, &item) in items.iter().enumerate() {
            if !seen.insert(item) {
                return Err(RerankError::DuplicateItem(pos));
            }
        }
        Ok(Self { items, scores })
    }

    /// Selects the top-`z` items of a full score vector, ties broken by
    /// lower item index. `z` is capped at the item count.
    pub fn from_scores(scores: &[f64], z: usize) -> Result<Self, RerankError> {
        if scores.is_empty() || z == 0 {
            return Err(RerankError::EmptyCandidates);
        }
        let z = z.min(scores.len());
        let cmp = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
        let mut order: Vec<usize> = (0..scores.len()).collect();
        // Partial selection first; only the top-z prefix needs ordering.
        if z < order.len() {
            order.select_nth_unstable_by(z - 1, cmp);
            order.truncate(z);
        }
        order.sort_unstable_by(cmp);
        let picked: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        Self::new(order, picked)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// The top-K prefix (pure score order).
    pub fn top_k(&self, k: usize) -> &[usize] {
        &self.items[..k.min(self.items.len())]
    }
}

/// Greedy calibrated re-ranking: picks K items from the candidates,
/// maximizing the trade-off objective at each step. Ties break toward the
/// higher raw score, then the lower item index.
pub fn greedy_rerank(
    cands: &CandidateList,
    p_hist: &AttributeDistribution,
    lambda: f64,
    k: usize,
    catalog: &ItemCatalog,
    alpha: f64,
) -> Result<Vec<usize>, RerankError> {
    if k == 0 {
        return Err(RerankError::ZeroK);
    }
    let z = cands.len();
    if k > z {
        return Err(RerankError::KExceedsCandidates { k, z });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(RerankError::BadLambda(lambda));
    }

    if !(0.0 < alpha && alpha < 1.0) {
        return Err(RerankError::Distribution(DistributionError::InvalidAlpha(
            alpha,
        )));
    }
    let g_count = catalog.attribute_count();
    let mut attr_sums = vec![0.0f64; g_count];
    let mut tentative = vec![0.0f64; g_count];
    let mut used = vec![false; z];
    let mut chosen = Vec::with_capacity(k);
    let mut score_sum = 0.0f64;

    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for pos in 0..z {
            if used[pos] {
                continue;
            }
            let item = cands.items[pos];
            let row = catalog.attribute_row(item)?;
            let next_len = (chosen.len() + 1) as f64;
            for ((t, &s), &r) in tentative.iter_mut().zip(&attr_sums).zip(row) {
                *t = (s + r) / next_len;
            }
            let divergence = crate::distribution::ckl_weights(p_hist.weights(), &tentative, alpha);
            let objective = (1.0 - lambda) * (score_sum + cands.scores[pos]) - lambda * divergence;
            let replace = match best {
                None => true,
                Some((best_pos, best_obj)) => {
                    objective > best_obj
                        || (objective == best_obj
                            && (cands.scores[pos] > cands.scores[best_pos]
                                || (cands.scores[pos] == cands.scores[best_pos]
                                    && item < cands.items[best_pos])))
                }
            };
            if replace {
                best = Some((pos, objective));
            }
        }
        let (pos, _) = best.expect("k <= z guarantees an unused candidate");
        used[pos] = true;
        score_sum += cands.scores[pos];
        let row = catalog.attribute_row(cands.items[pos])?;
        for (s, r) in attr_sums.iter_mut().zip(row) {
            *s += r;
        }
        chosen.push(cands.items[pos]);
    }
    Ok(chosen)
}

/// Coverage-adaptive trade-off: the fraction of attributes with nonzero
/// history mass, scaled by `lambda_max`. Broader histories get more
/// calibration pressure.
pub fn coverage_lambda(
    seq: &InteractionSequence,
    catalog: &ItemCatalog,
    lambda_max: f64,
) -> Result<f64, RerankError> {
    let p = history_distribution(seq, catalog)?;
    Ok(p.coverage() * lambda_max)
}

/// Serializes per-user candidate lists as
/// `user_id<TAB>item:score,item:score,...` with external item ids.
pub fn candidates_to_string(
    lists: &[(String, CandidateList)],
    catalog: &ItemCatalog,
) -> Result<String, RerankError> {
    let mut out = String::new();
    for (user, cands) in lists {
        out.push_str(user);
        out.push('\t');
        for (pos, (&item, &score)) in cands.items.iter().zip(&cands.scores).enumerate() {
            let id = catalog
                .item_id(item)
                .ok_or(CatalogError::ItemIndexOutOfRange {
                    index: item,
                    count: catalog.item_count(),
                })?;
            if pos > 0 {
                out.push(',');
            }
            let _ = write!(out, "{id}:{score}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn load_candidate_file(
    path: &Path,
    catalog: &ItemCatalog,
) -> Result<Vec<(String, CandidateList)>, RerankError> {
    let text = fs::read_to_string(path).map_err(|source| RerankError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_candidate_file(&text, catalog)
}

/// Parses `user_id<TAB>item:score,...` lines; items are external ids.
pub fn parse_candidate_file(
    text: &str,
    catalog: &ItemCatalog,
) -> Result<Vec<(String, CandidateList)>, RerankError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (user, rest) = line.split_once('\t').ok_or(RerankError::Parse {
            line: lineno + 1,
            reason: "expected `user_id<TAB>item:score,...`".to_string(),
        })?;
        let mut items = Vec::new();
        let mut scores = Vec::new();
        for part in rest.split(',') {
            let (id, score) = part.rsplit_once(':').ok_or(RerankError::Parse {
                line: lineno + 1,
                reason: format!("bad candidate entry {part:?}"),
            })?;
            let dense = catalog
                .item_index(id.trim())
                .ok_or_else(|| RerankError::Parse {
                    line: lineno + 1,
                    reason: format!("unknown item id {id:?}"),
                })?;
            let score: f64 = score.trim().parse().map_err(|_| RerankError::Parse {
                line: lineno + 1,
                reason: format!("bad score {score:?}"),
            })?;
            items.push(dense);
            scores.push(score);
        }
        out.push((user.to_string(), CandidateList::new(items, scores)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::build_catalog;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn catalog4() -> ItemCatalog {
        build_catalog(&[
            ("i0", vec!["g0"]),
            ("i1", vec!["g1"]),
            ("i2", vec!["g0", "g1"]),
            ("i3", vec!["g2"]),
            ("i4", vec!["g1", "g2"]),
            ("i5", vec!["g0"]),
            ("i6", vec!["g2"]),
            ("i7", vec!["g0", "g2"]),
            ("i8", vec!["g1"]),
            ("i9", vec!["g0", "g1"]),
        ])
        .unwrap()
    }

    fn dist(weights: Vec<f64>) -> AttributeDistribution {
        AttributeDistribution::from_weights(weights).unwrap()
    }

    #[test]
    fn candidate_list_validation() {
        assert!(CandidateList::new(vec![0, 1], vec![2.0, 1.0]).is_ok());
        assert!(matches!(
            CandidateList::new(vec![], vec![]),
            Err(RerankError::EmptyCandidates)
        ));
        assert!(matches!(
            CandidateList::new(vec![0, 1], vec![1.0, 2.0]),
            Err(RerankError::ScoresNotSorted(1))
        ));
        assert!(matches!(
            CandidateList::new(vec![0, 0], vec![2.0, 1.0]),
            Err(RerankError::DuplicateItem(1))
        ));
    }

    #[test]
    fn from_scores_selects_top_z() {
        let scores = [0.1, 0.9, 0.5, 0.9, 0.2];
        let c = CandidateList::from_scores(&scores, 3).unwrap();
        // Ties (items 1 and 3 at 0.9) break toward the lower index.
        assert_eq!(c.items(), &[1, 3, 2]);
        assert_eq!(c.scores(), &[0.9, 0.9, 0.5]);
    }

    #[test]
    fn lambda_zero_returns_pure_top_k() {
        let catalog = catalog4();
        let c = CandidateList::new(vec![3, 0, 4, 1], vec![3.0, 2.0, 1.5, 0.5]).unwrap();
        let p = dist(vec![0.5, 0.3, 0.2]);
        let out = greedy_rerank(&c, &p, 0.0, 3, &catalog, 0.01).unwrap();
        assert_eq!(out, vec![3, 0, 4]);
    }

    #[test]
    fn lambda_one_picks_calibrated_item_regardless_of_score() {
        // History entirely on g0; candidates are a g1 item (higher score)
        // and a g0 item. Pure calibration must pick the g0 item.
        let catalog = catalog4();
        let c = CandidateList::new(vec![1, 0], vec![10.0, 0.1]).unwrap();
        let p = dist(vec![1.0, 0.0, 0.0]);
        let out = greedy_rerank(&c, &p, 1.0, 1, &catalog, 0.01).unwrap();
        assert_eq!(out, vec![0]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let catalog = catalog4();
        let c = CandidateList::new(vec![0, 1], vec![1.0, 0.5]).unwrap();
        let p = dist(vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            greedy_rerank(&c, &p, 0.5, 3, &catalog, 0.01),
            Err(RerankError::KExceedsCandidates { k: 3, z: 2 })
        ));
        assert!(matches!(
            greedy_rerank(&c, &p, 1.5, 1, &catalog, 0.01),
            Err(RerankError::BadLambda(_))
        ));
        assert!(matches!(
            greedy_rerank(&c, &p, 0.5, 0, &catalog, 0.01),
            Err(RerankError::ZeroK)
        ));
    }

    /// Step-wise exhaustive oracle with its own divergence arithmetic:
    /// scans every remaining candidate each step and recomputes the list
    /// distribution from scratch.
    fn oracle_rerank(
        cands: &CandidateList,
        p_hist: &[f64],
        lambda: f64,
        k: usize,
        catalog: &ItemCatalog,
        alpha: f64,
    ) -> Vec<usize> {
        let mut chosen: Vec<usize> = Vec::new();
        let mut remaining: Vec<usize> = (0..cands.len()).collect();
        for _ in 0..k {
            let mut best_pos = None;
            let mut best_obj = f64::NEG_INFINITY;
            for &pos in &remaining {
                let mut list: Vec<usize> = chosen.clone();
                list.push(cands.items()[pos]);
                // From-scratch distribution of the tentative list.
                let g = catalog.attribute_count();
                let mut q = vec![0.0; g];
                for &it in &list {
                    for (acc, r) in q.iter_mut().zip(catalog.attribute_row(it).unwrap()) {
                        *acc += r;
                    }
                }
                for v in &mut q {
                    *v /= list.len() as f64;
                }
                // Independent smoothed KL.
                let mut div = 0.0;
                for (&pg, &qg) in p_hist.iter().zip(&q) {
                    if pg > 0.0 {
                        div += pg * (pg / ((1.0 - alpha) * qg + alpha * pg)).ln();
                    }
                }
                let div = div.max(0.0);
                let score_sum: f64 = chosen
                    .iter()
                    .map(|it| {
                        let p = cands.items().iter().position(|c| c == it).unwrap();
                        cands.scores()[p]
                    })
                    .sum::<f64>()
                    + cands.scores()[pos];
                let obj = (1.0 - lambda) * score_sum - lambda * div;
                let replace = obj > best_obj
                    || (obj == best_obj && {
                        let bp: usize = best_pos.unwrap();
                        cands.scores()[pos] > cands.scores()[bp]
                            || (cands.scores()[pos] == cands.scores()[bp]
                                && cands.items()[pos] < cands.items()[bp])
                    });
                if replace {
                    best_obj = obj;
                    best_pos = Some(pos);
                }
            }
            let pos = best_pos.unwrap();
            chosen.push(cands.items()[pos]);
            remaining.retain(|&p| p != pos);
        }
        chosen
    }

    #[test]
    fn matches_exhaustive_oracle_on_random_instances() {
        let catalog = catalog4();
        let mut rng = StdRng::seed_from_u64(97);
        for case in 0..200 {
            let z = rng.random_range(2..=10usize);
            let k = rng.random_range(1..=z.min(5));
            let lambda = [0.0, 0.3, 0.7, 1.0][case % 4];
            // Distinct items with decreasing random scores.
            let mut items: Vec<usize> = (0..10).collect();
            for i in (1..items.len()).rev() {
                let j = rng.random_range(0..=i);
                items.swap(i, j);
            }
            items.truncate(z);
            let mut scores: Vec<f64> = (0..z).map(|_| rng.random_range(0.0..5.0)).collect();
            scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let cands = CandidateList::new(items, scores).unwrap();
            let mut p = vec![
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ];
            let sum: f64 = p.iter().sum();
            for v in &mut p {
                *v /= sum;
            }
            let got = greedy_rerank(
                &cands,
                &dist(p.clone()),
                lambda,
                k,
                &catalog,
                0.01,
            )
            .unwrap();
            let want = oracle_rerank(&cands, &p, lambda, k, &catalog, 0.01);
            assert_eq!(got, want, "case {case}: z={z} k={k} lambda={lambda}");
        }
    }

    #[test]
    fn output_is_k_distinct_candidates() {
        let catalog = catalog4();
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let mut scores: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
            scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let cands = CandidateList::new((0..8).collect(), scores).unwrap();
            let out = greedy_rerank(
                &cands,
                &dist(vec![0.4, 0.4, 0.2]),
                0.5,
                4,
                &catalog,
                0.01,
            )
            .unwrap();
            assert_eq!(out.len(), 4);
            let set: std::collections::HashSet<_> = out.iter().collect();
            assert_eq!(set.len(), 4);
            assert!(out.iter().all(|i| cands.items().contains(i)));
        }
    }

    #[test]
    fn mean_divergence_is_nonincreasing_in_lambda() {
        // Population-level trend over 500 random instances.
        let catalog = catalog4();
        let mut rng = StdRng::seed_from_u64(11);
        let mut means = [0.0f64; 3];
        let lambdas = [0.0, 0.5, 1.0];
        let instances = 500;
        for _ in 0..instances {
            let mut scores: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..3.0)).collect();
            scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let cands = CandidateList::new((0..10).collect(), scores).unwrap();
            let mut p = vec![
                rng.random_range(0.01..1.0),
                rng.random_range(0.01..1.0),
                rng.random_range(0.01..1.0),
            ];
            let sum: f64 = p.iter().sum();
            for v in &mut p {
                *v /= sum;
            }
            let p = dist(p);
            for (slot, &lambda) in lambdas.iter().enumerate() {
                let list = greedy_rerank(&cands, &p, lambda, 5, &catalog, 0.01).unwrap();
                let q = crate::distribution::list_distribution(&list, &catalog).unwrap();
                means[slot] += ckl(&p, &q, 0.01).unwrap();
            }
        }
        for m in &mut means {
            *m /= instances as f64;
        }
        assert!(
            means[0] >= means[1] && means[1] >= means[2],
            "means not monotone: {means:?}"
        );
    }

    #[test]
    fn coverage_lambda_examples() {
        // 18 attributes; a single-attribute history gives 1/18 coverage.
        let records: Vec<(String, Vec<String>)> = (0..18)
            .map(|g| (format!("i{g}"), vec![format!("g{g}")]))
            .collect();
        let catalog = build_catalog(&records).unwrap();
        let seq = InteractionSequence::new("u", vec![0], None, &catalog).unwrap();
        let lam = coverage_lambda(&seq, &catalog, 0.9).unwrap();
        assert!((lam - 0.9 / 18.0).abs() < 1e-12);

        // All attributes covered: lambda_max itself.
        let full = InteractionSequence::new("u", (0..18).collect(), None, &catalog).unwrap();
        let lam_full = coverage_lambda(&full, &catalog, 1.0).unwrap();
        assert!((lam_full - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coverage_is_monotone_under_new_attributes() {
        let records: Vec<(String, Vec<String>)> = (0..6)
            .map(|g| (format!("i{g}"), vec![format!("g{g}")]))
            .collect();
        let catalog = build_catalog(&records).unwrap();
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.random_range(1..8usize);
            let items: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
            let seq = InteractionSequence::new("u", items.clone(), None, &catalog).unwrap();
            let before = coverage_lambda(&seq, &catalog, 1.0).unwrap();
            // Item 5 carries attribute g5, new to every generated history.
            let mut extended = items;
            extended.push(5);
            let seq2 = InteractionSequence::new("u", extended, None, &catalog).unwrap();
            let after = coverage_lambda(&seq2, &catalog, 1.0).unwrap();
            assert!(after >= before);
        }
    }

    #[test]
    fn candidate_file_roundtrip() {
        let catalog = catalog4();
        let lists = vec![
            (
                "u1".to_string(),
                CandidateList::new(vec![3, 0], vec![2.5, 1.0]).unwrap(),
            ),
            (
                "u2".to_string(),
                CandidateList::new(vec![7], vec![0.25]).unwrap(),
            ),
        ];
        let text = candidates_to_string(&lists, &catalog).unwrap();
        assert!(text.starts_with("u1\ti3:2.5,i0:1\n"));
        let parsed = parse_candidate_file(&text, &catalog).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].1.items(), lists[0].1.items());
        assert_eq!(parsed[0].1.scores(), lists[0].1.scores());
        assert_eq!(parsed[1].0, "u2");

        assert!(matches!(
            parse_candidate_file("u1\tnope:1.0\n", &catalog),
            Err(RerankError::Parse { line: 1, .. })
        ));
    }
}
