//! Synthetic corpora for the acceptance suite.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use dacsr_core::catalog::{build_catalog, ItemCatalog};
use dacsr_core::ingest::{split_and_augment, DatasetSplit, RawInteraction};

/// Clustered-interest corpus. Items fall into attribute clusters of two
/// sizes: "big" clusters serve as primary interests and "small" clusters
/// as secondary ones. Each user draws items uniformly from the active
/// cluster, switching between primary (share `primary_share`) and
/// secondary. The small-cluster size is chosen so the per-item hit
/// probability is similar across the two, which keeps top-K recall
/// nearly invariant when a calibrated model mixes secondary items in.
pub struct ClusteredSpec {
    pub users: usize,
    /// Number of (big, small) cluster pairs; total clusters = 2 * pairs.
    pub cluster_pairs: usize,
    pub big_items: usize,
    pub small_items: usize,
    /// Attributes per cluster; the attribute universe is
    /// `2 * cluster_pairs * attrs_per_cluster`.
    pub attrs_per_cluster: usize,
    pub seq_len: (usize, usize),
    /// Probability that an interaction stays in the primary cluster.
    pub primary_share: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ClusteredSpec {
    fn default() -> Self {
        Self {
            users: 320,
            cluster_pairs: 2,
            big_items: 60,
            small_items: 20,
            attrs_per_cluster: 2,
            seq_len: (10, 16),
            primary_share: 0.78,
            max_len: 30,
            seed: 0xACC5,
        }
    }
}

/// Each cluster is split into two attribute subgroups that a user visits
/// in strict alternation, while the item within the active subgroup is
/// uniform. The alternation gives the accuracy objective real structure
/// to learn over several epochs; the uniformity keeps per-item logits
/// flat inside a subgroup, so the soft list distribution never collapses
/// onto a single item even at sharp temperatures.
pub fn clustered_corpus(spec: &ClusteredSpec) -> DatasetSplit {
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let clusters = 2 * spec.cluster_pairs;
    let cluster_size = |c: usize| {
        if c % 2 == 0 {
            spec.big_items
        } else {
            spec.small_items
        }
    };
    let mut records: Vec<(String, Vec<String>)> = Vec::new();
    for c in 0..clusters {
        let size = cluster_size(c);
        for i in 0..size {
            let name = format!("c{c}i{i:03}");
            // Subgroup = item parity; each subgroup carries one of the
            // cluster's attributes, every fifth item carries both.
            let base = c * spec.attrs_per_cluster;
            let subgroup = i % 2;
            let mut labels = vec![format!("g{}", base + subgroup % spec.attrs_per_cluster)];
            if i % 5 == 0 && spec.attrs_per_cluster > 1 {
                labels.push(format!("g{}", base + (subgroup + 1) % spec.attrs_per_cluster));
            }
            records.push((name, labels));
        }
    }
    let catalog = build_catalog(&records).unwrap();

    let mut rows = Vec::new();
    for u in 0..spec.users {
        // Primary: a big cluster; secondary: a small cluster.
        let primary = 2 * (u % spec.cluster_pairs);
        let secondary = 2 * ((u / spec.cluster_pairs + u) % spec.cluster_pairs) + 1;
        let n = rng.random_range(spec.seq_len.0..=spec.seq_len.1);
        let mut ts = 1_000_000 + (u as i64) * 100_000;
        for t in 0..n {
            let cluster = if rng.random_range(0.0..1.0) < spec.primary_share {
                primary
            } else {
                secondary
            };
            // The active subgroup alternates with the step parity, so the
            // next subgroup is predictable while the item inside it stays
            // uniform.
            let subgroup = t % 2;
            let size = cluster_size(cluster);
            let pos = 2 * rng.random_range(0..size / 2) + subgroup;
            rows.push(RawInteraction::new(
                format!("u{u:04}"),
                format!("c{cluster}i{pos:03}"),
                ts,
            ));
            ts += rng.random_range(10..500);
        }
    }
    split_and_augment(&rows, spec.max_len, &catalog).unwrap()
}

/// Imbalanced-interest corpus: one attribute holds ~80% of every user's
/// history, two minor attributes share the rest. Items of the dominant
/// attribute partially overlap attribute sets so diversity can move.
pub struct ImbalancedSpec {
    pub users: usize,
    pub major_items: usize,
    pub minor_items: usize,
    pub seq_len: (usize, usize),
    pub major_share: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ImbalancedSpec {
    fn default() -> Self {
        Self {
            users: 280,
            major_items: 36,
            minor_items: 14,
            seq_len: (10, 15),
            major_share: 0.8,
            max_len: 30,
            seed: 0x1B15,
        }
    }
}

pub fn imbalanced_corpus(spec: &ImbalancedSpec) -> DatasetSplit {
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let mut records: Vec<(String, Vec<String>)> = Vec::new();
    // Major attribute A; minor attributes B and C. A few major items also
    // carry a minor attribute so lists over them are not zero-diversity.
    for i in 0..spec.major_items {
        let name = format!("a{i:03}");
        let labels = if i % 4 == 0 {
            vec!["A".to_string(), if i % 8 == 0 { "B" } else { "C" }.to_string()]
        } else {
            vec!["A".to_string()]
        };
        records.push((name, labels));
    }
    for i in 0..spec.minor_items {
        records.push((format!("b{i:03}"), vec!["B".to_string()]));
    }
    for i in 0..spec.minor_items {
        records.push((format!("c{i:03}"), vec!["C".to_string()]));
    }
    let catalog = build_catalog(&records).unwrap();

    let mut rows = Vec::new();
    for u in 0..spec.users {
        let n = rng.random_range(spec.seq_len.0..=spec.seq_len.1);
        let mut ts = 1_000_000 + (u as i64) * 100_000;
        let mut pos_major = rng.random_range(0..spec.major_items);
        let mut pos_minor = rng.random_range(0..spec.minor_items);
        let minor_kind = if u % 2 == 0 { 'b' } else { 'c' };
        for _ in 0..n {
            let item = if rng.random_range(0.0..1.0) < spec.major_share {
                pos_major = (pos_major + 1) % spec.major_items;
                format!("a{pos_major:03}")
            } else {
                pos_minor = (pos_minor + 1) % spec.minor_items;
                format!("{minor_kind}{pos_minor:03}")
            };
            rows.push(RawInteraction::new(format!("u{u:04}"), item, ts));
            ts += rng.random_range(10..500);
        }
    }
    split_and_augment(&rows, spec.max_len, &catalog).unwrap()
}

/// Corpus for the latency harness: a wide catalog of multi-attribute
/// items and histories covering most attributes, so the greedy
/// re-ranker's per-step divergence evaluations carry realistic weight.
pub fn latency_corpus(
    items: usize,
    attributes: usize,
    sequences: usize,
    seq_len: usize,
    seed: u64,
) -> (ItemCatalog, Vec<dacsr_core::InteractionSequence>) {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut records: Vec<(String, Vec<String>)> = Vec::new();
    for i in 0..items {
        // Four to six attributes per item, spread across the universe.
        let m = 4 + i % 3;
        let labels: Vec<String> = (0..m)
            .map(|k| format!("g{}", (i * 7 + k * 11 + k * k) % attributes))
            .collect();
        let mut labels = labels;
        labels.sort();
        labels.dedup();
        records.push((format!("i{i:04}"), labels));
    }
    let catalog = build_catalog(&records).unwrap();
    let seqs = (0..sequences)
        .map(|s| {
            let items: Vec<usize> = (0..seq_len)
                .map(|_| rng.random_range(0..items))
                .collect();
            dacsr_core::InteractionSequence::new(format!("u{s}"), items, None, &catalog).unwrap()
        })
        .collect();
    (catalog, seqs)
}
