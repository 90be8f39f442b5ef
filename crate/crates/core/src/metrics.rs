//! AUC and group AUC.
//!
//! AUC uses the rank-sum (Mann-Whitney) formulation with tied scores sharing
//! their average rank, so a tie between a positive and a negative counts ½.
//! The numerator is accumulated in doubled integer units, which makes the
//! result bit-identical to brute-force pair counting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{ItemId, UserId};

/// Number of equal-sized buckets in the report breakdowns.
pub const BREAKDOWN_GROUPS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub user: UserId,
    pub score: f64,
    pub label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<ItemId>,
}

impl EvalRecord {
    pub fn new(user: UserId, score: f64, label: bool) -> Self {
        EvalRecord {
            user,
            score,
            label,
            behavior_len: None,
            item: None,
        }
    }
}

/// Per-group weight in [`gauc`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupWeighting {
    /// Weight = number of records of the user.
    #[default]
    Impressions,
    Uniform,
}

/// Probability that a random positive outranks a random negative.
/// `None` when either class is absent.
pub fn auc(records: &[EvalRecord]) -> Option<f64> {
    let mut order: Vec<(f64, bool)> = records.iter().map(|r| (r.score, r.label)).collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let positives = order.iter().filter(|r| r.1).count() as u64;
    let negatives = order.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    // twice the positive rank sum: a tie block over 1-based ranks s..=e
    // contributes (s + e) per positive
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && order[end + 1].0 == order[start].0 {
            end += 1;
        }
        let pos_in_block = order[start..=end].iter().filter(|r| r.1).count() as u128;
        twice_rank_sum += pos_in_block * (start as u128 + 1 + end as u128 + 1);
        start = end + 1;
    }
    let p = positives as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Some(twice_u as f64 / (2 * positives as u128 * negatives as u128) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaucSummary {
    pub gauc: f64,
    pub valid_groups: usize,
    pub total_groups: usize,
    pub weighted_records: usize,
}

/// Weighted mean of per-user AUC over users having both labels.
pub fn gauc_with(records: &[EvalRecord], weighting: GroupWeighting) -> Option<GaucSummary> {
    let mut groups: BTreeMap<UserId, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.user).or_default().push(*r);
    }
    let total_groups = groups.len();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut valid = 0;
    let mut weighted_records = 0;
    let mut last = f64::NAN;
    for recs in groups.values() {
        if let Some(a) = auc(recs) {
            last = a;
            let w = match weighting {
                GroupWeighting::Impressions => recs.len() as f64,
                GroupWeighting::Uniform => 1.0,
            };
            num += w * a;
            den += w;
            valid += 1;
            weighted_records += recs.len();
        }
    }
    (valid > 0).then(|| GaucSummary {
        // w·a / w is not always a in floating point
        gauc: if valid == 1 { last } else { num / den },
        valid_groups: valid,
        total_groups,
        weighted_records,
    })
}

/// Impression-weighted GAUC. `None` when no user has both labels.
pub fn gauc(records: &[EvalRecord]) -> Option<f64> {
    gauc_with(records, GroupWeighting::Impressions).map(|s| s.gauc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBreakdown {
    /// 1-based bucket index, ascending in the grouping key.
    pub group: usize,
    pub records: usize,
    pub key_min: u64,
    pub key_max: u64,
    pub gauc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub gauc: Option<f64>,
    pub auc: Option<f64>,
    pub weighting: GroupWeighting,
    pub records: usize,
    pub positives: usize,
    pub groups_total: usize,
    pub groups_valid: usize,
    pub by_behavior_length: Vec<GroupBreakdown>,
    pub by_item_popularity: Vec<GroupBreakdown>,
}

/// Splits `keys` (sorted ascending) into `n` contiguous near-equal buckets.
fn bucket_bounds(len: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .map(|g| (g * len / n, (g + 1) * len / n))
        .filter(|(a, b)| b > a)
        .collect()
}

fn breakdown<K: Ord + Copy>(
    records: &[EvalRecord],
    weighting: GroupWeighting,
    key_of: impl Fn(&EvalRecord) -> Option<K>,
    rank_of: impl Fn(K, &[EvalRecord]) -> u64,
) -> Vec<GroupBreakdown> {
    let mut members: BTreeMap<K, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        if let Some(k) = key_of(r) {
            members.entry(k).or_default().push(*r);
        }
    }
    let mut keyed: Vec<(u64, K)> = members.iter().map(|(&k, recs)| (rank_of(k, recs), k)).collect();
    keyed.sort_unstable();
    bucket_bounds(keyed.len(), BREAKDOWN_GROUPS)
        .into_iter()
        .enumerate()
        .map(|(g, (a, b))| {
            let recs: Vec<EvalRecord> = keyed[a..b]
                .iter()
                .flat_map(|(_, k)| members[k].iter().copied())
                .collect();
            GroupBreakdown {
                group: g + 1,
                records: recs.len(),
                key_min: keyed[a].0,
                key_max: keyed[b - 1].0,
                gauc: gauc_with(&recs, weighting).map(|s| s.gauc),
            }
        })
        .collect()
}

/// Overall metrics plus nine-bucket breakdowns: users by behavior length and
/// items by impression count within `records`.
pub fn evaluate(records: &[EvalRecord], weighting: GroupWeighting) -> EvaluationReport {
    let summary = gauc_with(records, weighting);
    let total_groups = records
        .iter()
        .map(|r| r.user)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let by_behavior_length = breakdown(
        records,
        weighting,
        |r| r.behavior_len.map(|_| r.user),
        |_, recs| recs.iter().filter_map(|r| r.behavior_len).max().unwrap_or(0) as u64,
    );
    let by_item_popularity = breakdown(records, weighting, |r| r.item, |_, recs| recs.len() as u64);
    EvaluationReport {
        gauc: summary.as_ref().map(|s| s.gauc),
        auc: auc(records),
        weighting,
        records: records.len(),
        positives: records.iter().filter(|r| r.label).count(),
        groups_total: total_groups,
        groups_valid: summary.as_ref().map_or(0, |s| s.valid_groups),
        by_behavior_length,
        by_item_popularity,
    }
}
