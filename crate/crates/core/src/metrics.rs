//! Ranking metrics: AUC, grouped AUC (GAUC / Req-GAUC) and Recall@N-K.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from the Mann–Whitney rank statistic with
/// averaged tie ranks, which is exact for any input size that fits in `f64`
/// integers.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::UndefinedMetric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative labels".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sum of (1-based, tie-averaged) ranks of the positives, kept doubled so
    // every quantity stays an exact integer
    let mut doubled_rank_sum = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j average to (i+1+j)/2
        let doubled_avg = (i + 1 + j) as u64;
        let pos_in_tie = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        doubled_rank_sum += doubled_avg * pos_in_tie;
        i = j;
    }
    let n_pos = n_pos as u64;
    let doubled_u = doubled_rank_sum - n_pos * (n_pos + 1);
    Ok(doubled_u as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

/// `(group_id, score, label)` triples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupedScores {
    pub entries: Vec<(u64, f64, bool)>,
}

impl GroupedScores {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, group: u64, score: f64, label: bool) {
        self.entries.push((group, score, label));
    }

    fn by_group(&self) -> BTreeMap<u64, (Vec<f64>, Vec<bool>)> {
        let mut groups: BTreeMap<u64, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
        for &(g, s, l) in &self.entries {
            let e = groups.entry(g).or_default();
            e.0.push(s);
            e.1.push(l);
        }
        groups
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupedAuc {
    pub value: f64,
    pub groups_used: usize,
    /// Groups whose labels are all one class; they carry no AUC.
    pub groups_excluded: usize,
}

/// Weighted mean of per-group AUCs over groups that contain both classes.
/// `weight(group)` defaults to 1. Whether groups are users (GAUC) or
/// queries (Req-GAUC) is up to the caller's choice of group id.
pub fn grouped_auc(
    scores: &GroupedScores,
    weight: Option<&dyn Fn(u64) -> f64>,
) -> Result<GroupedAuc> {
    let (mut num, mut den) = (0.0, 0.0);
    let (mut used, mut excluded) = (0, 0);
    for (g, (s, l)) in scores.by_group() {
        let single_class = l.iter().all(|&x| x) || l.iter().all(|&x| !x);
        if single_class {
            excluded += 1;
            continue;
        }
        let w = weight.map_or(1.0, |f| f(g));
        num += w * auc(&s, &l)?;
        den += w;
        used += 1;
    }
    if used == 0 || den <= 0.0 {
        return Err(Error::UndefinedMetric(format!(
            "no group with both classes ({excluded} single-class groups)"
        )));
    }
    Ok(GroupedAuc {
        value: num / den,
        groups_used: used,
        groups_excluded: excluded,
    })
}

fn top_ids(list: &[(u64, f64)], n: usize) -> Vec<u64> {
    let mut sorted: Vec<&(u64, f64)> = list.iter().collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sorted.iter().take(n).map(|e| e.0).collect()
}

/// `|topN(candidates) ∩ topK(targets)| / K`, with lists of `(item_id, score)`
/// ranked by descending score and ties broken toward the lower id.
pub fn recall_at_n_k(
    candidates: &[(u64, f64)],
    targets: &[(u64, f64)],
    n: usize,
    k: usize,
) -> Result<f64> {
    if n == 0 || n > candidates.len() {
        return Err(Error::UndefinedMetric(format!(
            "N={n} invalid for {} candidates",
            candidates.len()
        )));
    }
    if k == 0 || k > targets.len() {
        return Err(Error::UndefinedMetric(format!(
            "K={k} invalid for {} targets",
            targets.len()
        )));
    }
    let top_n = top_ids(candidates, n);
    let hits = top_ids(targets, k)
        .iter()
        .filter(|id| top_n.contains(id))
        .count();
    Ok(hits as f64 / k as f64)
}
