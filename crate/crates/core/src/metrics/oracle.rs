//! Slow reference implementations used to cross-check the fast metrics.

use super::{distance, EvalEntity};

/// AP by rebuilding the greedy claim state from scratch for every prefix of
/// the score ranking.
pub fn brute_force_ap(entities: &[EvalEntity], r: f64) -> Option<f64> {
    let total: usize = entities.iter().map(|e| e.targets.len()).sum();
    if total == 0 {
        return None;
    }
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (ei, e) in entities.iter().enumerate() {
        for (q, &p) in e.preds.probs.iter().enumerate() {
            ranked.push((p, ei, q));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let prefix_tp = |n: usize| -> usize {
        let mut used: Vec<Vec<bool>> = entities
            .iter()
            .map(|e| vec![false; e.targets.len()])
            .collect();
        let mut tp = 0;
        for &(_, ei, q) in &ranked[..n] {
            let e = &entities[ei];
            let p = e.valid_box.denormalize(e.preds.locs[q]);
            let mut best = None;
            let mut best_d = f64::INFINITY;
            for (k, c) in e.targets.clusters.iter().enumerate() {
                let d = distance(p, e.valid_box.denormalize(c.centre));
                if !used[ei][k] && d <= r && d < best_d {
                    best = Some(k);
                    best_d = d;
                }
            }
            if let Some(k) = best {
                used[ei][k] = true;
                tp += 1;
            }
        }
        tp
    };
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for n in 1..=ranked.len() {
        let tp = prefix_tp(n);
        let recall = tp as f64 / total as f64;
        let precision = tp as f64 / n as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// AUROC by counting every positive/negative pair, ties worth one half.
pub fn pair_auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Minimum total distance over all one-to-one assignments of
/// `min(P, K)` predictions to targets, by enumeration.
pub fn brute_force_coverage_cost(preds: &[[f64; 2]], targets: &[[f64; 2]]) -> f64 {
    fn rec(
        i: usize,
        preds: &[[f64; 2]],
        targets: &[[f64; 2]],
        used: &mut [bool],
        left: usize,
    ) -> f64 {
        if left == 0 {
            return 0.0;
        }
        if preds.len() - i < left {
            return f64::INFINITY;
        }
        // skip prediction i
        let mut best = rec(i + 1, preds, targets, used, left);
        for k in 0..targets.len() {
            if used[k] {
                continue;
            }
            used[k] = true;
            let c = distance(preds[i], targets[k]) + rec(i + 1, preds, targets, used, left - 1);
            used[k] = false;
            best = best.min(c);
        }
        best
    }
    let mut used = vec![false; targets.len()];
    rec(0, preds, targets, &mut used, preds.len().min(targets.len()))
}
