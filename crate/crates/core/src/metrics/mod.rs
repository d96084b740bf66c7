//! Event-level, coverage, raster and query-set metrics.
//!
//! All distances are Euclidean in pixels after mapping normalised
//! coordinates back through the valid box.

pub mod oracle;

use serde::{Deserialize, Serialize};

use crate::matching::hungarian;
use crate::model::Predictions;
use crate::simulator::Regime;
use crate::targets::{
    build_union_mask, window_targets, Entity, Mask, TargetConfig, TargetError, TargetSet, ValidBox,
    Window,
};

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub radii: Vec<f64>,
    pub threshold: f64,
    pub sigma: f64,
    pub top_k: usize,
    /// Radius used for regime rows and other single-radius summaries.
    pub headline_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            radii: vec![7.0, 14.0, 21.0],
            threshold: 0.5,
            sigma: 3.0,
            top_k: 10,
            headline_radius: 14.0,
        }
    }
}

/// One entity's predictions next to its ground truth.
#[derive(Clone, Debug)]
pub struct EvalEntity {
    pub preds: Predictions,
    /// Untruncated targets.
    pub targets: TargetSet,
    pub union: Mask,
    pub valid_box: ValidBox,
    pub regime: Option<Regime>,
}

impl EvalEntity {
    pub fn new(
        entity: &Entity,
        preds: Predictions,
        cfg: &TargetConfig,
        regime: Option<Regime>,
    ) -> Result<Self, TargetError> {
        let union = build_union_mask(entity, cfg.min_confidence)?;
        let targets = window_targets(entity, Window::Future, cfg)?;
        Ok(Self {
            preds,
            targets,
            union,
            valid_box: entity.valid_box(),
            regime,
        })
    }

    pub fn pred_pixels(&self) -> Vec<[f64; 2]> {
        self.preds
            .locs
            .iter()
            .map(|&p| self.valid_box.denormalize(p))
            .collect()
    }

    pub fn target_pixels(&self) -> Vec<[f64; 2]> {
        self.targets
            .clusters
            .iter()
            .map(|c| self.valid_box.denormalize(c.centre))
            .collect()
    }

    /// Indices of queries at or above the threshold.
    pub fn positives(&self, threshold: f64) -> Vec<usize> {
        (0..self.preds.probs.len())
            .filter(|&q| self.preds.probs[q] >= threshold)
            .collect()
    }
}

/// One query per historical fire cluster at its centre, with probability 1.
pub fn persistence_baseline(
    entity: &Entity,
    cfg: &TargetConfig,
) -> Result<Predictions, TargetError> {
    let hist = window_targets(entity, Window::History, cfg)?;
    Ok(Predictions {
        probs: vec![1.0; hist.len()],
        locs: hist.centres(),
    })
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Greedy score-ordered event AP over a split: each prediction, in order of
/// descending probability, claims the nearest unclaimed centre of its own
/// entity within `r`. `AP = sum (R_i - R_{i-1}) * P_i`. Absent when the split
/// has no ground truth.
pub fn event_ap(entities: &[EvalEntity], r: f64) -> Option<f64> {
    let total_gt: usize = entities.iter().map(|e| e.targets.len()).sum();
    if total_gt == 0 {
        return None;
    }
    let pixels: Vec<(Vec<[f64; 2]>, Vec<[f64; 2]>)> = entities
        .iter()
        .map(|e| (e.pred_pixels(), e.target_pixels()))
        .collect();
    let mut order: Vec<(f64, usize, usize)> = entities
        .iter()
        .enumerate()
        .flat_map(|(ei, e)| {
            e.preds
                .probs
                .iter()
                .enumerate()
                .map(move |(q, &p)| (p, ei, q))
        })
        .collect();
    // stable: ties keep entity/query order
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut claimed: Vec<Vec<bool>> = entities
        .iter()
        .map(|e| vec![false; e.targets.len()])
        .collect();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for &(_, ei, q) in &order {
        seen += 1;
        let (preds, gts) = &pixels[ei];
        let mut best: Option<(f64, usize)> = None;
        for (k, g) in gts.iter().enumerate() {
            if claimed[ei][k] {
                continue;
            }
            let d = distance(preds[q], *g);
            if d <= r && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, k));
            }
        }
        if let Some((_, k)) = best {
            claimed[ei][k] = true;
            tp += 1;
            let recall = tp as f64 / total_gt as f64;
            ap += (recall - last_recall) * (tp as f64 / seen as f64);
            last_recall = recall;
        }
    }
    Some(ap)
}

/// Matched pair with its pixel distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoveragePair {
    pub query: usize,
    pub target: usize,
    pub distance: f64,
}

/// Minimum-total-distance one-to-one matching of the given queries to all
/// targets.
pub fn match_for_coverage(
    queries: &[usize],
    pred_px: &[[f64; 2]],
    target_px: &[[f64; 2]],
) -> Vec<CoveragePair> {
    if queries.is_empty() || target_px.is_empty() {
        return Vec::new();
    }
    let k = target_px.len();
    let cost: Vec<f64> = queries
        .iter()
        .flat_map(|&q| target_px.iter().map(move |g| distance(pred_px[q], *g)))
        .collect();
    hungarian(&cost, queries.len(), k)
        .expect("distances are finite")
        .into_iter()
        .map(|(i, j)| CoveragePair {
            query: queries[i],
            target: j,
            distance: cost[i * k + j],
        })
        .collect()
}

/// Covered mass over the mass of the `|pairs|` heaviest clusters.
pub fn mass_coverage(pairs: &[CoveragePair], masses: &[f64], r: f64) -> f64 {
    let covered: f64 = pairs
        .iter()
        .filter(|p| p.distance <= r)
        .map(|p| masses[p.target])
        .sum();
    let mut sorted = masses.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let denom: f64 = sorted.iter().take(pairs.len()).sum();
    if denom > 0.0 {
        covered / denom
    } else {
        0.0
    }
}

/// Fraction of pairs within `r`; absent without pairs.
pub fn hit_rate(pairs: &[CoveragePair], r: f64) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    Some(pairs.iter().filter(|p| p.distance <= r).count() as f64 / pairs.len() as f64)
}

/// `max_q p_q * exp(-|x - y_q|^2 / (2 sigma^2))` over the full grid, with
/// query locations mapped to pixels through the valid box.
pub fn render_union(
    preds: &Predictions,
    height: usize,
    width: usize,
    valid_box: ValidBox,
    sigma: f64,
) -> Vec<f64> {
    let mut map = vec![0.0f64; height * width];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (&p, &loc) in preds.probs.iter().zip(&preds.locs) {
        if p <= 0.0 {
            continue;
        }
        let [cy, cx] = valid_box.denormalize(loc);
        for y in 0..height {
            let dy = y as f64 - cy;
            for x in 0..width {
                let dx = x as f64 - cx;
                let v = p * (-(dy * dy + dx * dx) * inv).exp();
                let m = &mut map[y * width + x];
                if v > *m {
                    *m = v;
                }
            }
        }
    }
    map
}

/// Binary portable graymap (`P5`, 8-bit) of a `[0, 1]` map.
pub fn to_pgm(map: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        map.iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Values of `map` and mask labels inside the valid box.
pub fn valid_pixels(map: &[f64], mask: &Mask, vb: ValidBox) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::with_capacity(vb.height() * vb.width());
    let mut labels = Vec::with_capacity(scores.capacity());
    for y in vb.y0..vb.y1 {
        for x in vb.x0..vb.x1 {
            scores.push(map[y * mask.width + x]);
            labels.push(*mask.get(y, x));
        }
    }
    (scores, labels)
}

/// Rank-based AUROC with average ranks for ties; absent for a single class.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Rendered-map AUROC pooled over the valid pixels of every entity.
pub fn union_auroc(entities: &[EvalEntity], sigma: f64) -> Option<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for e in entities {
        let map = render_union(&e.preds, e.union.height, e.union.width, e.valid_box, sigma);
        let (s, l) = valid_pixels(&map, &e.union, e.valid_box);
        scores.extend(s);
        labels.extend(l);
    }
    auroc(&scores, &labels)
}

/// Mean rendered probability over the valid box, times 100.
pub fn mean_prob(e: &EvalEntity, sigma: f64) -> f64 {
    let map = render_union(&e.preds, e.union.height, e.union.width, e.valid_box, sigma);
    let (s, _) = valid_pixels(&map, &e.union, e.valid_box);
    100.0 * s.iter().sum::<f64>() / s.len().max(1) as f64
}

/// `1 - mean_k min(1, d_k)` in normalised units, unmatched clusters
/// counting 1; absent without ground truth.
pub fn subset_cover(preds: &Predictions, centres: &[[f64; 2]], threshold: f64) -> Option<f64> {
    let k = centres.len();
    if k == 0 {
        return None;
    }
    let pos: Vec<usize> = (0..preds.probs.len())
        .filter(|&q| preds.probs[q] >= threshold)
        .collect();
    let pairs = match_for_coverage(&pos, &preds.locs, centres);
    let mut miss = vec![1.0f64; k];
    for p in pairs {
        miss[p.target] = p.distance.min(1.0);
    }
    Some(1.0 - miss.iter().sum::<f64>() / k as f64)
}

pub fn subset_cover_xy(e: &EvalEntity, threshold: f64) -> Option<f64> {
    subset_cover(&e.preds, &e.targets.centres(), threshold)
}

/// Per-entity quantities that pooled metrics are built from.
#[derive(Clone, Debug)]
struct EntityStats {
    positives: usize,
    k: usize,
    pairs: Vec<CoveragePair>,
    top_pairs: Vec<CoveragePair>,
    masses: Vec<f64>,
    pos_px: Vec<[f64; 2]>,
    gt_px: Vec<[f64; 2]>,
}

fn entity_stats(e: &EvalEntity, cfg: &EvalConfig) -> EntityStats {
    let pred_px = e.pred_pixels();
    let gt_px = e.target_pixels();
    let pos = e.positives(cfg.threshold);
    let pairs = match_for_coverage(&pos, &pred_px, &gt_px);
    let mut ranked: Vec<usize> = (0..e.preds.probs.len()).collect();
    ranked.sort_by(|&a, &b| e.preds.probs[b].total_cmp(&e.preds.probs[a]));
    ranked.truncate(cfg.top_k);
    let top_pairs = match_for_coverage(&ranked, &pred_px, &gt_px);
    EntityStats {
        positives: pos.len(),
        k: gt_px.len(),
        pairs,
        top_pairs,
        masses: e.targets.clusters.iter().map(|c| c.mass).collect(),
        pos_px: pos.iter().map(|&q| pred_px[q]).collect(),
        gt_px,
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

/// Threshold-dependent metrics at one radius.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RadiusMetrics {
    pub radius: f64,
    pub ap: Option<f64>,
    pub mass_cov: Option<f64>,
    pub hit: Option<f64>,
    pub clus_prec: Option<f64>,
    pub clus_rec: Option<f64>,
    pub clus_f1: Option<f64>,
    pub top10_rec: Option<f64>,
    pub lrp: Option<f64>,
    pub duplicate_rate: Option<f64>,
}

fn radius_metrics(entities: &[EvalEntity], stats: &[EntityStats], r: f64) -> RadiusMetrics {
    let positives: usize = stats.iter().map(|s| s.positives).sum();
    let gt: usize = stats.iter().map(|s| s.k).sum();
    let all_pairs: Vec<CoveragePair> = stats.iter().flat_map(|s| s.pairs.iter().copied()).collect();
    let tp: Vec<&CoveragePair> = all_pairs.iter().filter(|p| p.distance <= r).collect();
    let n_tp = tp.len() as f64;
    let clus_prec = ratio(n_tp, positives as f64);
    let clus_rec = ratio(n_tp, gt as f64);
    let clus_f1 = match (clus_prec, clus_rec) {
        (Some(p), Some(q)) if p + q > 0.0 => Some(2.0 * p * q / (p + q)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    let top_tp = stats
        .iter()
        .flat_map(|s| s.top_pairs.iter())
        .filter(|p| p.distance <= r)
        .count() as f64;

    let with_gt: Vec<&EntityStats> = stats.iter().filter(|s| s.k > 0).collect();
    let mass_cov = (!with_gt.is_empty()).then(|| {
        with_gt
            .iter()
            .map(|s| mass_coverage(&s.pairs, &s.masses, r))
            .sum::<f64>()
            / with_gt.len() as f64
    });

    let fp = positives as f64 - n_tp;
    let fn_ = gt as f64 - n_tp;
    let loc: f64 = tp.iter().map(|p| p.distance / r).sum();
    let lrp = ratio(loc + fp + fn_, n_tp + fp + fn_);

    let mut near = 0usize;
    let mut covered = 0usize;
    for s in stats {
        let mut hit = vec![false; s.k];
        for p in &s.pos_px {
            let mut any = false;
            for (k, g) in s.gt_px.iter().enumerate() {
                if distance(*p, *g) <= r {
                    hit[k] = true;
                    any = true;
                }
            }
            near += any as usize;
        }
        covered += hit.iter().filter(|&&h| h).count();
    }
    let duplicate_rate = ratio(near.saturating_sub(covered) as f64, positives as f64);

    RadiusMetrics {
        radius: r,
        ap: event_ap(entities, r),
        mass_cov,
        hit: hit_rate(&all_pairs, r),
        clus_prec,
        clus_rec,
        clus_f1,
        top10_rec: ratio(top_tp, gt as f64),
        lrp,
        duplicate_rate,
    }
}

/// Headline metrics restricted to one regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub regime: Regime,
    pub entities: usize,
    pub hit: Option<f64>,
    pub ap: Option<f64>,
    pub rec: Option<f64>,
    pub avg_pred: Option<f64>,
    pub mean_prob: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub entities: usize,
    pub gt_clusters: usize,
    /// Share of ground-truth clusters beyond the query budget.
    pub truncation_rate: Option<f64>,
    pub radii: Vec<RadiusMetrics>,
    pub map: Option<f64>,
    pub union_auroc: Option<f64>,
    pub cardinality_error: f64,
    pub avg_pred: f64,
    pub mean_prob: f64,
    pub subset_cover_xy: Option<f64>,
    pub regimes: Vec<RegimeRow>,
}

impl MetricReport {
    pub fn at(&self, r: f64) -> Option<&RadiusMetrics> {
        self.radii.iter().find(|m| (m.radius - r).abs() < 1e-9)
    }

    pub fn regime(&self, regime: Regime) -> Option<&RegimeRow> {
        self.regimes.iter().find(|row| row.regime == regime)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn regime_rows(entities: &[EvalEntity], cfg: &EvalConfig) -> Vec<RegimeRow> {
    let mut rows = Vec::new();
    for regime in Regime::ALL {
        let subset: Vec<EvalEntity> = entities
            .iter()
            .filter(|e| e.regime == Some(regime))
            .cloned()
            .collect();
        if subset.is_empty() {
            continue;
        }
        let r = cfg.headline_radius;
        let mut row = RegimeRow {
            regime,
            entities: subset.len(),
            hit: None,
            ap: None,
            rec: None,
            avg_pred: None,
            mean_prob: None,
        };
        if regime.has_future_fire() {
            let stats: Vec<EntityStats> = subset.iter().map(|e| entity_stats(e, cfg)).collect();
            let m = radius_metrics(&subset, &stats, r);
            row.hit = m.hit;
            row.ap = m.ap;
            row.rec = m.clus_rec;
        } else {
            row.avg_pred = mean(
                subset
                    .iter()
                    .map(|e| e.positives(cfg.threshold).len() as f64),
            );
            row.mean_prob = mean(subset.iter().map(|e| mean_prob(e, cfg.sigma)));
        }
        rows.push(row);
    }
    rows
}

/// Full report over a split. `queries` sets the budget used for the
/// truncation rate.
pub fn evaluate(entities: &[EvalEntity], cfg: &EvalConfig, queries: usize) -> MetricReport {
    let stats: Vec<EntityStats> = entities.iter().map(|e| entity_stats(e, cfg)).collect();
    let radii: Vec<RadiusMetrics> = cfg
        .radii
        .iter()
        .map(|&r| radius_metrics(entities, &stats, r))
        .collect();
    let aps: Vec<f64> = radii.iter().filter_map(|m| m.ap).collect();
    let map = (aps.len() == radii.len() && !aps.is_empty())
        .then(|| aps.iter().sum::<f64>() / aps.len() as f64);
    let gt: usize = stats.iter().map(|s| s.k).sum();
    let truncated: usize = stats.iter().map(|s| s.k.saturating_sub(queries)).sum();
    let n = entities.len().max(1) as f64;
    MetricReport {
        version: REPORT_VERSION,
        entities: entities.len(),
        gt_clusters: gt,
        truncation_rate: ratio(truncated as f64, gt as f64),
        map,
        union_auroc: union_auroc(entities, cfg.sigma),
        cardinality_error: stats
            .iter()
            .map(|s| s.positives.abs_diff(s.k) as f64)
            .sum::<f64>()
            / n,
        avg_pred: stats.iter().map(|s| s.positives as f64).sum::<f64>() / n,
        mean_prob: entities
            .iter()
            .map(|e| mean_prob(e, cfg.sigma))
            .sum::<f64>()
            / n,
        subset_cover_xy: mean(
            entities
                .iter()
                .filter_map(|e| subset_cover_xy(e, cfg.threshold)),
        ),
        regimes: regime_rows(entities, cfg),
        radii,
    }
}
