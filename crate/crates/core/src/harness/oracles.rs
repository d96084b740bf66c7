//! Randomised cross-checks of the fast solvers against brute-force oracles.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::matching::hungarian;
use crate::matching::oracle::brute_force_assignment;
use crate::metrics::oracle::{brute_force_ap, brute_force_coverage_cost, pair_auroc};
use crate::metrics::{
    event_ap, match_for_coverage, render_union, union_auroc, valid_pixels, EvalEntity,
};
use crate::model::Predictions;
use crate::targets::{Cluster, Grid, TargetSet, ValidBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub cases: usize,
    pub mismatches: usize,
    pub max_abs_diff: f64,
    pub elapsed_ms: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

fn run(suite: &str, cases: usize, mut case: impl FnMut(usize) -> (bool, f64)) -> SuiteResult {
    let start = Instant::now();
    let mut mismatches = 0;
    let mut max_abs_diff = 0.0f64;
    for i in 0..cases {
        let (ok, diff) = case(i);
        mismatches += !ok as usize;
        max_abs_diff = max_abs_diff.max(diff);
    }
    SuiteResult {
        suite: suite.to_string(),
        cases,
        mismatches,
        max_abs_diff,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

/// Integer costs in `[-50, 50]` with `Q, K <= 7`; totals must match exactly.
pub fn hungarian_suite(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run("hungarian", cases, |_| {
        let (q, k) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
        let cost: Vec<f64> = (0..q * k)
            .map(|_| rng.gen_range(-50i32..=50) as f64)
            .collect();
        let pairs = hungarian(&cost, q, k).expect("finite costs");
        let fast: f64 = pairs.iter().map(|&(i, j)| cost[i * k + j]).sum();
        let (slow, _) = brute_force_assignment(&cost, q, k);
        (fast == slow && pairs.len() == q.min(k), (fast - slow).abs())
    })
}

const GRID: usize = 24;

/// Entity on a small grid whose valid box is the whole grid.
fn random_entity(rng: &mut ChaCha8Rng, max_preds: usize, max_gt: usize) -> EvalEntity {
    let s = GRID as f64;
    let n_pred = rng.gen_range(0..=max_preds);
    let n_gt = rng.gen_range(0..=max_gt);
    // coarse scores and integer positions make ties and exact distances common
    let probs: Vec<f64> = (0..n_pred)
        .map(|_| rng.gen_range(0..=5) as f64 / 5.0)
        .collect();
    let locs: Vec<[f64; 2]> = (0..n_pred)
        .map(|_| {
            [
                rng.gen_range(0..GRID) as f64 / s,
                rng.gen_range(0..GRID) as f64 / s,
            ]
        })
        .collect();
    let mut union = Grid::filled(GRID, GRID, false);
    let clusters: Vec<Cluster> = (0..n_gt)
        .map(|_| {
            let (y, x) = (rng.gen_range(0..GRID), rng.gen_range(0..GRID));
            union.set(y, x, true);
            Cluster {
                centre: [y as f64 / s, x as f64 / s],
                mass: rng.gen_range(1..10) as f64,
                size: 1,
            }
        })
        .collect();
    EvalEntity {
        preds: Predictions { probs, locs },
        targets: TargetSet {
            total: clusters.len(),
            truncated: 0,
            clusters,
        },
        union,
        valid_box: ValidBox::new(0, 0, GRID, GRID),
        regime: None,
    }
}

/// Micro-splits of up to four entities with up to five predictions each.
pub fn event_ap_suite(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run("event_ap", cases, |_| {
        let n = rng.gen_range(1..=4);
        let split: Vec<EvalEntity> = (0..n).map(|_| random_entity(&mut rng, 5, 4)).collect();
        let r = [7.0, 14.0, 21.0][rng.gen_range(0..3)];
        match (event_ap(&split, r), brute_force_ap(&split, r)) {
            (Some(a), Some(b)) => (a == b, (a - b).abs()),
            (a, b) => (a == b, 0.0),
        }
    })
}

/// Rendered union maps on small grids against pair counting.
pub fn auroc_suite(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run("union_auroc", cases, |_| {
        let n = rng.gen_range(1..=3);
        let split: Vec<EvalEntity> = (0..n).map(|_| random_entity(&mut rng, 4, 4)).collect();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for e in &split {
            let map = render_union(&e.preds, GRID, GRID, e.valid_box, 3.0);
            let (s, l) = valid_pixels(&map, &e.union, e.valid_box);
            scores.extend(s);
            labels.extend(l);
        }
        match (union_auroc(&split, 3.0), pair_auroc(&scores, &labels)) {
            (Some(a), Some(b)) => ((a - b).abs() <= 1e-9, (a - b).abs()),
            (a, b) => (a == b, 0.0),
        }
    })
}

/// One-to-one coverage matching with at most five points per side.
pub fn coverage_suite(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run("coverage_matching", cases, |_| {
        let e = random_entity(&mut rng, 5, 5);
        let preds = e.pred_pixels();
        let gts = e.target_pixels();
        let all: Vec<usize> = (0..preds.len()).collect();
        let pairs = match_for_coverage(&all, &preds, &gts);
        let fast: f64 = pairs.iter().map(|p| p.distance).sum();
        let slow = brute_force_coverage_cost(&preds, &gts);
        let diff = (fast - slow).abs();
        (
            diff <= 1e-9 && pairs.len() == preds.len().min(gts.len()),
            diff,
        )
    })
}

pub fn all_suites(seed: u64, cases: usize) -> Vec<SuiteResult> {
    vec![
        hungarian_suite(seed, cases),
        event_ap_suite(seed.wrapping_add(1), cases),
        auroc_suite(seed.wrapping_add(2), cases),
        coverage_suite(seed.wrapping_add(3), cases),
    ]
}
