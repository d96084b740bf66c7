//! Ground-truth fire-cluster targets.
//!
//! Future fire frames are reduced to a union mask inside the valid box,
//! grouped into clusters by Chebyshev-radius chaining, and summarised as
//! FRP-weighted centres in the box's unit square, ranked by mass.

mod entity;
mod jitter;

pub use entity::{Entity, ValidBox, ACTIVE_FIRE, FRP, UNOBSERVED};
pub use jitter::{apply_jitter, DEFAULT_MAX_JITTER};

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TargetError {
    #[error("entity has an empty prediction horizon")]
    EmptyHorizon,
    #[error("jitter ({dy}, {dx}) exceeds the allowed range {max}")]
    JitterRange { dy: i32, dx: i32, max: i32 },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("invalid entity: {0}")]
    Invalid(String),
}

/// Default grouping radius (a 7x7 footprint).
pub const DEFAULT_RADIUS: usize = 3;

/// Default minimum confidence code counted as burning.
pub const DEFAULT_MIN_CONFIDENCE: u8 = 2;

/// Row-major 2-D raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> &T {
        &self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.data[y * self.width + x] = value;
    }
}

pub type Mask = Grid<bool>;

/// Which part of the entity's time axis to reduce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    History,
    Future,
}

fn window_range(entity: &Entity, window: Window) -> std::ops::Range<usize> {
    match window {
        Window::History => 0..entity.history(),
        Window::Future => entity.history()..entity.frames(),
    }
}

/// Pixels burning at confidence `>= min_confidence` in any frame of the
/// window, restricted to the valid box.
pub fn fire_union(
    entity: &Entity,
    window: Window,
    min_confidence: u8,
) -> Result<Mask, TargetError> {
    let range = window_range(entity, window);
    if range.is_empty() {
        return Err(TargetError::EmptyHorizon);
    }
    if !(1..=3).contains(&min_confidence) {
        return Err(TargetError::Invalid(format!(
            "min_confidence {min_confidence} not in 1..=3"
        )));
    }
    let af = entity.channel_index(ACTIVE_FIRE)?;
    let (h, w) = (entity.height(), entity.width());
    let vb = entity.valid_box();
    let threshold = min_confidence as f32;
    let mut mask = Grid::filled(h, w, false);
    for t in range {
        let codes = entity.frame(af, t);
        for y in vb.y0..vb.y1 {
            for x in vb.x0..vb.x1 {
                if codes[y * w + x] >= threshold {
                    mask.set(y, x, true);
                }
            }
        }
    }
    Ok(mask)
}

/// Temporal union of the prediction horizon.
pub fn build_union_mask(entity: &Entity, min_confidence: u8) -> Result<Mask, TargetError> {
    fire_union(entity, Window::Future, min_confidence)
}

/// Per-pixel FRP summed over the frames of a window.
pub fn frp_sum(entity: &Entity, window: Window) -> Result<Grid<f64>, TargetError> {
    let frp = entity.channel_index(FRP)?;
    let mut out = Grid::filled(entity.height(), entity.width(), 0.0f64);
    for t in window_range(entity, window) {
        for (acc, &v) in out.data.iter_mut().zip(entity.frame(frp, t)) {
            *acc += v.max(0.0) as f64;
        }
    }
    Ok(out)
}

/// Component labels: 0 is background, components are `1..=count`.
#[derive(Clone, Debug, PartialEq)]
pub struct Labels {
    pub grid: Grid<u32>,
    pub count: usize,
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut a: usize) -> usize {
        while self.parent[a] != a {
            self.parent[a] = self.parent[self.parent[a]];
            a = self.parent[a];
        }
        a
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so roots stay at the first raster pixel
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Groups positive pixels: two pixels share a label iff a chain of positive
/// pixels links them with every step within Chebyshev distance `radius`.
///
/// Labels are numbered by the raster position of each component's first
/// pixel, which makes them independent of visiting order.
pub fn connected_components(mask: &Mask, radius: usize) -> Labels {
    let (h, w) = (mask.height, mask.width);
    let mut dsu = DisjointSet::new(h * w);
    let r = radius as isize;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            // only look forward in raster order; the backward half is symmetric
            for dy in 0..=r {
                let ny = y as isize + dy;
                if ny >= h as isize {
                    break;
                }
                let dx_start = if dy == 0 { 1 } else { -r };
                for dx in dx_start..=r {
                    let nx = x as isize + dx;
                    if nx < 0 || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if *mask.get(ny, nx) {
                        dsu.union(y * w + x, ny * w + nx);
                    }
                }
            }
        }
    }
    let mut grid = Grid::filled(h, w, 0u32);
    let mut root_label = vec![0u32; h * w];
    let mut count = 0u32;
    for i in 0..h * w {
        if !mask.data[i] {
            continue;
        }
        let root = dsu.find(i);
        if root_label[root] == 0 {
            count += 1;
            root_label[root] = count;
        }
        grid.data[i] = root_label[root];
    }
    Labels {
        grid,
        count: count as usize,
    }
}

/// One ground-truth fire cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Normalised `(y, x)` in the valid box.
    pub centre: [f64; 2],
    /// Total FRP.
    pub mass: f64,
    /// Pixel count.
    pub size: usize,
}

/// Ranked ground-truth clusters of one entity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetSet {
    pub clusters: Vec<Cluster>,
    /// Cluster count before truncation.
    pub total: usize,
    pub truncated: usize,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn centres(&self) -> Vec<[f64; 2]> {
        self.clusters.iter().map(|c| c.centre).collect()
    }
}

fn rank_order(a: &Cluster, b: &Cluster) -> Ordering {
    b.mass
        .total_cmp(&a.mass)
        .then(b.size.cmp(&a.size))
        .then(a.centre[0].total_cmp(&b.centre[0]))
        .then(a.centre[1].total_cmp(&b.centre[1]))
}

/// FRP-weighted centre per component (unweighted centroid when the
/// component carries no FRP), normalised by the valid box and ranked by
/// mass, then size, then position.
pub fn cluster_centres(labels: &Labels, frp: &Grid<f64>, valid_box: ValidBox) -> TargetSet {
    let n = labels.count;
    let mut mass = vec![0.0f64; n];
    let mut size = vec![0usize; n];
    let mut wsum = vec![[0.0f64; 2]; n];
    let mut usum = vec![[0.0f64; 2]; n];
    let w = labels.grid.width;
    for (i, &l) in labels.grid.data.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let k = l as usize - 1;
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let m = frp.data[i];
        mass[k] += m;
        size[k] += 1;
        wsum[k][0] += m * y;
        wsum[k][1] += m * x;
        usum[k][0] += y;
        usum[k][1] += x;
    }
    let mut clusters: Vec<Cluster> = (0..n)
        .map(|k| {
            let (cy, cx) = if mass[k] > 0.0 {
                (wsum[k][0] / mass[k], wsum[k][1] / mass[k])
            } else {
                (usum[k][0] / size[k] as f64, usum[k][1] / size[k] as f64)
            };
            Cluster {
                centre: valid_box.normalize(cy, cx),
                mass: mass[k],
                size: size[k],
            }
        })
        .collect();
    clusters.sort_by(rank_order);
    TargetSet {
        total: clusters.len(),
        truncated: 0,
        clusters,
    }
}

/// Keeps the first `q` clusters and records how many were dropped.
pub fn truncate_targets(targets: &TargetSet, q: usize) -> TargetSet {
    let keep = targets.clusters.len().min(q);
    TargetSet {
        clusters: targets.clusters[..keep].to_vec(),
        total: targets.total,
        truncated: targets.total.saturating_sub(q),
    }
}

/// Knobs for turning fire frames into clusters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub min_confidence: u8,
    pub radius: usize,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            min_confidence: DEFAULT_MIN_CONFIDENCE,
            radius: DEFAULT_RADIUS,
        }
    }
}

/// Clusters of one time window (future for targets, history for baselines).
pub fn window_targets(
    entity: &Entity,
    window: Window,
    config: &TargetConfig,
) -> Result<TargetSet, TargetError> {
    let mask = fire_union(entity, window, config.min_confidence)?;
    let labels = connected_components(&mask, config.radius);
    let frp = frp_sum(entity, window)?;
    Ok(cluster_centres(&labels, &frp, entity.valid_box()))
}

/// Full (untruncated) future target set.
pub fn build_targets(entity: &Entity, config: &TargetConfig) -> Result<TargetSet, TargetError> {
    window_targets(entity, Window::Future, config)
}
