//! Cellular fire process on a grid with static and hourly covariates.

use rand::Rng;

/// FRP emitted per unit of fuel consumed in one hour.
pub const FRP_SCALE: f64 = 40.0;

const FUEL_EPS: f64 = 1e-9;

/// Fixed per-world fields plus hourly weather.
#[derive(Clone, Debug)]
pub struct Covariates {
    pub height: usize,
    pub width: usize,
    pub elevation: Vec<f64>,
    /// Dryness before weather modulation.
    pub dryness_base: Vec<f64>,
    /// Per-hour multiplier on `dryness_base`; 0 while raining.
    pub dryness_factor: Vec<f64>,
    pub raining: Vec<bool>,
    /// Per-hour domain wind `(u, v)`; `u` points along +x, `v` along +y.
    pub wind: Vec<[f64; 2]>,
    /// Static per-pixel wind perturbation.
    pub wind_noise: Vec<[f64; 2]>,
    /// Per-hour multiplier on the ignition probability.
    pub ignition_boost: Vec<f64>,
}

impl Covariates {
    pub fn hours(&self) -> usize {
        self.dryness_factor.len()
    }

    pub fn dryness(&self, t: usize, i: usize) -> f64 {
        self.dryness_base[i] * self.dryness_factor[t]
    }

    pub fn wind_at(&self, t: usize, i: usize) -> [f64; 2] {
        [
            (self.wind[t][0] + self.wind_noise[i][0]).clamp(-1.0, 1.0),
            (self.wind[t][1] + self.wind_noise[i][1]).clamp(-1.0, 1.0),
        ]
    }
}

/// Per-pixel fire state.
#[derive(Clone, Debug, PartialEq)]
pub struct FireState {
    pub burning: Vec<bool>,
    pub hours_burning: Vec<u32>,
    pub fuel: Vec<f64>,
    /// Fuel when the current burn started, sets the burn rate.
    pub fuel_at_ignition: Vec<f64>,
    /// FRP this hour; positive exactly where burning.
    pub intensity: Vec<f64>,
    /// Total fuel consumed so far, per pixel.
    pub consumed: Vec<f64>,
}

impl FireState {
    pub fn new(fuel: Vec<f64>) -> Self {
        let n = fuel.len();
        Self {
            burning: vec![false; n],
            hours_burning: vec![0; n],
            fuel,
            fuel_at_ignition: vec![0.0; n],
            intensity: vec![0.0; n],
            consumed: vec![0.0; n],
        }
    }

    /// Lights a pixel that still has fuel.
    pub fn ignite(&mut self, i: usize) -> bool {
        if self.burning[i] || self.fuel[i] <= FUEL_EPS {
            return false;
        }
        self.burning[i] = true;
        self.hours_burning[i] = 0;
        self.fuel_at_ignition[i] = self.fuel[i];
        true
    }

    pub fn any_burning(&self) -> bool {
        self.burning.iter().any(|&b| b)
    }
}

/// Process constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dynamics {
    pub p_ignite_base: f64,
    pub p_spread_base: f64,
    pub burn_duration: u32,
    /// Probability that a burning pixel goes out during a rain hour.
    pub rain_extinguish: f64,
    /// Wind alignment strength in `max(0, 1 + kappa cos theta)`.
    pub kappa: f64,
}

const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Advances the fire by one hour using the covariates of hour `t`.
///
/// Random draws happen in raster order, so a fixed generator state gives a
/// fixed trajectory.
pub fn step_fire<R: Rng>(
    state: &FireState,
    cov: &Covariates,
    t: usize,
    dynamics: &Dynamics,
    rng: &mut R,
) -> FireState {
    let (h, w) = (cov.height, cov.width);
    let mut next = state.clone();
    let raining = cov.raining[t];

    // burn-out and rain
    for i in 0..h * w {
        if !state.burning[i] {
            continue;
        }
        let done = state.hours_burning[i] >= dynamics.burn_duration || state.fuel[i] <= FUEL_EPS;
        let doused = raining && rng.gen::<f64>() < dynamics.rain_extinguish;
        if done || doused {
            next.burning[i] = false;
            next.intensity[i] = 0.0;
        }
    }

    // spontaneous ignition and spread from pixels still burning
    let p_ign = (dynamics.p_ignite_base * cov.ignition_boost[t]).min(1.0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if next.burning[i] || next.fuel[i] <= FUEL_EPS {
                continue;
            }
            let dry = cov.dryness(t, i);
            let fuel = next.fuel[i];
            if dry <= 0.0 {
                continue;
            }
            let mut p_none = 1.0 - p_ign * dry * fuel;
            for (dy, dx) in NEIGHBOURS {
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let j = sy as usize * w + sx as usize;
                if !(state.burning[j] && next.burning[j]) {
                    continue;
                }
                // direction from the source pixel to this one
                let (vy, vx) = (-dy as f64, -dx as f64);
                let norm = (vy * vy + vx * vx).sqrt();
                let wind = cov.wind_at(t, j);
                let speed = (wind[0] * wind[0] + wind[1] * wind[1]).sqrt();
                let cos = if speed > 0.0 {
                    (wind[0] * vx + wind[1] * vy) / (speed * norm)
                } else {
                    0.0
                };
                let align = (1.0 + dynamics.kappa * cos).max(0.0);
                let p = (dynamics.p_spread_base * dry * fuel * align).min(1.0);
                p_none *= 1.0 - p;
            }
            if rng.gen::<f64>() < 1.0 - p_none {
                next.ignite(i);
            }
        }
    }

    // fuel consumption
    for i in 0..h * w {
        if !next.burning[i] {
            continue;
        }
        let rate = next.fuel_at_ignition[i] / dynamics.burn_duration.max(1) as f64;
        let c = rate.min(next.fuel[i]);
        next.fuel[i] -= c;
        next.consumed[i] += c;
        next.intensity[i] = c * FRP_SCALE;
        next.hours_burning[i] += 1;
    }
    next
}
