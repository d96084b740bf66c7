//! Synthetic fire worlds and datasets of entities with known regimes.
//!
//! Each world has smooth fuel hotspots on a sparse background, a dryness
//! field modulated by a diurnal cycle and rain spells, a slowly veering
//! domain wind, and an hourly ignition rate with occasional lightning
//! bursts. Proposals are biased toward a requested regime and accepted only
//! when the emitted entity actually carries that regime.

mod world;

pub use world::{step_fire, Covariates, Dynamics, FireState, FRP_SCALE};

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::features::{DRYNESS, ELEVATION, FUEL, WIND_U, WIND_V};
use crate::targets::{
    fire_union, Entity, TargetError, ValidBox, Window, ACTIVE_FIRE, FRP, UNOBSERVED,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("window starting at hour {start} needs {needed} hours, trajectory has {available}")]
    Range {
        start: usize,
        needed: usize,
        available: usize,
    },
    #[error("could not reach regime {regime} after {attempts} proposals")]
    Mix { regime: Regime, attempts: usize },
    #[error("invalid world config: {0}")]
    Config(String),
    #[error(transparent)]
    Entity(#[from] TargetError),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Past-fire / future-fire category of an entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    NewIgnition,
    Continued,
    Extinguished,
    Quiescent,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::NewIgnition,
        Regime::Continued,
        Regime::Extinguished,
        Regime::Quiescent,
    ];

    pub fn from_flags(past_fire: bool, future_fire: bool) -> Self {
        match (past_fire, future_fire) {
            (false, true) => Regime::NewIgnition,
            (true, true) => Regime::Continued,
            (true, false) => Regime::Extinguished,
            (false, false) => Regime::Quiescent,
        }
    }

    pub fn has_future_fire(self) -> bool {
        matches!(self, Regime::NewIgnition | Regime::Continued)
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::NewIgnition => "new_ignition",
            Regime::Continued => "continued",
            Regime::Extinguished => "extinguished",
            Regime::Quiescent => "quiescent",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Regime from the fire channels alone.
pub fn regime_label(entity: &Entity, min_confidence: u8) -> Result<Regime> {
    let past = fire_union(entity, Window::History, min_confidence)?;
    let future = fire_union(entity, Window::Future, min_confidence)?;
    Ok(Regime::from_flags(
        past.data.iter().any(|&b| b),
        future.data.iter().any(|&b| b),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainConfig {
    /// Chance per hour that a rain spell starts outside the forced ones.
    pub spell_prob: f64,
    pub spell_hours: usize,
    /// Hours for dryness to recover linearly after a spell.
    pub recovery_hours: usize,
    pub extinguish_prob: f64,
}

/// Ignition-rate multipliers for one-hour bursts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurstConfig {
    /// History-window burst in fire proposals; mostly short-lived fires.
    pub clutter: f64,
    /// Future-window burst in new-ignition proposals.
    pub lightning: f64,
    /// Future-window burst scattering many ignitions.
    pub storm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub history: usize,
    pub horizon: usize,
    /// Hours simulated before the emitted window.
    pub warmup: usize,
    pub p_ignite_base: f64,
    pub p_spread_base: f64,
    pub burn_duration: u32,
    pub kappa: f64,
    pub rain: RainConfig,
    /// Fraction of pixel-hours reported as unobserved.
    pub dropout: f64,
    /// Intensity quantile separating code 3 from code 2.
    pub high_quantile: f64,
    /// Fractions for new ignition, continued, extinguished, quiescent.
    pub regime_mix: [f64; 4],
    /// Chance that a fire proposal gets a future ignition storm.
    pub storm_prob: f64,
    pub bursts: BurstConfig,
    pub min_confidence: u8,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            history: 16,
            horizon: 8,
            warmup: 12,
            p_ignite_base: 4e-5,
            p_spread_base: 0.3,
            burn_duration: 8,
            kappa: 0.5,
            rain: RainConfig {
                spell_prob: 0.01,
                spell_hours: 6,
                recovery_hours: 6,
                extinguish_prob: 0.85,
            },
            dropout: 0.05,
            high_quantile: 0.75,
            regime_mix: [0.2, 0.45, 0.1, 0.25],
            storm_prob: 0.12,
            bursts: BurstConfig {
                clutter: 150.0,
                lightning: 60.0,
                storm: 2500.0,
            },
            min_confidence: 2,
            max_attempts: 200,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        let ok = prob(self.p_ignite_base)
            && prob(self.p_spread_base)
            && prob(self.rain.spell_prob)
            && prob(self.rain.extinguish_prob)
            && prob(self.dropout)
            && prob(self.high_quantile)
            && prob(self.storm_prob)
            && self.regime_mix.iter().all(|&m| prob(m));
        if !ok {
            return Err(SimError::Config("probabilities must lie in [0, 1]".into()));
        }
        if (self.regime_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SimError::Config(format!(
                "regime mix {:?} does not sum to 1",
                self.regime_mix
            )));
        }
        if self.height < 8 || self.width < 8 || self.history == 0 || self.horizon == 0 {
            return Err(SimError::Config(
                "grid must be at least 8x8 with non-empty windows".into(),
            ));
        }
        if self.burn_duration == 0 || self.max_attempts == 0 {
            return Err(SimError::Config(
                "burn_duration and max_attempts must be positive".into(),
            ));
        }
        if !(1..=3).contains(&self.min_confidence) {
            return Err(SimError::Config("min_confidence must be 1..=3".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.history + self.horizon
    }

    pub fn total_hours(&self) -> usize {
        self.warmup + self.frames()
    }

    pub fn valid_box(&self) -> ValidBox {
        ValidBox::default_for(self.height, self.width)
    }

    pub fn channels() -> Vec<String> {
        [DRYNESS, FUEL, WIND_U, WIND_V, ELEVATION, ACTIVE_FIRE, FRP]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

/// Hourly record of a simulated world.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub covariates: Covariates,
    /// State after each hour's step, one per hour.
    pub states: Vec<FireState>,
}

/// Sum of Gaussian bumps rescaled to `[0, 1]`.
fn smooth_field<R: Rng>(
    rng: &mut R,
    h: usize,
    w: usize,
    bumps: usize,
    sigma: (f64, f64),
) -> Vec<f64> {
    let centres: Vec<(f64, f64, f64, f64)> = (0..bumps)
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(sigma.0..sigma.1),
                rng.gen_range(0.5..1.0),
            )
        })
        .collect();
    let mut f = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            f[y * w + x] = centres
                .iter()
                .map(|&(cy, cx, s, a)| {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    a * (-d2 / (2.0 * s * s)).exp()
                })
                .sum();
        }
    }
    let (lo, hi) = f
        .iter()
        .fold((f64::MAX, f64::MIN), |(l, u), &v| (l.min(v), u.max(v)));
    let span = (hi - lo).max(1e-12);
    f.iter_mut().for_each(|v| *v = (*v - lo) / span);
    f
}

/// Fire-related knobs of one proposal.
#[derive(Clone, Debug)]
struct Proposal {
    seeds: Vec<(usize, usize, usize)>,
    ignite_scale: f64,
    bursts: Vec<(usize, f64)>,
    /// First hour and length of a rain spell that ends the fires.
    forced_rain: Option<(usize, usize)>,
    dryness_scale: f64,
}

fn pick_hotspot<R: Rng>(
    rng: &mut R,
    fuel: &[f64],
    cfg: &WorldConfig,
    vb: ValidBox,
) -> (usize, usize) {
    let mut best = (vb.y0, vb.x0);
    let mut best_fuel = -1.0;
    for _ in 0..12 {
        let y = rng.gen_range(vb.y0 + 2..vb.y1 - 2);
        let x = rng.gen_range(vb.x0 + 2..vb.x1 - 2);
        if fuel[y * cfg.width + x] > best_fuel {
            best_fuel = fuel[y * cfg.width + x];
            best = (y, x);
        }
    }
    best
}

fn propose<R: Rng>(rng: &mut R, cfg: &WorldConfig, regime: Regime, fuel: &[f64]) -> Proposal {
    let vb = cfg.valid_box();
    let start = cfg.warmup;
    let boundary = cfg.warmup + cfg.history;
    let mut p = Proposal {
        seeds: Vec::new(),
        ignite_scale: 1.0,
        bursts: Vec::new(),
        forced_rain: None,
        dryness_scale: 1.0,
    };
    let storm = rng.gen::<f64>() < cfg.storm_prob;
    let future_hour =
        |rng: &mut R| rng.gen_range(boundary..boundary + cfg.horizon.saturating_sub(2).max(1));
    match regime {
        Regime::Quiescent => {
            p.ignite_scale = 0.02;
            p.dryness_scale = rng.gen_range(0.25..0.6);
        }
        Regime::NewIgnition => {
            p.ignite_scale = 0.02;
            let strength = if storm {
                cfg.bursts.storm
            } else {
                cfg.bursts.lightning
            };
            let hour = future_hour(rng);
            p.bursts.push((hour, strength));
        }
        Regime::Continued | Regime::Extinguished => {
            p.ignite_scale = 0.1;
            for _ in 0..rng.gen_range(1..4) {
                let (y, x) = pick_hotspot(rng, fuel, cfg, vb);
                let hour = rng.gen_range(0..start + cfg.history / 2);
                p.seeds.push((hour, y, x));
            }
            // short-lived clutter early in the history window
            let clutter = rng.gen_range(start..start + cfg.history / 2);
            p.bursts.push((clutter, cfg.bursts.clutter));
            if regime == Regime::Extinguished {
                p.forced_rain = Some((boundary - rng.gen_range(0..3), rng.gen_range(3..6)));
            } else if storm {
                let hour = future_hour(rng);
                p.bursts.push((hour, cfg.bursts.storm));
            }
        }
    }
    p
}

fn build_covariates<R: Rng>(rng: &mut R, cfg: &WorldConfig, proposal: &Proposal) -> Covariates {
    let (h, w) = (cfg.height, cfg.width);
    let hours = cfg.total_hours();
    let elevation = smooth_field(rng, h, w, 4, (8.0, 24.0));
    let dry_field = smooth_field(rng, h, w, 3, (10.0, 30.0));
    let dryness_base: Vec<f64> = dry_field
        .iter()
        .map(|&d| (0.45 + 0.55 * d) * proposal.dryness_scale)
        .collect();

    let mut raining = vec![false; hours];
    let mut t = 0;
    while t < hours {
        if rng.gen::<f64>() < cfg.rain.spell_prob {
            for r in raining.iter_mut().skip(t).take(cfg.rain.spell_hours) {
                *r = true;
            }
            t += cfg.rain.spell_hours;
        } else {
            t += 1;
        }
    }
    if let Some((start, len)) = proposal.forced_rain {
        for r in raining.iter_mut().skip(start).take(len) {
            *r = true;
        }
    }
    let phase = rng.gen_range(0.0..24.0);
    let mut since_rain = usize::MAX / 2;
    let dryness_factor: Vec<f64> = (0..hours)
        .map(|t| {
            if raining[t] {
                since_rain = 0;
                return 0.0;
            }
            since_rain += 1;
            let recovery = (since_rain as f64 / cfg.rain.recovery_hours.max(1) as f64).min(1.0);
            let diurnal = 0.85 + 0.15 * (std::f64::consts::TAU * (t as f64 + phase) / 24.0).sin();
            recovery * diurnal
        })
        .collect();

    let mut theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let speed = rng.gen_range(0.3..1.0);
    let wind = (0..hours)
        .map(|_| {
            theta += rng.gen_range(-0.08..0.08);
            [speed * theta.cos(), speed * theta.sin()]
        })
        .collect();
    let wind_noise = (0..h * w)
        .map(|_| [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)])
        .collect();

    let mut ignition_boost = vec![proposal.ignite_scale; hours];
    for &(hour, strength) in &proposal.bursts {
        if hour < hours {
            ignition_boost[hour] = strength;
        }
    }
    Covariates {
        height: h,
        width: w,
        elevation,
        dryness_base,
        dryness_factor,
        raining,
        wind,
        wind_noise,
        ignition_boost,
    }
}

/// Simulates one world biased toward `regime`, deterministic in `seed`.
pub fn simulate(cfg: &WorldConfig, regime: Regime, seed: u64) -> Result<Trajectory> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let bumps = rng.gen_range(3..7);
    let hot = smooth_field(&mut rng, h, w, bumps, (2.5, 6.0));
    let fuel: Vec<f64> = hot
        .iter()
        .map(|&v| (0.06 + 0.94 * v.powf(1.5)).min(1.0))
        .collect();
    let proposal = propose(&mut rng, cfg, regime, &fuel);
    let covariates = build_covariates(&mut rng, cfg, &proposal);
    let dynamics = Dynamics {
        p_ignite_base: cfg.p_ignite_base,
        p_spread_base: cfg.p_spread_base,
        burn_duration: cfg.burn_duration,
        rain_extinguish: cfg.rain.extinguish_prob,
        kappa: cfg.kappa,
    };
    let mut dyn_rng = ChaCha8Rng::seed_from_u64(seed);
    dyn_rng.set_stream(1);
    let mut state = FireState::new(fuel);
    let mut states = Vec::with_capacity(cfg.total_hours());
    for t in 0..cfg.total_hours() {
        for &(hour, y, x) in &proposal.seeds {
            if hour == t && covariates.dryness(t, y * w + x) > 0.0 {
                state.ignite(y * w + x);
            }
        }
        state = step_fire(&state, &covariates, t, &dynamics, &mut dyn_rng);
        states.push(state.clone());
    }
    Ok(Trajectory { covariates, states })
}

/// Turns hours `[start, start + T_h + T_p)` into an entity.
///
/// Burning pixels get code 3 at or above the configured intensity quantile
/// of the window and code 2 below it; a random fraction of pixel-hours is
/// reported unobserved (code -1, FRP 0).
pub fn emit_entity(
    traj: &Trajectory,
    start: usize,
    cfg: &WorldConfig,
    seed: u64,
) -> Result<Entity> {
    let frames = cfg.frames();
    let available = traj.states.len();
    if start + frames > available {
        return Err(SimError::Range {
            start,
            needed: frames,
            available,
        });
    }
    let cov = &traj.covariates;
    let (h, w) = (cov.height, cov.width);
    let plane = h * w;
    let channels = WorldConfig::channels();
    let mut data = vec![0.0f32; channels.len() * frames * plane];

    let mut intensities: Vec<f64> = (start..start + frames)
        .flat_map(|t| {
            traj.states[t]
                .intensity
                .iter()
                .copied()
                .filter(|&v| v > 0.0)
        })
        .collect();
    intensities.sort_by(f64::total_cmp);
    let high = if intensities.is_empty() {
        f64::INFINITY
    } else {
        let k = ((intensities.len() - 1) as f64 * cfg.high_quantile).round() as usize;
        intensities[k]
    };

    let mut obs = ChaCha8Rng::seed_from_u64(seed);
    obs.set_stream(2);
    for f in 0..frames {
        let t = start + f;
        let s = &traj.states[t];
        let at = |c: usize| (c * frames + f) * plane;
        for i in 0..plane {
            let wind = cov.wind_at(t, i);
            data[at(0) + i] = cov.dryness(t, i) as f32;
            data[at(1) + i] = s.fuel[i] as f32;
            data[at(2) + i] = wind[0] as f32;
            data[at(3) + i] = wind[1] as f32;
            data[at(4) + i] = cov.elevation[i] as f32;
            let unobserved = obs.gen::<f64>() < cfg.dropout;
            let (code, frp) = if unobserved {
                (UNOBSERVED, 0.0)
            } else if s.burning[i] {
                (
                    if s.intensity[i] >= high { 3.0 } else { 2.0 },
                    s.intensity[i] as f32,
                )
            } else {
                (0.0, 0.0)
            };
            data[at(5) + i] = code;
            data[at(6) + i] = frp;
        }
    }
    Ok(Entity::new(
        channels,
        frames,
        cfg.history,
        h,
        w,
        data,
        cfg.valid_box(),
    )?)
}

/// Dataset split names in seed-partition order.
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Bijective 64-bit mixer, so distinct keys give distinct world seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// World seed for a split/slot/attempt; key ranges never overlap across
/// splits and `mix64` is a bijection.
pub fn world_seed(base: u64, split: usize, slot: usize, attempt: usize) -> u64 {
    let key =
        ((split as u64) << 56) | ((slot as u64 & 0xff_ffff) << 24) | (attempt as u64 & 0xff_ffff);
    mix64(key ^ mix64(base))
}

/// Per-regime counts by largest remainder.
pub fn regime_counts(mix: &[f64; 4], n: usize) -> [usize; 4] {
    let raw: Vec<f64> = mix.iter().map(|m| m * n as f64).collect();
    let mut counts: [usize; 4] = [0; 4];
    for (c, r) in counts.iter_mut().zip(&raw) {
        *c = r.floor() as usize;
    }
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .total_cmp(&(raw[a] - raw[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// One generated sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub entity: Entity,
    pub regime: Regime,
    pub seed: u64,
}

/// Generates one split by regime-biased proposals with rejection.
pub fn generate_split(cfg: &WorldConfig, split: usize, n: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let counts = regime_counts(&cfg.regime_mix, n);
    let mut slots: Vec<Regime> = Regime::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&r, c)| std::iter::repeat(r).take(c))
        .collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ split as u64));
    slots.shuffle(&mut order_rng);
    let mut out = Vec::with_capacity(n);
    for (slot, &regime) in slots.iter().enumerate() {
        let mut accepted = None;
        for attempt in 0..cfg.max_attempts {
            let seed = world_seed(cfg.seed, split, slot, attempt);
            let traj = simulate(cfg, regime, seed)?;
            let entity = emit_entity(&traj, cfg.warmup, cfg, seed)?;
            if regime_label(&entity, cfg.min_confidence)? == regime {
                accepted = Some(Sample {
                    entity,
                    regime,
                    seed,
                });
                break;
            }
        }
        out.push(accepted.ok_or(SimError::Mix {
            regime,
            attempts: cfg.max_attempts,
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
