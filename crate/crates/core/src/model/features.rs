//! Per-pixel input features, grouped the way the encoder consumes them.
//!
//! Covariates are assumed to be in roughly unit range already (the
//! simulator emits them that way); FRP enters as `ln(1 + frp)`.

use crate::targets::{Entity, TargetError, ACTIVE_FIRE, FRP};

pub const DRYNESS: &str = "dryness";
pub const FUEL: &str = "fuel";
pub const WIND_U: &str = "wind_u";
pub const WIND_V: &str = "wind_v";
pub const ELEVATION: &str = "elevation";

/// Channels every model input must carry.
pub const REQUIRED_CHANNELS: [&str; 7] =
    [DRYNESS, FUEL, WIND_U, WIND_V, ELEVATION, ACTIVE_FIRE, FRP];

pub const HIST_CHANNELS: usize = 9;
pub const WEATHER_CHANNELS: usize = 8;
pub const STATIC_CHANNELS: usize = 2;
pub const FIRE_HIST_CHANNELS: usize = 4;
pub const FIRE_SUMMARY_CHANNELS: usize = 2;

/// Condition groups injected into the memory, in a fixed order.
pub const CONDITION_GROUPS: [(&str, usize); 4] = [
    ("weather", WEATHER_CHANNELS),
    ("static", STATIC_CHANNELS),
    ("fire_hist", FIRE_HIST_CHANNELS),
    ("fire_summary", FIRE_SUMMARY_CHANNELS),
];

/// `(C, H, W)` stack of feature planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Planes {
    fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Non-overlapping `stride x stride` patches flattened to rows:
    /// `(H/stride * W/stride, C * stride^2)`, channel-major within a row.
    pub fn patches(&self, stride: usize) -> Vec<f64> {
        let (hs, ws) = (self.height / stride, self.width / stride);
        let cols = self.channels * stride * stride;
        let mut out = vec![0.0; hs * ws * cols];
        let n = self.height * self.width;
        for py in 0..hs {
            for px in 0..ws {
                let row = &mut out[(py * ws + px) * cols..(py * ws + px + 1) * cols];
                let mut k = 0;
                for c in 0..self.channels {
                    let plane = &self.data[c * n..(c + 1) * n];
                    for dy in 0..stride {
                        let y = py * stride + dy;
                        for dx in 0..stride {
                            row[k] = plane[y * self.width + px * stride + dx];
                            k += 1;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Encoder inputs for one entity.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub hist: Planes,
    /// One weather stack per memory step.
    pub weather: Vec<Planes>,
    pub static_: Planes,
    pub fire_hist: Planes,
    pub fire_summary: Planes,
}

impl Features {
    pub fn group(&self, name: &str, step: usize) -> &Planes {
        match name {
            "weather" => &self.weather[step],
            "static" => &self.static_,
            "fire_hist" => &self.fire_hist,
            "fire_summary" => &self.fire_summary,
            _ => &self.hist,
        }
    }
}

pub fn check_manifest(entity: &Entity) -> Result<(), TargetError> {
    for name in REQUIRED_CHANNELS {
        entity.channel_index(name)?;
    }
    Ok(())
}

fn burning(code: f32) -> f64 {
    if code >= 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Extracts all feature groups; `steps` splits the horizon's weather into
/// that many consecutive chunks.
pub fn extract(entity: &Entity, steps: usize) -> Result<Features, TargetError> {
    check_manifest(entity)?;
    if entity.horizon() == 0 {
        return Err(TargetError::EmptyHorizon);
    }
    let idx = |n: &str| entity.channel_index(n);
    let (dry, fuel, wu, wv, elev, af, frp) = (
        idx(DRYNESS)?,
        idx(FUEL)?,
        idx(WIND_U)?,
        idx(WIND_V)?,
        idx(ELEVATION)?,
        idx(ACTIVE_FIRE)?,
        idx(FRP)?,
    );
    let (h, w) = (entity.height(), entity.width());
    let n = h * w;
    let th = entity.history();
    let tp = entity.horizon();
    let vb = entity.valid_box();

    let mut hist = Planes::new(HIST_CHANNELS, h, w);
    let mut fire_hist = Planes::new(FIRE_HIST_CHANNELS, h, w);
    let mut summary = Planes::new(FIRE_SUMMARY_CHANNELS, h, w);
    let inv_th = 1.0 / th as f64;
    let rec_norm: f64 = (1..=th).map(|t| t as f64).sum();
    let last_start = th - (th / 4).max(1);
    let mut last_fire = vec![usize::MAX; n];
    for t in 0..th {
        let d = entity.frame(dry, t);
        let u = entity.frame(wu, t);
        let v = entity.frame(wv, t);
        let a = entity.frame(af, t);
        let p = entity.frame(frp, t);
        let chunk = t * FIRE_HIST_CHANNELS / th;
        let rw = (t + 1) as f64 / rec_norm;
        for i in 0..n {
            let b = burning(a[i]);
            hist.data[i] += d[i] as f64 * inv_th;
            hist.data[n + i] += u[i] as f64 * inv_th;
            hist.data[2 * n + i] += v[i] as f64 * inv_th;
            hist.data[3 * n + i] += b * inv_th;
            hist.data[4 * n + i] += (p[i].max(0.0) as f64).ln_1p() * inv_th;
            hist.data[5 * n + i] += b * rw;
            if t >= last_start && b > 0.0 {
                hist.data[6 * n + i] = 1.0;
            }
            if b > 0.0 {
                fire_hist.data[chunk * n + i] = 1.0;
                last_fire[i] = t;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let [ny, nx] = vb.normalize(y as f64, x as f64);
            hist.data[7 * n + y * w + x] = ny;
            hist.data[8 * n + y * w + x] = nx;
        }
    }
    for i in 0..n {
        if last_fire[i] == usize::MAX {
            summary.data[n + i] = 1.0;
        } else {
            summary.data[i] = 1.0;
            summary.data[n + i] = (th - 1 - last_fire[i]) as f64 * inv_th;
        }
    }

    let mut static_ = Planes::new(STATIC_CHANNELS, h, w);
    for (c, ch) in [(0, elev), (1, fuel)] {
        let src = entity.frame(ch, th - 1);
        for (o, &s) in static_.plane_mut(c).iter_mut().zip(src) {
            *o = s as f64;
        }
    }

    // chunk means/minima, plus horizon means shared by every step
    let chunk_stats = |lo: usize, hi: usize| {
        let mut out = vec![[0.0f64; 4]; n];
        for s in out.iter_mut() {
            s[1] = f64::INFINITY;
        }
        let k = (hi - lo) as f64;
        for t in lo..hi {
            let d = entity.frame(dry, th + t);
            let u = entity.frame(wu, th + t);
            let v = entity.frame(wv, th + t);
            for i in 0..n {
                out[i][0] += d[i] as f64 / k;
                out[i][1] = out[i][1].min(d[i] as f64);
                out[i][2] += u[i] as f64 / k;
                out[i][3] += v[i] as f64 / k;
            }
        }
        out
    };
    let whole = chunk_stats(0, tp);
    let mut weather = Vec::with_capacity(steps);
    for s in 0..steps {
        let lo = s * tp / steps;
        let hi = ((s + 1) * tp / steps).max(lo + 1).min(tp);
        let lo = lo.min(hi - 1);
        let part = chunk_stats(lo, hi);
        let mut planes = Planes::new(WEATHER_CHANNELS, h, w);
        for i in 0..n {
            for c in 0..4 {
                planes.data[c * n + i] = part[i][c];
                planes.data[(4 + c) * n + i] = whole[i][c];
            }
        }
        weather.push(planes);
    }

    Ok(Features {
        hist,
        weather,
        static_,
        fire_hist,
        fire_summary: summary,
    })
}
