use serde::{Deserialize, Serialize};

use super::TargetError;

pub const ACTIVE_FIRE: &str = "active_fire";
pub const FRP: &str = "frp";

/// Fire confidence code for an unobserved pixel-hour.
pub const UNOBSERVED: f32 = -1.0;

/// Central supervision/evaluation box, half-open pixel ranges `[y0, y1)` x `[x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl ValidBox {
    pub fn new(y0: usize, x0: usize, y1: usize, x1: usize) -> Self {
        Self { y0, x0, y1, x1 }
    }

    /// One-eighth margins on every side (`[16,16,112,112]` on a 128 grid).
    pub fn default_for(height: usize, width: usize) -> Self {
        let my = height / 8;
        let mx = width / 8;
        Self::new(my, mx, height - my, width - mx)
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }

    /// Pixel coordinates to the unit square of the box.
    pub fn normalize(&self, y: f64, x: f64) -> [f64; 2] {
        [
            (y - self.y0 as f64) / self.height() as f64,
            (x - self.x0 as f64) / self.width() as f64,
        ]
    }

    pub fn denormalize(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.y0 as f64 + p[0] * self.height() as f64,
            self.x0 as f64 + p[1] * self.width() as f64,
        ]
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.y0, self.x0, self.y1, self.x1]
    }
}

/// One sample: an `(F, T, H, W)` cube whose first `history` frames are the
/// observed window and the remainder the prediction horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    channels: Vec<String>,
    frames: usize,
    history: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    valid_box: ValidBox,
    /// Accumulated spatial shift `[dy, dx]`.
    pub jitter: [i32; 2],
}

impl Entity {
    /// Validates dimensions, manifest, fire codes and the valid box.
    ///
    /// A zero-length horizon is accepted here; target construction rejects it.
    pub fn new(
        channels: Vec<String>,
        frames: usize,
        history: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        valid_box: ValidBox,
    ) -> Result<Self, TargetError> {
        let expected = channels.len() * frames * height * width;
        if data.len() != expected {
            return Err(TargetError::Invalid(format!(
                "payload has {} values, dims need {expected}",
                data.len()
            )));
        }
        if history == 0 || history > frames {
            return Err(TargetError::Invalid(format!(
                "history {history} must be in 1..={frames}"
            )));
        }
        if valid_box.y0 >= valid_box.y1
            || valid_box.x0 >= valid_box.x1
            || valid_box.y1 > height
            || valid_box.x1 > width
        {
            return Err(TargetError::Invalid(format!(
                "valid box {:?} does not fit a {height}x{width} grid",
                valid_box.as_array()
            )));
        }
        let entity = Self {
            channels,
            frames,
            history,
            height,
            width,
            data,
            valid_box,
            jitter: [0, 0],
        };
        let af = entity.channel_index(ACTIVE_FIRE)?;
        let frp = entity.channel_index(FRP)?;
        let plane = height * width;
        for t in 0..frames {
            let codes = entity.frame(af, t);
            let power = entity.frame(frp, t);
            for i in 0..plane {
                let c = codes[i];
                if !matches!(c as i32, -1..=3) || c.fract() != 0.0 {
                    return Err(TargetError::Invalid(format!("bad fire code {c}")));
                }
                if c >= 1.0 && !(power[i] >= 0.0) {
                    return Err(TargetError::Invalid(format!("negative frp {}", power[i])));
                }
            }
        }
        Ok(entity)
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn horizon(&self) -> usize {
        self.frames - self.history
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn valid_box(&self) -> ValidBox {
        self.valid_box
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel_index(&self, name: &str) -> Result<usize, TargetError> {
        self.channels
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| TargetError::Manifest(format!("missing channel {name}")))
    }

    fn offset(&self, channel: usize, t: usize) -> usize {
        (channel * self.frames + t) * self.height * self.width
    }

    /// One `(H, W)` plane.
    pub fn frame(&self, channel: usize, t: usize) -> &[f32] {
        let o = self.offset(channel, t);
        &self.data[o..o + self.height * self.width]
    }

    pub fn frame_mut(&mut self, channel: usize, t: usize) -> &mut [f32] {
        let o = self.offset(channel, t);
        let n = self.height * self.width;
        &mut self.data[o..o + n]
    }

    /// Fill value for pixels that carry no data in a channel.
    pub fn missing_value(&self, channel: usize) -> f32 {
        if self.channels[channel] == ACTIVE_FIRE {
            UNOBSERVED
        } else {
            0.0
        }
    }
}
