use super::{Entity, TargetError};

pub const DEFAULT_MAX_JITTER: i32 = 8;

/// Shifts every channel by `(dy, dx)` pixels; negative `dy` moves content
/// up, positive `dx` moves it right. Vacated pixels take the channel's
/// missing value. The valid box stays fixed, so content can leave it.
pub fn apply_jitter(entity: &Entity, dy: i32, dx: i32, max: i32) -> Result<Entity, TargetError> {
    if dy.abs() > max || dx.abs() > max {
        return Err(TargetError::JitterRange { dy, dx, max });
    }
    let mut out = entity.clone();
    out.jitter = [entity.jitter[0] + dy, entity.jitter[1] + dx];
    if dy == 0 && dx == 0 {
        return Ok(out);
    }
    let (h, w) = (entity.height() as i32, entity.width() as i32);
    for c in 0..entity.num_channels() {
        let fill = entity.missing_value(c);
        for t in 0..entity.frames() {
            let src = entity.frame(c, t);
            let dst = out.frame_mut(c, t);
            for y in 0..h {
                let sy = y - dy;
                for x in 0..w {
                    let sx = x - dx;
                    dst[(y * w + x) as usize] = if sy >= 0 && sy < h && sx >= 0 && sx < w {
                        src[(sy * w + sx) as usize]
                    } else {
                        fill
                    };
                }
            }
        }
    }
    Ok(out)
}
