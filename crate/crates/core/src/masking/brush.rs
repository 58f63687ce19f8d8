use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{Error, Result};

/// Random-walk brush stroke parameters. Ranges are inclusive `(min, max)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BrushConfig {
    pub width: usize,
    pub height: usize,
    pub strokes: (usize, usize),
    pub vertices: (usize, usize),
    pub brush_width: (f64, f64),
    pub step: (f64, f64),
    /// Maximum heading change per vertex, radians.
    pub turn: f64,
    pub coverage: (f64, f64),
    pub max_attempts: usize,
}

impl Default for BrushConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            strokes: (1, 4),
            vertices: (4, 10),
            brush_width: (4.0, 10.0),
            step: (4.0, 12.0),
            turn: 1.2,
            coverage: (0.05, 0.5),
            max_attempts: 200,
        }
    }
}

impl BrushConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Parameter(format!("brush config: {what}")));
        if self.width == 0 || self.height == 0 {
            return bad("empty canvas");
        }
        if self.strokes.0 == 0 || self.strokes.0 > self.strokes.1 {
            return bad("stroke count range");
        }
        if self.vertices.0 < 2 || self.vertices.0 > self.vertices.1 {
            return bad("vertex count range");
        }
        if !(self.brush_width.0 >= 2.0 && self.brush_width.0 <= self.brush_width.1) {
            return bad("brush width range must start at 2 or more");
        }
        if !(self.step.0 > 0.0 && self.step.0 <= self.step.1) {
            return bad("step range");
        }
        let (lo, hi) = self.coverage;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad("coverage range");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }
}

fn stamp_disk(mask: &mut Mask, cx: f64, cy: f64, radius: f64) {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let y0 = ((cy - radius).floor() as i64).max(0);
    let y1 = ((cy + radius).ceil() as i64).min(h - 1);
    let x0 = ((cx - radius).floor() as i64).max(0);
    let x1 = ((cx + radius).ceil() as i64).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= radius * radius {
                mask.set(y as usize, x as usize, true);
            }
        }
    }
}

/// Keeps a walk coordinate inside `[0, limit)` by mirroring at the edges.
fn bounce(v: f64, limit: f64) -> f64 {
    let hi = limit - 1e-6;
    let v = if v < 0.0 { -v } else { v };
    let v = if v > hi { 2.0 * hi - v } else { v };
    v.clamp(0.0, hi)
}

fn draw_stroke(rng: &mut ChaCha8Rng, cfg: &BrushConfig) -> Mask {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut mask = Mask::zeros(cfg.width, cfg.height);
    let radius = rng.gen_range(cfg.brush_width.0..=cfg.brush_width.1) / 2.0;
    let n = rng.gen_range(cfg.vertices.0..=cfg.vertices.1);
    let mut x = rng.gen_range(0.0..w);
    let mut y = rng.gen_range(0.0..h);
    let mut heading = rng.gen_range(0.0..std::f64::consts::TAU);
    stamp_disk(&mut mask, x, y, radius);
    for _ in 1..n {
        heading += rng.gen_range(-cfg.turn..=cfg.turn);
        let len = rng.gen_range(cfg.step.0..=cfg.step.1);
        let nx = bounce(x + len * heading.cos(), w);
        let ny = bounce(y + len * heading.sin(), h);
        let dist = ((nx - x).powi(2) + (ny - y).powi(2)).sqrt();
        let pieces = (dist / 0.5).ceil().max(1.0) as usize;
        for k in 1..=pieces {
            let t = k as f64 / pieces as f64;
            stamp_disk(&mut mask, x + t * (nx - x), y + t * (ny - y), radius);
        }
        // Turn back toward the canvas after a bounce.
        heading = (ny - y).atan2(nx - x);
        x = nx;
        y = ny;
    }
    mask
}

/// Individual strokes of the first attempt whose union meets the coverage range.
pub fn gen_brush_strokes(seed: u64, cfg: &BrushConfig) -> Result<Vec<Mask>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_attempts {
        let count = rng.gen_range(cfg.strokes.0..=cfg.strokes.1);
        let strokes: Vec<Mask> = (0..count).map(|_| draw_stroke(&mut rng, cfg)).collect();
        let mut union = Mask::zeros(cfg.width, cfg.height);
        for s in &strokes {
            union = union.union(s)?;
        }
        let c = union.coverage();
        if c >= cfg.coverage.0 && c <= cfg.coverage.1 {
            return Ok(strokes);
        }
    }
    Err(Error::Generation(format!(
        "no brush mask within coverage {:?} after {} attempts",
        cfg.coverage, cfg.max_attempts
    )))
}

/// Free-form hole mask made of random-walk brush strokes.
pub fn gen_brush_mask(seed: u64, cfg: &BrushConfig) -> Result<Mask> {
    let strokes = gen_brush_strokes(seed, cfg)?;
    let mut union = Mask::zeros(cfg.width, cfg.height);
    for s in &strokes {
        union = union.union(s)?;
    }
    Ok(union)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_mask() {
        let cfg = BrushConfig::default();
        assert_eq!(gen_brush_mask(7, &cfg).unwrap(), gen_brush_mask(7, &cfg).unwrap());
    }

    #[test]
    fn unreachable_coverage_is_a_generation_error() {
        let cfg = BrushConfig { coverage: (0.99, 1.0), max_attempts: 5, ..Default::default() };
        assert!(matches!(gen_brush_mask(1, &cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = BrushConfig { brush_width: (1.0, 3.0), ..Default::default() };
        assert!(matches!(gen_brush_mask(1, &cfg), Err(Error::Parameter(_))));
    }
}
