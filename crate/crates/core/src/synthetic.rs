//! Procedural test sequences with exact ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::GrayImage;

/// A square occluder centred on the target for frames `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occlusion {
    pub start: usize,
    pub end: usize,
    /// Fraction of the target area hidden.
    pub coverage: f64,
}

impl Occlusion {
    pub fn active(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub target_side: usize,
    pub frames: usize,
    /// Horizontal speed in pixels per frame; the target bounces between margins.
    pub speed: usize,
    pub margin: usize,
    pub seed: u64,
    pub occlusion: Option<Occlusion>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            target_side: 64,
            frames: 200,
            speed: 2,
            margin: 16,
            seed: 7,
            occlusion: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub frames: Vec<GrayImage>,
    /// 0-based `(x, y, w, h)` per frame.
    pub ground_truth: Vec<[f64; 4]>,
}

struct Wave {
    amp: f64,
    fx: f64,
    fy: f64,
    phase: f64,
}

fn random_waves(rng: &mut ChaCha8Rng, count: usize, max_freq: f64, total_amp: f64) -> Vec<Wave> {
    (0..count)
        .map(|_| Wave {
            amp: total_amp / count as f64,
            fx: rng.random_range(-max_freq..max_freq),
            fy: rng.random_range(-max_freq..max_freq),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect()
}

fn eval_waves(waves: &[Wave], u: f64, v: f64) -> f64 {
    waves.iter().map(|w| w.amp * (w.fx * u + w.fy * v + w.phase).sin()).sum()
}

/// Left edge of the target at `frame`: starts near the left margin and bounces.
fn target_x(cfg: &SyntheticConfig, frame: usize) -> usize {
    let span = cfg.width - cfg.target_side - 2 * cfg.margin;
    if span == 0 {
        return cfg.margin;
    }
    let travel = (cfg.margin + frame * cfg.speed) % (2 * span);
    let offset = if travel <= span { travel } else { 2 * span - travel };
    cfg.margin + offset
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticSequence {
    assert!(
        cfg.width >= cfg.target_side + 2 * cfg.margin && cfg.height >= cfg.target_side,
        "frame too small for the target"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let target = random_waves(&mut rng, 6, 0.45, 0.42);
    let background = random_waves(&mut rng, 3, 0.06, 0.12);
    let side = cfg.target_side;
    let y0 = (cfg.height - side) / 2;

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut ground_truth = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let x0 = target_x(cfg, f);
        let hidden = cfg.occlusion.filter(|o| o.active(f)).map(|o| {
            let s = ((side * side) as f64 * o.coverage).sqrt().round() as usize;
            let lo = (side - s.min(side)) / 2;
            (lo, lo + s.min(side))
        });
        let frame = GrayImage::from_fn(cfg.width, cfg.height, |x, y| {
            let inside = (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y);
            if !inside {
                return 0.35 + eval_waves(&background, x as f64, y as f64);
            }
            let (u, v) = (x - x0, y - y0);
            if let Some((lo, hi)) = hidden {
                if (lo..hi).contains(&u) && (lo..hi).contains(&v) {
                    return if (x / 3) % 2 == 0 { 0.15 } else { 0.85 };
                }
            }
            0.5 + eval_waves(&target, u as f64, v as f64)
        });
        frames.push(frame);
        ground_truth.push([x0 as f64, y0 as f64, side as f64, side as f64]);
    }
    SyntheticSequence { frames, ground_truth }
}
