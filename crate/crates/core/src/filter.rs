//! Particle filter over six-parameter affine states.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::TEMPLATE_SIDE;

/// Candidate pose.
///
/// `(lx, ly)` is the region center in frame pixels, `theta` the rotation,
/// `s` the region width in units of the 32-pixel template side, `psi` the
/// height/width aspect ratio and `phi` the skew. The unit square maps into the
/// frame as `Translate(lx, ly) ∘ Rotate(theta) ∘ Skew(phi) ∘ Scale(32 s, 32 s psi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineState {
    pub lx: f64,
    pub ly: f64,
    pub theta: f64,
    pub s: f64,
    pub psi: f64,
    pub phi: f64,
}

/// Precomputed 2×3 map from canonical coordinates to frame coordinates.
#[derive(Debug, Clone, Copy)]
pub struct AffineMap {
    a: [f64; 4],
    t: [f64; 2],
}

impl AffineMap {
    #[inline]
    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        (
            self.a[0] * u + self.a[1] * v + self.t[0],
            self.a[2] * u + self.a[3] * v + self.t[1],
        )
    }
}

impl AffineState {
    /// Axis-aligned state covering the box `(x, y, w, h)` (0-based, top-left origin).
    pub fn from_box(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self {
            lx: x + w / 2.0,
            ly: y + h / 2.0,
            theta: 0.0,
            s: w / TEMPLATE_SIDE as f64,
            psi: h / w,
            phi: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.lx, self.ly, self.theta, self.s, self.psi, self.phi]
    }

    pub fn from_array(p: [f64; 6]) -> Self {
        Self {
            lx: p[0],
            ly: p[1],
            theta: p[2],
            s: p[3],
            psi: p[4],
            phi: p[5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState(format!("non-finite parameter in {self:?}")));
        }
        if self.s <= 0.0 || self.psi <= 0.0 {
            return Err(Error::InvalidState(format!(
                "scale and aspect must be positive, got s={} psi={}",
                self.s, self.psi
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> AffineMap {
        let side = TEMPLATE_SIDE as f64;
        let sx = side * self.s;
        let sy = side * self.s * self.psi;
        let (sin, cos) = self.theta.sin_cos();
        // R * K * S with K = [[1, phi], [0, 1]]
        let k01 = self.phi * sy;
        AffineMap {
            a: [cos * sx, cos * k01 - sin * sy, sin * sx, sin * k01 + cos * sy],
            t: [self.lx, self.ly],
        }
    }

    /// Axis-aligned bounding box `(x, y, w, h)` of the warped unit square.
    pub fn bounding_box(&self) -> [f64; 4] {
        let m = self.matrix();
        let corners = [(-0.5, -0.5), (0.5, -0.5), (-0.5, 0.5), (0.5, 0.5)];
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (u, v) in corners {
            let (x, y) = m.apply(u, v);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        [x0, y0, x1 - x0, y1 - y0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub states: Vec<AffineState>,
    pub weights: Vec<f64>,
    /// Set by [`reweight`] when every likelihood was zero.
    pub degenerate: bool,
}

impl ParticleSet {
    /// `count` copies of `state` with uniform weights.
    pub fn uniform(state: AffineState, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("particle count must be at least 1".into()));
        }
        Ok(Self {
            states: vec![state; count],
            weights: vec![1.0 / count as f64; count],
            degenerate: false,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Perturbs every state with independent zero-mean Gaussians; `sigma` holds
/// per-component standard deviations in `AffineState::as_array` order.
pub fn propagate<R: Rng + ?Sized>(
    particles: &ParticleSet,
    sigma: &[f64; 6],
    rng: &mut R,
) -> Result<ParticleSet> {
    if sigma.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Error::Config(format!("sigma must be finite and >= 0, got {sigma:?}")));
    }
    let n = particles.len();
    let states = particles
        .states
        .iter()
        .map(|st| {
            let mut p = st.as_array();
            for (v, &sd) in p.iter_mut().zip(sigma) {
                // always draw so the stream does not depend on which sigmas are zero
                let z: f64 = StandardNormal.sample(rng);
                if sd > 0.0 {
                    *v += sd * z;
                }
            }
            AffineState::from_array(p)
        })
        .collect();
    Ok(ParticleSet {
        states,
        weights: vec![1.0 / n as f64; n],
        degenerate: false,
    })
}

pub fn reweight(particles: &ParticleSet, likelihoods: &[f64]) -> Result<ParticleSet> {
    if likelihoods.len() != particles.len() {
        return Err(Error::Dimension(format!(
            "{} likelihoods for {} particles",
            likelihoods.len(),
            particles.len()
        )));
    }
    if let Some((i, l)) = likelihoods
        .iter()
        .enumerate()
        .find(|(_, l)| !(**l >= 0.0) || !l.is_finite())
    {
        return Err(Error::Contract(format!("likelihood {l} of particle {i} is not a finite non-negative number")));
    }
    let n = particles.len();
    let total: f64 = likelihoods.iter().sum();
    let (weights, degenerate) = if total > 0.0 {
        (likelihoods.iter().map(|l| l / total).collect(), false)
    } else {
        (vec![1.0 / n as f64; n], true)
    };
    Ok(ParticleSet {
        states: particles.states.clone(),
        weights,
        degenerate,
    })
}

/// Index of the highest-weight particle; the lowest index wins ties.
pub fn map_index(particles: &ParticleSet) -> Result<usize> {
    if particles.is_empty() {
        return Err(Error::Contract("MAP estimate of an empty particle set".into()));
    }
    let mut best = 0;
    for (i, &w) in particles.weights.iter().enumerate().skip(1) {
        if w > particles.weights[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn map_estimate(particles: &ParticleSet) -> Result<AffineState> {
    Ok(particles.states[map_index(particles)?])
}

/// Systematic resampling: one uniform offset, `n` evenly spaced pointers.
pub fn resample<R: Rng + ?Sized>(particles: &ParticleSet, rng: &mut R) -> Result<ParticleSet> {
    let n = particles.len();
    if n == 0 {
        return Err(Error::Contract("resampling an empty particle set".into()));
    }
    let total: f64 = particles.weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Contract("weights must have a positive sum".into()));
    }
    let step = total / n as f64;
    let mut pointer = rng.random::<f64>() * step;
    let mut cumulative = particles.weights[0];
    let mut idx = 0;
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        while pointer > cumulative && idx + 1 < n {
            idx += 1;
            cumulative += particles.weights[idx];
        }
        states.push(particles.states[idx]);
        pointer += step;
    }
    Ok(ParticleSet {
        states,
        weights: vec![1.0 / n as f64; n],
        degenerate: false,
    })
}
