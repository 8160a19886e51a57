//! Per-frame pipeline: particle scoring, MAP selection and the scheduled
//! model updates.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::{
    buffer_update_gate, dictionary_update_gate, push_buffers, AppearanceModel, CandidateScore, GateConfig,
};
use crate::error::{Error, Result};
use crate::filter::{map_index, propagate, resample, reweight, AffineState, ParticleSet};
use crate::image::GrayImage;
use crate::patching::{warp_crop, TEMPLATE_SIDE};
use crate::sparse::SolverConfig;
use crate::subspace::{fuse_template, patch_mask_to_pixel_mask, SubspaceModel};

/// Tracker parameters. Missing fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub n_templates: usize,
    pub template_update_period: usize,
    pub large_update_period: usize,
    pub small_update_period: usize,
    pub n_particles: usize,
    /// Random-walk standard deviations for (lx, ly, theta, s, psi, phi).
    pub sigma: [f64; 6],
    /// Maximum atoms per joint sparse code.
    pub upsilon: usize,
    pub residual_tol: f64,
    /// Basis vectors kept by the appearance subspace.
    pub eigvecs: usize,
    pub forgetting: f64,
    pub guided_radius: usize,
    pub guided_reg: f64,
    /// Decay of the center-distance bonus in the spatial weights.
    pub beta: f64,
    /// Occlusion threshold on a location's reconstruction error.
    pub eps: f64,
    /// Dictionary update threshold.
    pub delta: f64,
    /// Large-scale buffer threshold.
    pub o1: f64,
    /// Small-scale buffer threshold.
    pub o2: f64,
    /// Sharpness of the large-scale down-weight.
    pub eta: f64,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        let g = GateConfig::default();
        Self {
            n_templates: 10,
            template_update_period: 5,
            large_update_period: 5,
            small_update_period: 20,
            n_particles: 650,
            sigma: [6.0, 6.0, 0.02, 0.002, 0.002, 0.0],
            upsilon: 4,
            residual_tol: 1e-9,
            eigvecs: crate::subspace::DEFAULT_MAX_BASIS,
            forgetting: crate::subspace::DEFAULT_FORGETTING,
            guided_radius: crate::subspace::GUIDED_RADIUS,
            guided_reg: crate::subspace::GUIDED_REG,
            beta: g.beta,
            eps: g.eps,
            delta: g.delta,
            o1: g.o1,
            o2: g.o2,
            eta: g.eta,
            seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let periods = [
            ("template_update_period", self.template_update_period),
            ("large_update_period", self.large_update_period),
            ("small_update_period", self.small_update_period),
        ];
        for (name, p) in periods {
            if p == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_templates == 0 {
            return Err(Error::Config("n_templates must be at least 1".into()));
        }
        if self.n_particles == 0 {
            return Err(Error::Config("n_particles must be at least 1".into()));
        }
        if self.sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config(format!("sigma must be finite and >= 0, got {:?}", self.sigma)));
        }
        if self.eigvecs == 0 {
            return Err(Error::Config("eigvecs must be at least 1".into()));
        }
        if self.guided_radius == 0 || !(self.guided_reg > 0.0) {
            return Err(Error::Config("guided filter needs radius >= 1 and reg > 0".into()));
        }
        self.solver().validate()?;
        self.gates().validate()
    }

    pub fn gates(&self) -> GateConfig {
        GateConfig {
            beta: self.beta,
            eps: self.eps,
            delta: self.delta,
            o1: self.o1,
            o2: self.o2,
            eta: self.eta,
        }
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            max_atoms: self.upsilon,
            residual_tol: self.residual_tol,
        }
    }
}

/// What happened to the model during one frame's commit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitFlags {
    pub large_buffer_pushed: bool,
    pub small_buffer_pushed: bool,
    pub template_inserted: bool,
    pub subspace_updated: bool,
    pub large_rebuilt: bool,
    pub small_rebuilt: bool,
}

/// Result of one tracked frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame_index: usize,
    /// Axis-aligned `(x, y, w, h)`, 0-based pixels.
    pub bbox: [f64; 4],
    pub state: AffineState,
    pub likelihood: f64,
    pub gamma: f64,
    /// Clear fractions of the (small, large) patch grids.
    pub clear_fractions: (f64, f64),
    /// Whether the dictionary gate held for the MAP candidate.
    pub dictionary_gate: bool,
    /// All particle likelihoods were zero.
    pub degenerate: bool,
    pub commit: CommitFlags,
}

#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    frame_index: usize,
    frame_size: (usize, usize),
    model: AppearanceModel,
    subspace: SubspaceModel,
    particles: ParticleSet,
    last_map: AffineState,
    pending_crops: Vec<DVector<f64>>,
    rng: ChaCha8Rng,
}

fn crop_vector(crop: &GrayImage) -> DVector<f64> {
    DVector::from_column_slice(crop.data())
}

impl Tracker {
    /// Starts tracking the 0-based box `(x, y, w, h)` in `first_frame`.
    pub fn init(first_frame: &GrayImage, init_box: [f64; 4], cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        let [x, y, w, h] = init_box;
        if !(w > 0.0 && h > 0.0) || init_box.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("degenerate initial box {init_box:?}")));
        }
        let (fw, fh) = (first_frame.width() as f64, first_frame.height() as f64);
        if x < 0.0 || y < 0.0 || x + w > fw || y + h > fh {
            return Err(Error::Config(format!(
                "initial box {init_box:?} lies outside the {fw}x{fh} frame"
            )));
        }
        let state = AffineState::from_box(x, y, w, h);
        let crop = warp_crop(first_frame, &state, TEMPLATE_SIDE)?;
        let model = AppearanceModel::new(
            crop.clone(),
            cfg.n_templates,
            cfg.small_update_period,
            cfg.large_update_period,
            cfg.solver(),
            cfg.gates(),
        )?;
        let mut subspace = SubspaceModel::new(TEMPLATE_SIDE * TEMPLATE_SIDE, cfg.forgetting, cfg.eigvecs)?;
        subspace.incremental_update(&DMatrix::from_column_slice(TEMPLATE_SIDE * TEMPLATE_SIDE, 1, crop.data()))?;
        Ok(Self {
            frame_index: 0,
            frame_size: (first_frame.width(), first_frame.height()),
            model,
            subspace,
            particles: ParticleSet::uniform(state, cfg.n_particles)?,
            last_map: state,
            pending_crops: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    /// Index of the last processed frame; the initial frame is 0.
    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn model(&self) -> &AppearanceModel {
        &self.model
    }

    pub fn subspace(&self) -> &SubspaceModel {
        &self.subspace
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.particles
    }

    pub fn last_state(&self) -> AffineState {
        self.last_map
    }

    /// Full appearance evaluation of one state in `frame`. Read-only.
    pub fn score_state(&self, frame: &GrayImage, state: &AffineState) -> Result<CandidateScore> {
        let crop = warp_crop(frame, state, TEMPLATE_SIDE)?;
        self.model.evaluate(&crop)
    }

    /// Observation likelihoods of `states`, computed in parallel. States that
    /// cannot be warped score zero.
    pub fn score_states(&self, frame: &GrayImage, states: &[AffineState]) -> Result<Vec<f64>> {
        let valid: Vec<usize> = (0..states.len()).filter(|&i| states[i].validate().is_ok()).collect();
        let crops = valid
            .par_iter()
            .map(|&i| warp_crop(frame, &states[i], TEMPLATE_SIDE))
            .collect::<Result<Vec<_>>>()?;
        let mut out = vec![0.0; states.len()];
        for (i, l) in valid.into_iter().zip(self.model.likelihoods(&crops)?) {
            out[i] = l;
        }
        Ok(out)
    }

    pub fn step(&mut self, frame: &GrayImage) -> Result<TrackRecord> {
        if (frame.width(), frame.height()) != self.frame_size {
            return Err(Error::Dimension(format!(
                "frame is {}x{}, sequence is {}x{}",
                frame.width(),
                frame.height(),
                self.frame_size.0,
                self.frame_size.1
            )));
        }
        let moved = propagate(&self.particles, &self.cfg.sigma, &mut self.rng)?;
        let likelihoods = self.score_states(frame, &moved.states)?;
        let weighted = reweight(&moved, &likelihoods)?;
        let best = map_index(&weighted)?;
        let state = weighted.states[best];
        self.particles = resample(&weighted, &mut self.rng)?;
        self.frame_index += 1;
        self.last_map = state;

        let crop = warp_crop(frame, &state, TEMPLATE_SIDE)?;
        let score = self.model.evaluate(&crop)?;
        let dictionary_gate =
            dictionary_update_gate(&score.large.report, &score.small.report, self.cfg.delta);
        let commit = self.commit(&crop, &score, dictionary_gate)?;

        Ok(TrackRecord {
            frame_index: self.frame_index,
            bbox: state.bounding_box(),
            state,
            likelihood: score.likelihood,
            gamma: score.gamma,
            clear_fractions: (score.small.report.fraction_clear, score.large.report.fraction_clear),
            dictionary_gate,
            degenerate: weighted.degenerate,
            commit,
        })
    }

    /// Buffers, then template fusion, then the subspace, then dictionaries.
    fn commit(&mut self, crop: &GrayImage, score: &CandidateScore, dictionary_gate: bool) -> Result<CommitFlags> {
        let t = self.frame_index;
        let gates = self.cfg.gates();
        let mut flags = CommitFlags::default();
        self.pending_crops.push(crop_vector(crop));

        let large_due = t % self.cfg.large_update_period == 0;
        let small_due = t % self.cfg.small_update_period == 0;
        if large_due && buffer_update_gate(&score.large.report, gates.o1) {
            push_buffers(&mut self.model.large, &score.large_patches)?;
            flags.large_buffer_pushed = true;
        }
        if small_due && buffer_update_gate(&score.small.report, gates.o2) {
            push_buffers(&mut self.model.small, &score.small_patches)?;
            flags.small_buffer_pushed = true;
        }

        if t % self.cfg.template_update_period == 0 {
            let mask = patch_mask_to_pixel_mask(&score.large.report.flags, self.model.large.grid())?;
            let reconstruction = self.subspace.reconstruct(crop)?;
            let fused = fuse_template(crop, &reconstruction, &mask, self.cfg.guided_radius, self.cfg.guided_reg)?;
            flags.template_inserted = self.model.templates.insert(fused)?;

            let columns = DMatrix::from_columns(&self.pending_crops);
            self.subspace.incremental_update(&columns)?;
            self.pending_crops.clear();
            flags.subspace_updated = true;
        }

        if dictionary_gate {
            let templates = &self.model.templates;
            if large_due && self.model.large.generation() != templates.generation() {
                self.model.large.rebuild(templates)?;
                flags.large_rebuilt = true;
            }
            if small_due && self.model.small.generation() != templates.generation() {
                self.model.small.rebuild(templates)?;
                flags.small_rebuilt = true;
            }
        }
        Ok(flags)
    }
}
