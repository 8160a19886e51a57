//! Two-scale structural local sparse appearance model.
//!
//! Each scale keeps a dictionary built from the template set (atoms grouped by
//! patch location, templates contiguous within a group) and a temporal buffer
//! per location. A candidate crop is scored by jointly coding every location's
//! buffer plus the candidate patch, keeping the candidate's coefficients,
//! averaging them per location, reading the aligned (diagonal) entries, and
//! weighting them by position and occlusion state.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::patching::{extract_patch, extract_patches, grid_layout, GridSpec, PatchMatrix, TEMPLATE_SIDE};
use crate::sparse::{CodingDictionary, CurrentCode, PastColumns, SolverConfig, SupportCache};

/// Stored patches per location buffer, the newest included.
pub const BUFFER_CAPACITY: usize = 5;
/// Past patches that accompany a candidate patch in the joint solve.
pub const CODING_HISTORY: usize = BUFFER_CAPACITY - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleLabel {
    Small,
    Large,
}

impl ScaleLabel {
    pub fn grid(self) -> GridSpec {
        let grid = match self {
            ScaleLabel::Small => grid_layout(TEMPLATE_SIDE, 8, 2),
            ScaleLabel::Large => grid_layout(TEMPLATE_SIDE, 16, 8),
        };
        grid.expect("built-in grids are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Decay of the center-distance bonus in the spatial weights.
    pub beta: f64,
    /// A location is clear when its location-constrained error is below this.
    pub eps: f64,
    /// Dictionary update threshold on the mean clear fraction.
    pub delta: f64,
    /// Large-scale buffer threshold.
    pub o1: f64,
    /// Small-scale buffer threshold.
    pub o2: f64,
    /// Sharpness of the large-scale down-weight.
    pub eta: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            beta: 0.8,
            eps: 0.04,
            delta: 0.08,
            o1: 0.13,
            o2: 0.13,
            eta: 10.0,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("beta", self.beta),
            ("eps", self.eps),
            ("delta", self.delta),
            ("o1", self.o1),
            ("o2", self.o2),
            ("eta", self.eta),
        ];
        for (name, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("delta", self.delta), ("o1", self.o1), ("o2", self.o2)] {
            if v > 1.0 {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Target templates; the first one is the initial crop and is never evicted.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    templates: Vec<GrayImage>,
    capacity: usize,
    generation: u64,
}

impl TemplateSet {
    pub fn new(first: GrayImage, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("template capacity must be at least 1".into()));
        }
        check_template(&first)?;
        Ok(Self {
            templates: vec![first],
            capacity,
            generation: 0,
        })
    }

    /// Appends `template`, evicting the oldest of templates 2..n when full.
    /// Returns false (and leaves the set alone) when the capacity is 1.
    pub fn insert(&mut self, template: GrayImage) -> Result<bool> {
        check_template(&template)?;
        if self.capacity == 1 {
            return Ok(false);
        }
        if self.templates.len() == self.capacity {
            self.templates.remove(1);
        }
        self.templates.push(template);
        self.generation += 1;
        Ok(true)
    }

    pub fn templates(&self) -> &[GrayImage] {
        &self.templates
    }

    pub fn first(&self) -> &GrayImage {
        &self.templates[0]
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.templates.len() == self.capacity
    }

    /// Bumped on every successful insert.
    pub fn generation(&self) -> u64 {
        self.generation
    }
}

fn check_template(t: &GrayImage) -> Result<()> {
    if t.width() != TEMPLATE_SIDE || t.height() != TEMPLATE_SIDE {
        return Err(Error::Dimension(format!(
            "templates must be {TEMPLATE_SIDE}x{TEMPLATE_SIDE}, got {}x{}",
            t.width(),
            t.height()
        )));
    }
    Ok(())
}

/// Dictionary with atom `q * n + p` = patch `q` of template `p`.
pub fn build_dictionary(templates: &[GrayImage], grid: &GridSpec) -> Result<DMatrix<f64>> {
    if templates.is_empty() {
        return Err(Error::Config("cannot build a dictionary from no templates".into()));
    }
    let n = templates.len();
    let per_template = templates
        .iter()
        .map(|t| extract_patches(t, grid))
        .collect::<Result<Vec<_>>>()?;
    let mut dict = DMatrix::zeros(grid.dim, n * grid.count);
    for q in 0..grid.count {
        for (p, patches) in per_template.iter().enumerate() {
            dict.column_mut(q * n + p).copy_from(&patches.matrix().column(q));
        }
    }
    Ok(dict)
}

/// Per-location average of the template fragments of a code: entry `q` is the
/// mean over templates of the (negatives clamped) coefficients on location `q`.
pub fn accumulate_fragments(code: &DVector<f64>, n: usize) -> Result<DVector<f64>> {
    if n == 0 || code.len() % n != 0 {
        return Err(Error::Dimension(format!(
            "code of length {} cannot be split into {n} fragments",
            code.len()
        )));
    }
    let count = code.len() / n;
    let scale = 1.0 / n as f64;
    Ok(DVector::from_fn(count, |q, _| {
        code.rows(q * n, n).iter().map(|v| v.max(0.0)).sum::<f64>() * scale
    }))
}

/// Diagonal of the square matrix whose `k`-th row is `vectors[k]`.
pub fn alignment_pool(vectors: &[DVector<f64>]) -> Result<DVector<f64>> {
    let count = vectors.len();
    if let Some((k, v)) = vectors.iter().enumerate().find(|(_, v)| v.len() != count) {
        return Err(Error::Dimension(format!(
            "alignment pooling needs {count} vectors of length {count}; vector {k} has length {}",
            v.len()
        )));
    }
    Ok(DVector::from_fn(count, |k, _| vectors[k][k]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionReport {
    /// True where the location reconstructs within the error threshold.
    pub flags: Vec<bool>,
    /// Location-constrained squared reconstruction errors.
    pub errors: Vec<f64>,
    pub fraction_clear: f64,
}

impl OcclusionReport {
    pub fn from_errors(errors: Vec<f64>, eps: f64) -> Result<Self> {
        if !(eps >= 0.0) {
            return Err(Error::Config(format!("occlusion threshold must be >= 0, got {eps}")));
        }
        let flags: Vec<bool> = errors.iter().map(|&e| e < eps).collect();
        let fraction_clear = if flags.is_empty() {
            0.0
        } else {
            flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
        };
        Ok(Self {
            flags,
            errors,
            fraction_clear,
        })
    }
}

/// `‖r_i − D (code_i ⊙ mask_i)‖²` where the mask keeps only location `i`'s atoms.
pub fn location_errors(
    dictionary: &DMatrix<f64>,
    n: usize,
    patches: &PatchMatrix,
    codes: &[DVector<f64>],
) -> Result<Vec<f64>> {
    let count = patches.count();
    if codes.len() != count || dictionary.ncols() != n * count || dictionary.nrows() != patches.dim() {
        return Err(Error::Dimension(format!(
            "{} codes, {} patches of dim {}, dictionary {}x{} with {n} templates",
            codes.len(),
            count,
            patches.dim(),
            dictionary.nrows(),
            dictionary.ncols()
        )));
    }
    codes
        .iter()
        .enumerate()
        .map(|(i, code)| {
            if code.len() != dictionary.ncols() {
                return Err(Error::Dimension(format!(
                    "code {i} has length {}, dictionary has {} atoms",
                    code.len(),
                    dictionary.ncols()
                )));
            }
            let mut residual = patches.matrix().column(i).into_owned();
            for p in 0..n {
                let a = code[i * n + p];
                if a != 0.0 {
                    residual.axpy(-a, &dictionary.column(i * n + p), 1.0);
                }
            }
            Ok(residual.norm_squared())
        })
        .collect()
}

pub fn occlusion_flags(
    patches: &PatchMatrix,
    group: &ScaleGroup,
    codes: &[DVector<f64>],
    eps: f64,
) -> Result<OcclusionReport> {
    if !(eps >= 0.0) {
        return Err(Error::Config(format!("occlusion threshold must be >= 0, got {eps}")));
    }
    let errors = location_errors(group.dictionary(), group.n_templates(), patches, codes)?;
    OcclusionReport::from_errors(errors, eps)
}

/// `ω_k = 1 + flag_k · exp(−β (|i − (1+w)/2| + |j − (1+u)/2|))` with 1-based grid coordinates.
pub fn spatial_weights(grid: &GridSpec, flags: &[bool], beta: f64) -> Result<DVector<f64>> {
    if flags.len() != grid.count {
        return Err(Error::Dimension(format!(
            "{} flags for a grid of {} patches",
            flags.len(),
            grid.count
        )));
    }
    let ci = (1.0 + grid.w as f64) / 2.0;
    let cj = (1.0 + grid.u as f64) / 2.0;
    Ok(DVector::from_fn(grid.count, |k, _| {
        if !flags[k] {
            return 1.0;
        }
        let (i, j) = grid.coords(k);
        let d = ((i + 1) as f64 - ci).abs() + ((j + 1) as f64 - cj).abs();
        1.0 + (-beta * d).exp()
    }))
}

/// Down-weight for the large-scale term: mean of `exp(−η e_k)`.
pub fn gamma_weight(report: &OcclusionReport, eta: f64) -> f64 {
    if report.errors.is_empty() {
        return 1.0;
    }
    report.errors.iter().map(|e| (-eta * e).exp()).sum::<f64>() / report.errors.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures {
    /// Per-location accumulated vectors.
    pub raw: Vec<DVector<f64>>,
    pub pooled: DVector<f64>,
    pub weighted: DVector<f64>,
}

impl PooledFeatures {
    pub fn new(raw: Vec<DVector<f64>>, weights: &DVector<f64>) -> Result<Self> {
        let pooled = alignment_pool(&raw)?;
        if weights.len() != pooled.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} pooled features",
                weights.len(),
                pooled.len()
            )));
        }
        let weighted = pooled.component_mul(weights);
        Ok(Self {
            raw,
            pooled,
            weighted,
        })
    }
}

/// `γ · mean(large weighted) + mean(small weighted)`.
pub fn candidate_likelihood(small: &PooledFeatures, large: &PooledFeatures, gamma: f64) -> f64 {
    gamma * mean(&large.weighted) + mean(&small.weighted)
}

fn mean(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.sum() / v.len() as f64
    }
}

pub fn dictionary_update_gate(large: &OcclusionReport, small: &OcclusionReport, delta: f64) -> bool {
    small.fraction_clear + large.fraction_clear > 2.0 * delta
}

pub fn buffer_update_gate(report: &OcclusionReport, threshold: f64) -> bool {
    report.fraction_clear > threshold
}

/// One patch scale: grid, dictionary and temporal buffers.
#[derive(Debug, Clone)]
pub struct ScaleGroup {
    label: ScaleLabel,
    grid: GridSpec,
    update_period: usize,
    n_templates: usize,
    generation: u64,
    dictionary: CodingDictionary,
    buffers: Vec<VecDeque<DVector<f64>>>,
    history: Vec<PastColumns>,
}

impl ScaleGroup {
    /// Builds the dictionary and seeds every buffer with the matching column of `initial`.
    pub fn new(
        label: ScaleLabel,
        templates: &TemplateSet,
        initial: &PatchMatrix,
        update_period: usize,
    ) -> Result<Self> {
        let grid = label.grid();
        if initial.count() != grid.count || initial.dim() != grid.dim {
            return Err(Error::Dimension(format!(
                "initial patches are {}x{}, grid needs {}x{}",
                initial.dim(),
                initial.count(),
                grid.dim,
                grid.count
            )));
        }
        if update_period == 0 {
            return Err(Error::Config("update period must be at least 1".into()));
        }
        let dictionary = CodingDictionary::new(build_dictionary(templates.templates(), &grid)?);
        let buffers = (0..grid.count)
            .map(|k| VecDeque::from([initial.column(k)]))
            .collect();
        let mut group = Self {
            label,
            grid,
            update_period,
            n_templates: templates.len(),
            generation: templates.generation(),
            dictionary,
            buffers,
            history: Vec::new(),
        };
        group.refresh_history();
        Ok(group)
    }

    pub fn label(&self) -> ScaleLabel {
        self.label
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn update_period(&self) -> usize {
        self.update_period
    }

    /// Templates the current dictionary was built from.
    pub fn n_templates(&self) -> usize {
        self.n_templates
    }

    /// Template-set generation the current dictionary was built from.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn dictionary(&self) -> &DMatrix<f64> {
        self.dictionary.atoms()
    }

    pub fn buffer(&self, location: usize) -> &VecDeque<DVector<f64>> {
        &self.buffers[location]
    }

    pub fn rebuild(&mut self, templates: &TemplateSet) -> Result<()> {
        self.dictionary = CodingDictionary::new(build_dictionary(templates.templates(), &self.grid)?);
        self.n_templates = templates.len();
        self.generation = templates.generation();
        self.refresh_history();
        Ok(())
    }

    fn refresh_history(&mut self) {
        let dim = self.grid.dim;
        self.history = self
            .buffers
            .iter()
            .map(|buf| {
                let keep = buf.len().min(CODING_HISTORY);
                let mut past = DMatrix::zeros(dim, keep);
                for (c, col) in buf.iter().skip(buf.len() - keep).enumerate() {
                    past.column_mut(c).copy_from(col);
                }
                PastColumns::new(&self.dictionary, past).expect("buffer columns match the grid")
            })
            .collect();
    }

    /// Jointly codes every location's buffer with the candidate patch and
    /// returns the candidate's coefficients per location.
    pub fn code_candidate(&self, patches: &PatchMatrix, solver: &SolverConfig) -> Result<Vec<CurrentCode>> {
        if patches.count() != self.grid.count || patches.dim() != self.grid.dim {
            return Err(Error::Dimension(format!(
                "candidate patches are {}x{}, {:?} grid needs {}x{}",
                patches.dim(),
                patches.count(),
                self.label,
                self.grid.dim,
                self.grid.count
            )));
        }
        solver.validate()?;
        let corr = self.dictionary.correlate(patches.matrix());
        Ok((0..self.grid.count)
            .map(|i| {
                self.dictionary.solve_current(
                    &self.history[i],
                    patch_slice(patches, i),
                    corr.column(i).as_slice(),
                    solver,
                )
            })
            .collect())
    }

    /// Scores one scale of a candidate. Read-only.
    pub fn evaluate(
        &self,
        patches: &PatchMatrix,
        solver: &SolverConfig,
        gates: &GateConfig,
    ) -> Result<ScaleEvaluation> {
        let codes = self.code_candidate(patches, solver)?;
        let n = self.n_templates;
        let count = self.grid.count;
        let scale = 1.0 / n as f64;
        let mut raw = Vec::with_capacity(count);
        let mut errors = Vec::with_capacity(count);
        for (i, code) in codes.iter().enumerate() {
            let mut z = DVector::zeros(count);
            for (&s, &a) in code.support.iter().zip(&code.coefficients) {
                z[s / n] += a.max(0.0) * scale;
            }
            raw.push(z);
            errors.push(self.location_terms(i, patch_slice(patches, i), code).1);
        }
        let report = OcclusionReport::from_errors(errors, gates.eps)?;
        let weights = spatial_weights(&self.grid, &report.flags, gates.beta)?;
        let pooled = PooledFeatures::new(raw, &weights)?;
        Ok(ScaleEvaluation {
            pooled,
            report,
            weights,
        })
    }

    /// Pooled feature and location-constrained squared error of one code.
    fn location_terms(&self, location: usize, patch: &[f64], code: &CurrentCode) -> (f64, f64) {
        let n = self.n_templates;
        let scale = 1.0 / n as f64;
        let dim = self.grid.dim;
        let atoms = self.dictionary.atoms().as_slice();
        let mut pooled = 0.0;
        let mut residual = patch.to_vec();
        for (&s, &a) in code.support.iter().zip(&code.coefficients) {
            if s / n == location {
                pooled += a.max(0.0) * scale;
                for (r, d) in residual.iter_mut().zip(&atoms[s * dim..(s + 1) * dim]) {
                    *r -= a * d;
                }
            }
        }
        (pooled, residual.iter().map(|v| v * v).sum())
    }

    /// `(pooled, error)` of every crop, indexed `[location][crop]`. Works one
    /// location at a time so its history and the atoms it selects stay cached
    /// across crops.
    fn batch_terms(&self, crops: &[GrayImage], solver: &SolverConfig) -> Result<Vec<Vec<(f64, f64)>>> {
        solver.validate()?;
        let dim = self.grid.dim;
        (0..self.grid.count)
            .into_par_iter()
            .map(|i| {
                let mut x = DMatrix::zeros(dim, crops.len());
                for (c, crop) in crops.iter().enumerate() {
                    extract_patch(crop, &self.grid, i, x.column_mut(c).as_mut_slice())?;
                }
                
                let corr = self.dictionary.correlate(&x);
                let n_atoms = corr.nrows();
                let mut cache = SupportCache::new(&self.history[i]);
                Ok((0..crops.len())
                    .map(|c| {
                        let patch = &x.as_slice()[c * dim..(c + 1) * dim];
                        let code = self.dictionary.solve_current_cached(
                            &mut cache,
                            patch,
                            &corr.as_slice()[c * n_atoms..(c + 1) * n_atoms],
                            solver,
                        );
                        self.location_terms(i, patch, &code)
                    })
                    .collect())
            })
            .collect()
    }

    /// Mean weighted feature and occlusion report from per-location terms.
    fn summarize(&self, terms: impl Iterator<Item = (f64, f64)>, gates: &GateConfig) -> Result<(f64, OcclusionReport)> {
        let (pooled, errors): (Vec<f64>, Vec<f64>) = terms.unzip();
        let report = OcclusionReport::from_errors(errors, gates.eps)?;
        let weights = spatial_weights(&self.grid, &report.flags, gates.beta)?;
        let weighted = DVector::from_vec(pooled).component_mul(&weights);
        Ok((mean(&weighted), report))
    }
}

fn patch_slice(patches: &PatchMatrix, k: usize) -> &[f64] {
    let dim = patches.dim();
    &patches.matrix().as_slice()[k * dim..(k + 1) * dim]
}

/// Appends the current patch to every location buffer, evicting the oldest
/// beyond [`BUFFER_CAPACITY`].
pub fn push_buffers(group: &mut ScaleGroup, patches: &PatchMatrix) -> Result<()> {
    if patches.count() != group.grid.count || patches.dim() != group.grid.dim {
        return Err(Error::Dimension(format!(
            "pushing {}x{} patches into a {}x{} grid",
            patches.dim(),
            patches.count(),
            group.grid.dim,
            group.grid.count
        )));
    }
    for (k, buf) in group.buffers.iter_mut().enumerate() {
        buf.push_back(patches.column(k));
        while buf.len() > BUFFER_CAPACITY {
            buf.pop_front();
        }
    }
    group.refresh_history();
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleEvaluation {
    pub pooled: PooledFeatures,
    pub report: OcclusionReport,
    pub weights: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub likelihood: f64,
    pub gamma: f64,
    pub small: ScaleEvaluation,
    pub large: ScaleEvaluation,
    pub small_patches: PatchMatrix,
    pub large_patches: PatchMatrix,
}

/// Template set plus both scale groups.
#[derive(Debug, Clone)]
pub struct AppearanceModel {
    pub templates: TemplateSet,
    pub small: ScaleGroup,
    pub large: ScaleGroup,
    pub solver: SolverConfig,
    pub gates: GateConfig,
}

impl AppearanceModel {
    pub fn new(
        first: GrayImage,
        capacity: usize,
        small_period: usize,
        large_period: usize,
        solver: SolverConfig,
        gates: GateConfig,
    ) -> Result<Self> {
        solver.validate()?;
        gates.validate()?;
        let templates = TemplateSet::new(first, capacity)?;
        let t1 = templates.first();
        let small_patches = extract_patches(t1, &ScaleLabel::Small.grid())?;
        let large_patches = extract_patches(t1, &ScaleLabel::Large.grid())?;
        let small = ScaleGroup::new(ScaleLabel::Small, &templates, &small_patches, small_period)?;
        let large = ScaleGroup::new(ScaleLabel::Large, &templates, &large_patches, large_period)?;
        Ok(Self {
            templates,
            small,
            large,
            solver,
            gates,
        })
    }

    /// Scores a normalized 32×32 candidate crop without touching model state.
    pub fn evaluate(&self, crop: &GrayImage) -> Result<CandidateScore> {
        let small_patches = extract_patches(crop, self.small.grid())?;
        let large_patches = extract_patches(crop, self.large.grid())?;
        let small = self.small.evaluate(&small_patches, &self.solver, &self.gates)?;
        let large = self.large.evaluate(&large_patches, &self.solver, &self.gates)?;
        let gamma = gamma_weight(&large.report, self.gates.eta);
        let likelihood = candidate_likelihood(&small.pooled, &large.pooled, gamma);
        if !likelihood.is_finite() {
            return Err(Error::numeric("likelihood", format!("non-finite likelihood {likelihood}")));
        }
        Ok(CandidateScore {
            likelihood,
            gamma,
            small,
            large,
            small_patches,
            large_patches,
        })
    }
    /// Likelihood of every crop; agrees with [`AppearanceModel::evaluate`] up
    /// to rounding in the correlations.
    pub fn likelihoods(&self, crops: &[GrayImage]) -> Result<Vec<f64>> {
        let small = self.small.batch_terms(crops, &self.solver)?;
        let large = self.large.batch_terms(crops, &self.solver)?;
        (0..crops.len())
            .map(|c| {
                let (small_mean, _) = self.small.summarize(small.iter().map(|loc| loc[c]), &self.gates)?;
                let (large_mean, report) = self.large.summarize(large.iter().map(|loc| loc[c]), &self.gates)?;
                let likelihood = gamma_weight(&report, self.gates.eta) * large_mean + small_mean;
                if !likelihood.is_finite() {
                    return Err(Error::numeric("likelihood", format!("non-finite likelihood {likelihood}")));
                }
                Ok(likelihood)
            })
            .collect()
    }
}
