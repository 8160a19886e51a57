//! Joint sparse coding with simultaneous orthogonal matching pursuit (SOMP).
//!
//! All columns of a signal matrix share one row support of at most
//! `max_atoms` dictionary atoms. Each greedy step picks the atom whose
//! correlations with the current residuals have the largest ℓ2 norm across
//! columns, then refits every column on the enlarged support by least squares.
//!
//! Residual correlations are formed as `DᵀR − Dᵀ D_S A`, so the solver only
//! needs `DᵀR` up front plus Gram columns for the atoms it selects. This lets
//! [`CodingDictionary`] reuse a precomputed Gram matrix and cached
//! correlations when many signals are coded against one dictionary.

use std::cell::RefCell;
use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Ridge added to a singular support Gram matrix.
const GRAM_JITTER: f64 = 1e-10;
/// A support Gram pivot below this fraction of its diagonal counts as singular.
const PIVOT_FLOOR: f64 = 1e-12;
/// Selection stops once the best squared correlation drops below this
/// fraction of the initial squared residual.
const SCORE_FLOOR: f64 = 1e-26;
/// Systems up to this size are solved on the stack.
const SMALL_SYSTEM: usize = 8;
/// Past columns handled by the fused selection scan.
const PAST_COLUMNS: usize = 4;
/// Atoms scored exactly before the first selection bounds the rest.
const PRUNE_TOP: usize = 48;
/// Relative and absolute slack on the pruning bound, far above rounding error.
const PRUNE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Row-sparsity budget.
    pub max_atoms: usize,
    /// Early stop once the Frobenius residual is at or below this value.
    pub residual_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_atoms: 4,
            residual_tol: 1e-9,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_atoms == 0 {
            return Err(Error::Config("max_atoms must be at least 1".into()));
        }
        if !(self.residual_tol >= 0.0) {
            return Err(Error::Config(format!(
                "residual_tol must be >= 0, got {}",
                self.residual_tol
            )));
        }
        Ok(())
    }
}

/// Temporal buffer of one patch location: retained past patches followed by
/// the current patch in the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferSignal(DMatrix<f64>);

impl BufferSignal {
    pub fn from_columns(columns: &[DVector<f64>]) -> Result<Self> {
        let Some(first) = columns.first() else {
            return Err(Error::Dimension("buffer needs at least one column".into()));
        };
        if columns.iter().any(|c| c.len() != first.len()) {
            return Err(Error::Dimension("buffer columns differ in length".into()));
        }
        Ok(Self(DMatrix::from_columns(columns)))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.0.ncols() == 0
    }
}

/// Coefficients for every atom (rows) and signal column (columns); rows off
/// the selected support are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    coeffs: DMatrix<f64>,
    support: Vec<usize>,
}

impl CoefficientMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    /// Selected atoms in selection order.
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// Number of rows holding at least one nonzero coefficient.
    pub fn row_support_size(&self) -> usize {
        (0..self.coeffs.nrows())
            .filter(|&r| self.coeffs.row(r).iter().any(|&v| v != 0.0))
            .count()
    }
}

/// Coefficients of the current-frame patch: the last buffer column.
pub fn select_current(coeffs: &CoefficientMatrix) -> Result<DVector<f64>> {
    let m = coeffs.coeffs.ncols();
    if m == 0 {
        return Err(Error::Dimension("coefficient matrix has no columns".into()));
    }
    Ok(coeffs.coeffs.column(m - 1).into_owned())
}

pub fn somp_solve(
    dict: &DMatrix<f64>,
    signals: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<CoefficientMatrix> {
    somp_solve_traced(dict, signals, cfg).map(|(c, _)| c)
}

/// Like [`somp_solve`], also returning the Frobenius residual before the first
/// step and after every step.
pub fn somp_solve_traced(
    dict: &DMatrix<f64>,
    signals: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<(CoefficientMatrix, Vec<f64>)> {
    cfg.validate()?;
    check_shapes(dict, signals)?;
    let corr0 = dict.tr_mul(signals);
    let gram_column = |s: usize| dict.tr_mul(&dict.column(s)).data.as_vec().clone();
    let mut trace = Vec::new();
    let out = run_somp(dict, signals, &corr0, gram_column, cfg, Some(&mut trace));
    Ok((out, trace))
}

fn check_shapes(dict: &DMatrix<f64>, signals: &DMatrix<f64>) -> Result<()> {
    if signals.ncols() == 0 {
        return Err(Error::Dimension("no signal columns".into()));
    }
    if dict.nrows() != signals.nrows() {
        return Err(Error::Dimension(format!(
            "dictionary atoms have dimension {}, signals have {}",
            dict.nrows(),
            signals.nrows()
        )));
    }
    Ok(())
}

/// A dictionary with its Gram matrix, for coding many signals against the
/// same atoms.
#[derive(Debug, Clone)]
pub struct CodingDictionary {
    atoms: DMatrix<f64>,
    atoms_t: DMatrix<f64>,
    gram: DMatrix<f64>,
    /// Largest squared atom norm.
    max_norm_sq: f64,
}

impl CodingDictionary {
    pub fn new(atoms: DMatrix<f64>) -> Self {
        let atoms_t = atoms.transpose();
        let gram = &atoms_t * &atoms;
        let max_norm_sq = gram.diagonal().iter().fold(0.0, |m: f64, &v| m.max(v));
        Self {
            atoms,
            atoms_t,
            gram,
            max_norm_sq,
        }
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn dim(&self) -> usize {
        self.atoms.nrows()
    }

    /// `Dᵀ signals`.
    pub fn correlate(&self, signals: &DMatrix<f64>) -> DMatrix<f64> {
        &self.atoms_t * signals
    }

    pub fn solve(&self, signals: &DMatrix<f64>, cfg: &SolverConfig) -> Result<CoefficientMatrix> {
        cfg.validate()?;
        check_shapes(&self.atoms, signals)?;
        let corr0 = self.correlate(signals);
        self.solve_with_correlations(signals, &corr0, cfg)
    }

    /// Solves with caller-supplied `corr0 = Dᵀ signals`, e.g. assembled from
    /// cached correlations of columns shared between calls.
    pub fn solve_with_correlations(
        &self,
        signals: &DMatrix<f64>,
        corr0: &DMatrix<f64>,
        cfg: &SolverConfig,
    ) -> Result<CoefficientMatrix> {
        check_shapes(&self.atoms, signals)?;
        if corr0.nrows() != self.n_atoms() || corr0.ncols() != signals.ncols() {
            return Err(Error::Dimension(format!(
                "correlations are {}x{}, expected {}x{}",
                corr0.nrows(),
                corr0.ncols(),
                self.n_atoms(),
                signals.ncols()
            )));
        }
        let gram = &self.gram;
        let gram_column = |s: usize| gram.column(s).as_slice().to_vec();
        Ok(run_somp(&self.atoms, signals, corr0, gram_column, cfg, None))
    }
}


/// Past columns of one buffer, shared by every candidate coded at that
/// buffer location, with their dictionary correlations precomputed.
#[derive(Debug, Clone)]
pub struct PastColumns {
    past: DMatrix<f64>,
    corr: DMatrix<f64>,
    /// Selection scores of the past columns with an empty support.
    empty_scores: Vec<f64>,
    empty_top: Option<TopSet>,
    past_sq: f64,
}

impl PastColumns {
    pub fn new(dict: &CodingDictionary, past: DMatrix<f64>) -> Result<Self> {
        if past.nrows() != dict.dim() {
            return Err(Error::Dimension(format!(
                "past columns have dimension {}, dictionary has {}",
                past.nrows(),
                dict.dim()
            )));
        }
        let corr = dict.correlate(&past);
        let empty_scores: Vec<f64> = (0..dict.n_atoms())
            .map(|j| corr.row(j).iter().map(|v| v * v).sum())
            .collect();
        Ok(Self {
            empty_top: TopSet::new(&empty_scores),
            past_sq: past.norm_squared(),
            past,
            corr,
            empty_scores,
        })
    }

    pub fn len(&self) -> usize {
        self.past.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.past.ncols() == 0
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.past
    }

    /// `Dᵀ past`.
    pub fn correlations(&self) -> &DMatrix<f64> {
        &self.corr
    }
}

/// Candidate-column result of a joint solve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentCode {
    /// Selected atoms in selection order.
    pub support: Vec<usize>,
    /// Coefficients of the current column on `support`.
    pub coefficients: Vec<f64>,
}

impl CurrentCode {
    pub fn to_dense(&self, n_atoms: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n_atoms);
        for (&s, &a) in self.support.iter().zip(&self.coefficients) {
            v[s] = a;
        }
        v
    }
}

/// Per-thread buffers reused across [`CodingDictionary::solve_current`] calls.
#[derive(Default)]
struct Scratch {
    scores: Vec<f64>,
    residual: Vec<f64>,
    /// Stand-in correlations for unused scan columns.
    zeros: Vec<f64>,
}

thread_local! {
    static SCRATCH: RefCell<Scratch> = RefCell::new(Scratch::default());
}

/// Normal equations of one support.
#[derive(Debug, Clone)]
enum Factor {
    /// Lower Cholesky factor held on the stack.
    Small(SmallMatrix),
    /// Support Gram submatrix, handed to [`solve_spd`] per solve.
    Dense(DMatrix<f64>),
}

/// The `PRUNE_TOP` largest scores and the largest score left out.
#[derive(Debug, Clone)]
struct TopSet {
    idx: Vec<usize>,
    rest_max: f64,
}

impl TopSet {
    fn new(scores: &[f64]) -> Option<Self> {
        if scores.len() <= PRUNE_TOP || scores.iter().any(|v| v.is_nan()) {
            return None;
        }
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.select_nth_unstable_by(PRUNE_TOP, |&a, &b| scores[b].total_cmp(&scores[a]));
        let rest_max = scores[idx[PRUNE_TOP]];
        idx.truncate(PRUNE_TOP);
        Some(Self { idx, rest_max })
    }
}

/// Past-column work on one support.
#[derive(Debug, Clone)]
struct PastFit {
    /// Column-major `k × p` coefficients.
    coeffs: Vec<f64>,
    residual_sq: f64,
    scores: Option<Vec<f64>>,
}

/// Everything about a support that does not involve the current column.
#[derive(Debug, Clone)]
struct SupportEntry {
    factor: Factor,
    past: Option<PastFit>,
}

/// Past-column work keyed by support prefix, shared by every current column
/// coded against one [`PastColumns`] and dictionary.
#[derive(Debug)]
pub struct SupportCache<'a> {
    history: &'a PastColumns,
    entries: HashMap<Vec<usize>, SupportEntry>,
    capacity: usize,
    /// Holds the entry in use once `entries` is full.
    spare: Option<(Vec<usize>, SupportEntry)>,
}

impl<'a> SupportCache<'a> {
    pub const DEFAULT_CAPACITY: usize = 4096;

    pub fn new(history: &'a PastColumns) -> Self {
        Self::with_capacity(history, Self::DEFAULT_CAPACITY)
    }

    pub fn with_capacity(history: &'a PastColumns, capacity: usize) -> Self {
        Self {
            history,
            entries: HashMap::new(),
            capacity,
            spare: None,
        }
    }

    pub fn history(&self) -> &'a PastColumns {
        self.history
    }

    /// Supports currently stored.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn entry(&mut self, dict: &CodingDictionary, support: &[usize]) -> &mut SupportEntry {
        if self.entries.contains_key(support) {
            return self.entries.get_mut(support).expect("checked above");
        }
        if matches!(&self.spare, Some((key, _)) if key == support) {
            return &mut self.spare.as_mut().expect("checked above").1;
        }
        let entry = SupportEntry {
            factor: dict.factor(support),
            past: None,
        };
        if self.entries.len() < self.capacity {
            return self.entries.entry(support.to_vec()).or_insert(entry);
        }
        &mut self.spare.insert((support.to_vec(), entry)).1
    }
}

impl Factor {
    fn solve(&self, support: &[usize], corr: &[f64]) -> Vec<f64> {
        let k = support.len();
        match self {
            Factor::Small(l) => {
                let mut b = [0.0; SMALL_SYSTEM];
                for (a, &s) in support.iter().enumerate() {
                    b[a] = corr[s];
                }
                small_cholesky_solve(l, &b, k)[..k].to_vec()
            }
            Factor::Dense(g) => {
                let b = DMatrix::from_fn(k, 1, |a, _| corr[support[a]]);
                solve_spd(g.clone(), &b).as_slice().to_vec()
            }
        }
    }
}

impl SupportEntry {
    fn past(&mut self, dict: &CodingDictionary, history: &PastColumns, support: &[usize]) -> &mut PastFit {
        let factor = &self.factor;
        self.past.get_or_insert_with(|| {
            let p = history.len();
            let mut coeffs = Vec::with_capacity(support.len() * p);
            let mut residual_sq = 0.0;
            let mut buf = Vec::with_capacity(dict.dim());
            for c in 0..p {
                let a = factor.solve(support, column_slice(&history.corr, c));
                residual_sq += dict.residual_sq(column_slice(&history.past, c), support, &a, &mut buf);
                coeffs.extend_from_slice(&a);
            }
            PastFit {
                coeffs,
                residual_sq,
                scores: None,
            }
        })
    }
}

impl CodingDictionary {
    #[inline]
    fn gram_col(&self, atom: usize) -> &[f64] {
        column_slice(&self.gram, atom)
    }

    fn factor(&self, support: &[usize]) -> Factor {
        let k = support.len();
        if k <= SMALL_SYSTEM {
            let mut g = [0.0; SMALL_SYSTEM * SMALL_SYSTEM];
            for (a, &sa) in support.iter().enumerate() {
                for (c, &sc) in support.iter().enumerate() {
                    g[a * k + c] = self.gram[(sa, sc)];
                }
            }
            if let Some(l) = small_cholesky(&g, k, 0.0, true).or_else(|| small_cholesky(&g, k, GRAM_JITTER, false)) {
                return Factor::Small(l);
            }
        }
        Factor::Dense(DMatrix::from_fn(k, k, |a, c| self.gram[(support[a], support[c])]))
    }

    /// `‖signal − D_S a‖²`, computed explicitly.
    fn residual_sq(&self, signal: &[f64], support: &[usize], coeffs: &[f64], buf: &mut Vec<f64>) -> f64 {
        buf.clear();
        buf.extend_from_slice(signal);
        for (&s, &a) in support.iter().zip(coeffs) {
            for (r, d) in buf.iter_mut().zip(column_slice(&self.atoms, s)) {
                *r -= a * d;
            }
        }
        buf.iter().map(|v| v * v).sum()
    }

    /// `Σ_c (corr_c[j] − Σ_t A[t,c] G[j,s_t])²` over the past columns.
    fn past_scores(&self, history: &PastColumns, support: &[usize], coeffs: &[f64], zeros: &[f64]) -> Vec<f64> {
        let n = self.n_atoms();
        let k = support.len();
        let p = history.len();
        let mut out = vec![0.0; n];
        if (1..=3).contains(&k) && p <= PAST_COLUMNS {
            let mut bases: [&[f64]; PAST_COLUMNS] = [zeros; PAST_COLUMNS];
            let mut a = [[0.0; 3]; PAST_COLUMNS];
            for c in 0..p {
                bases[c] = column_slice(&history.corr, c);
                a[c][..k].copy_from_slice(&coeffs[c * k..(c + 1) * k]);
            }
            let g = |t: usize| self.gram_col(support[t.min(k - 1)]);
            match k {
                1 => joint_scan::<1>(&mut out, &bases, [g(0)], &a),
                2 => joint_scan::<2>(&mut out, &bases, [g(0), g(1)], &a),
                _ => joint_scan::<3>(&mut out, &bases, [g(0), g(1), g(2)], &a),
            }
            return out;
        }
        for c in 0..p {
            let corr = column_slice(&history.corr, c);
            let a = &coeffs[c * k..(c + 1) * k];
            for (j, o) in out.iter_mut().enumerate() {
                let mut r = corr[j];
                for (&s, &at) in support.iter().zip(a) {
                    r -= at * self.gram[(j, s)];
                }
                *o += r * r;
            }
        }
        out
    }

    /// Joint solve of `[past | current]`, returning only the current column's
    /// coefficients. Same selection rule, refit and stopping rule as
    /// [`somp_solve`]; `current_corr` must be `Dᵀ current`.
    pub fn solve_current(
        &self,
        history: &PastColumns,
        current: &[f64],
        current_corr: &[f64],
        cfg: &SolverConfig,
    ) -> CurrentCode {
        self.solve_current_cached(&mut SupportCache::with_capacity(history, 0), current, current_corr, cfg)
    }

    /// [`CodingDictionary::solve_current`] reusing past-column work stored in
    /// `cache` by earlier calls with the same history.
    pub fn solve_current_cached(
        &self,
        cache: &mut SupportCache,
        current: &[f64],
        current_corr: &[f64],
        cfg: &SolverConfig,
    ) -> CurrentCode {
        let history = cache.history();
        let n_atoms = self.n_atoms();
        assert_eq!(current.len(), self.dim(), "current column length");
        assert_eq!(current_corr.len(), n_atoms, "current correlation length");
        assert_eq!(history.past.nrows(), self.dim(), "history dimension");
        let max_atoms = cfg.max_atoms.min(n_atoms);
        let current_sq = current.iter().map(|v| v * v).sum::<f64>();
        let r0_sq = history.past_sq + current_sq;
        let mut residual_sq = r0_sq;
        let mut support: Vec<usize> = Vec::with_capacity(max_atoms);
        let mut coefficients = Vec::new();

        SCRATCH.with_borrow_mut(|scratch| {
            let Scratch { scores, residual, zeros } = scratch;
            scores.resize(n_atoms, 0.0);
            zeros.resize(n_atoms, 0.0);

            while support.len() < max_atoms && residual_sq.sqrt() > cfg.residual_tol {
                let cols: Vec<&[f64]> = support.iter().map(|&s| self.gram_col(s)).collect();
                let (best, best_score) = if support.is_empty() {
                    // |r_j| ≤ ‖d_j‖ ‖current‖ bounds what the current column adds.
                    let bound = self.max_norm_sq * current_sq * (1.0 + PRUNE_SLACK) + PRUNE_SLACK;
                    history
                        .empty_top
                        .as_ref()
                        .and_then(|top| pruned_pick(&history.empty_scores, current_corr, top, bound))
                        .unwrap_or_else(|| full_pick(scores, &history.empty_scores, current_corr, &[], &[], &support))
                } else {
                    let entry = cache.entry(self, &support);
                    let fit = entry.past(self, history, &support);
                    if fit.scores.is_none() {
                        fit.scores = Some(self.past_scores(history, &support, &fit.coeffs, zeros));
                    }
                    let past = fit.scores.as_deref().expect("filled above");
                    full_pick(scores, past, current_corr, &cols, &coefficients, &support)
                };
                if !(best_score > SCORE_FLOOR * r0_sq) {
                    break;
                }
                support.push(best);
                let entry = cache.entry(self, &support);
                coefficients = entry.factor.solve(&support, current_corr);
                if support.len() < max_atoms {
                    let current_res_sq = self.residual_sq(current, &support, &coefficients, residual);
                    residual_sq = entry.past(self, history, &support).residual_sq + current_res_sq;
                }
            }
        });
        CurrentCode {
            support,
            coefficients,
        }
    }
}

#[inline]
fn current_score(j: usize, past: &[f64], corr: &[f64], cols: &[&[f64]], a: &[f64]) -> f64 {
    let mut r = corr[j];
    for (g, &at) in cols.iter().zip(a) {
        r -= at * g[j];
    }
    past[j] + r * r
}

/// Scores only the atoms with the largest empty-support scores. Succeeds when
/// the winner beats every other atom's upper bound `rest_max + bound`.
fn pruned_pick(past: &[f64], corr: &[f64], top: &TopSet, bound: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &j in &top.idx {
        let s = past[j] + corr[j] * corr[j];
        best = match best {
            Some((bj, bs)) if bs > s || (bs == s && bj < j) => Some((bj, bs)),
            _ if s.is_nan() => best,
            _ => Some((j, s)),
        };
    }
    best.filter(|&(_, s)| s > top.rest_max + bound)
}

fn full_pick(scores: &mut [f64], past: &[f64], corr: &[f64], cols: &[&[f64]], a: &[f64], support: &[usize]) -> (usize, f64) {
    let g = |t: usize| cols[t.min(cols.len().saturating_sub(1))];
    let c = |t: usize| a[t.min(a.len().saturating_sub(1))];
    let top = match cols.len() {
        0 => current_scan::<0>(scores, past, corr, [], []),
        1 => current_scan::<1>(scores, past, corr, [g(0)], [c(0)]),
        2 => current_scan::<2>(scores, past, corr, [g(0), g(1)], [c(0), c(1)]),
        3 => current_scan::<3>(scores, past, corr, [g(0), g(1), g(2)], [c(0), c(1), c(2)]),
        _ => {
            for (j, sc) in scores.iter_mut().enumerate() {
                *sc = current_score(j, past, corr, cols, a);
            }
            max_of(scores)
        }
    };
    let best = select(scores, top, support);
    (best, scores[best])
}

#[inline]
fn column_slice(m: &DMatrix<f64>, c: usize) -> &[f64] {
    let n = m.nrows();
    &m.as_slice()[c * n..(c + 1) * n]
}

/// First index holding `top`, unless it belongs to the support; then the
/// first maximum outside the support (0 if there is none).
fn select(scores: &mut [f64], top: f64, support: &[usize]) -> usize {
    if top > f64::NEG_INFINITY {
        if let Some(first) = scores.iter().position(|&v| v == top) {
            if !support.contains(&first) {
                return first;
            }
        }
    }
    for &s in support {
        scores[s] = f64::NEG_INFINITY;
    }
    argmax(scores)
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().fold(f64::NEG_INFINITY, |m, &v| if v > m { v } else { m })
}

/// Index of the first maximum; 0 when nothing exceeds `-inf`.
fn argmax(values: &[f64]) -> usize {
    let top = max_of(values);
    if top == f64::NEG_INFINITY {
        return 0;
    }
    values.iter().position(|&v| v == top).unwrap_or(0)
}

/// `scores[j] = past[j] + (corr[j] − Σ_t a_t g_t[j])²`, returning the
/// largest score.
#[inline]
fn current_scan<const K: usize>(
    scores: &mut [f64],
    past: &[f64],
    corr: &[f64],
    cols: [&[f64]; K],
    a: [f64; K],
) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked above.
        return unsafe { current_scan_avx2::<K>(scores, past, corr, cols, a) };
    }
    current_scan_body::<K>(scores, past, corr, cols, a)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn current_scan_avx2<const K: usize>(
    scores: &mut [f64],
    past: &[f64],
    corr: &[f64],
    cols: [&[f64]; K],
    a: [f64; K],
) -> f64 {
    current_scan_body::<K>(scores, past, corr, cols, a)
}

#[inline(always)]
fn current_scan_body<const K: usize>(
    scores: &mut [f64],
    past: &[f64],
    corr: &[f64],
    cols: [&[f64]; K],
    a: [f64; K],
) -> f64 {
    const LANES: usize = 8;
    let n = scores.len();
    let (past, corr) = (&past[..n], &corr[..n]);
    let cols = cols.map(|c| &c[..n]);
    let score = |j: usize| {
        let mut r = corr[j];
        for t in 0..K {
            r -= a[t] * cols[t][j];
        }
        past[j] + r * r
    };
    let mut lanes = [f64::NEG_INFINITY; LANES];
    let full = n - n % LANES;
    for base in (0..full).step_by(LANES) {
        for (l, lane) in lanes.iter_mut().enumerate() {
            let s = score(base + l);
            scores[base + l] = s;
            *lane = if s > *lane { s } else { *lane };
        }
    }
    for j in full..n {
        let s = score(j);
        scores[j] = s;
        lanes[0] = if s > lanes[0] { s } else { lanes[0] };
    }
    max_of(&lanes)
}

/// `scores[j] = Σ_c (bases[c][j] - Σ_t a[c][t] g_t[j])²` in a single pass.
/// Unused columns carry zero bases and zero coefficients.
#[inline]
fn joint_scan<const K: usize>(
    scores: &mut [f64],
    bases: &[&[f64]; PAST_COLUMNS],
    cols: [&[f64]; K],
    a: &[[f64; 3]; PAST_COLUMNS],
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked above.
        unsafe { joint_scan_avx2::<K>(scores, bases, cols, a) };
        return;
    }
    joint_scan_body::<K>(scores, bases, cols, a);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn joint_scan_avx2<const K: usize>(
    scores: &mut [f64],
    bases: &[&[f64]; PAST_COLUMNS],
    cols: [&[f64]; K],
    a: &[[f64; 3]; PAST_COLUMNS],
) {
    joint_scan_body::<K>(scores, bases, cols, a);
}

#[inline(always)]
fn joint_scan_body<const K: usize>(
    scores: &mut [f64],
    bases: &[&[f64]; PAST_COLUMNS],
    cols: [&[f64]; K],
    a: &[[f64; 3]; PAST_COLUMNS],
) {
    let n = scores.len();
    let bases = bases.map(|b| &b[..n]);
    let cols = cols.map(|c| &c[..n]);
    for j in 0..n {
        let mut g = [0.0; K];
        for t in 0..K {
            g[t] = cols[t][j];
        }
        let mut total = 0.0;
        for c in 0..PAST_COLUMNS {
            let mut r = bases[c][j];
            for t in 0..K {
                r -= a[c][t] * g[t];
            }
            total += r * r;
        }
        scores[j] = total;
    }
}

fn run_somp<G>(
    dict: &DMatrix<f64>,
    signals: &DMatrix<f64>,
    corr0: &DMatrix<f64>,
    gram_column: G,
    cfg: &SolverConfig,
    mut trace: Option<&mut Vec<f64>>,
) -> CoefficientMatrix
where
    G: Fn(usize) -> Vec<f64>,
{
    let n_atoms = dict.ncols();
    let m = signals.ncols();
    let mut coeffs = DMatrix::<f64>::zeros(n_atoms, m);
    let mut support: Vec<usize> = Vec::with_capacity(cfg.max_atoms);
    let mut gram_cols: Vec<Vec<f64>> = Vec::with_capacity(cfg.max_atoms);
    // support coefficients, k x m
    let mut fit = DMatrix::<f64>::zeros(0, m);

    let r0_sq = signals.norm_squared();
    let mut residual = r0_sq.sqrt();
    if let Some(t) = trace.as_deref_mut() {
        t.push(residual);
    }

    let mut scores = vec![0.0; n_atoms];
    let mut scratch = vec![0.0; n_atoms];
    while support.len() < cfg.max_atoms.min(n_atoms) && residual > cfg.residual_tol {
        scores.iter_mut().for_each(|s| *s = 0.0);
        for c in 0..m {
            scratch.copy_from_slice(corr0.column(c).as_slice());
            for (t, g) in gram_cols.iter().enumerate() {
                let a = fit[(t, c)];
                for (r, gj) in scratch.iter_mut().zip(g) {
                    *r -= a * gj;
                }
            }
            for (s, r) in scores.iter_mut().zip(&scratch) {
                *s += r * r;
            }
        }
        for &s in &support {
            scores[s] = f64::NEG_INFINITY;
        }
        let mut best = 0;
        for (j, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = j;
            }
        }
        if !(scores[best] > SCORE_FLOOR * r0_sq) {
            break;
        }
        support.push(best);
        gram_cols.push(gram_column(best));

        let k = support.len();
        let sub_gram = DMatrix::from_fn(k, k, |a, b| gram_cols[b][support[a]]);
        let rhs = DMatrix::from_fn(k, m, |a, c| corr0[(support[a], c)]);
        fit = solve_spd(sub_gram, &rhs);

        let mut res_sq = 0.0;
        for c in 0..m {
            for row in 0..signals.nrows() {
                let mut v = signals[(row, c)];
                for (t, &s) in support.iter().enumerate() {
                    v -= dict[(row, s)] * fit[(t, c)];
                }
                res_sq += v * v;
            }
        }
        residual = res_sq.sqrt();
        if let Some(t) = trace.as_deref_mut() {
            t.push(residual);
        }
    }

    for (t, &s) in support.iter().enumerate() {
        for c in 0..m {
            coeffs[(s, c)] = fit[(t, c)];
        }
    }
    CoefficientMatrix { coeffs, support }
}

/// Normal-equation solve on the support; retries with a small ridge when the
/// Gram submatrix is (numerically) singular.
type SmallMatrix = [f64; SMALL_SYSTEM * SMALL_SYSTEM];

/// Lower Cholesky factor of a `k`×`k` row-major system held on the stack.
/// With `strict`, pivots must clear the same floor [`solve_spd`] applies;
/// otherwise any positive pivot is accepted. `None` defers to [`solve_spd`].
fn small_cholesky(g: &SmallMatrix, k: usize, jitter: f64, strict: bool) -> Option<SmallMatrix> {
    let mut l = [0.0; SMALL_SYSTEM * SMALL_SYSTEM];
    for j in 0..k {
        let diag = g[j * k + j];
        let mut d = diag + jitter;
        for p in 0..j {
            d -= l[j * k + p] * l[j * k + p];
        }
        let ok = if strict {
            d > PIVOT_FLOOR * diag.max(f64::MIN_POSITIVE)
        } else {
            d > 0.0
        };
        if !ok {
            return None;
        }
        let ljj = d.sqrt();
        l[j * k + j] = ljj;
        for i in j + 1..k {
            let mut v = g[i * k + j];
            for p in 0..j {
                v -= l[i * k + p] * l[j * k + p];
            }
            l[i * k + j] = v / ljj;
        }
    }
    Some(l)
}

fn small_cholesky_solve(l: &SmallMatrix, b: &[f64; SMALL_SYSTEM], k: usize) -> [f64; SMALL_SYSTEM] {
    let mut y = [0.0; SMALL_SYSTEM];
    for i in 0..k {
        let mut v = b[i];
        for p in 0..i {
            v -= l[i * k + p] * y[p];
        }
        y[i] = v / l[i * k + i];
    }
    let mut x = [0.0; SMALL_SYSTEM];
    for i in (0..k).rev() {
        let mut v = y[i];
        for p in i + 1..k {
            v -= l[p * k + i] * x[p];
        }
        x[i] = v / l[i * k + i];
    }
    x
}

fn solve_spd(gram: DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let k = gram.nrows();
    let diag: Vec<f64> = (0..k).map(|i| gram[(i, i)]).collect();
    let well_posed = |ch: &Cholesky<f64, nalgebra::Dyn>| {
        let l = ch.l_dirty();
        (0..k).all(|i| l[(i, i)] * l[(i, i)] > PIVOT_FLOOR * diag[i].max(f64::MIN_POSITIVE))
    };
    if let Some(ch) = Cholesky::new(gram.clone()) {
        if well_posed(&ch) {
            return ch.solve(rhs);
        }
    }
    let mut ridged = gram;
    for i in 0..k {
        ridged[(i, i)] += GRAM_JITTER;
    }
    match Cholesky::new(ridged.clone()) {
        Some(ch) => ch.solve(rhs),
        // zero atoms leave the ridge as the whole diagonal; fall back to SVD
        None => ridged
            .svd(true, true)
            .solve(rhs, 1e-14)
            .unwrap_or_else(|_| DMatrix::zeros(k, rhs.ncols())),
    }
}
