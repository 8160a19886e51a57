//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use patchtrack::appearance::*;
use patchtrack::bench::{center_error, compute_curves, overlap_score, BBox};
use patchtrack::cli::{cmd_track, TrackArgs};
use patchtrack::filter::{map_estimate, propagate, resample, reweight, AffineState, ParticleSet};
use patchtrack::image::GrayImage;
use patchtrack::patching::{PatchMatrix, TEMPLATE_SIDE};
use patchtrack::sparse::{somp_solve, somp_solve_traced, SolverConfig};
use patchtrack::subspace::{guided_filter, SubspaceModel};
use patchtrack::synthetic::{generate, Occlusion, SyntheticConfig};
use patchtrack::tracker::{Tracker, TrackerConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn unit_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    for mut c in m.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    m
}

/// Unit atoms drawn one at a time, each kept only if its coherence with the
/// atoms already kept stays below `max_coherence`.
fn incoherent_dictionary(rng: &mut ChaCha8Rng, rows: usize, cols: usize, max_coherence: f64) -> DMatrix<f64> {
    let mut atoms: Vec<DVector<f64>> = Vec::with_capacity(cols);
    while atoms.len() < cols {
        let v = unit_columns(rng, rows, 1).column(0).into_owned();
        if atoms.iter().all(|a| a.dot(&v).abs() < max_coherence) {
            atoms.push(v);
        }
    }
    DMatrix::from_columns(&atoms)
}

fn coherence(d: &DMatrix<f64>) -> f64 {
    let g = d.tr_mul(d);
    let mut m: f64 = 0.0;
    for i in 0..g.nrows() {
        for j in 0..i {
            m = m.max(g[(i, j)].abs());
        }
    }
    m
}

/// Least-squares residual of `signals` on the atoms `cols`.
fn ls_residual(d: &DMatrix<f64>, signals: &DMatrix<f64>, cols: &[usize]) -> f64 {
    let sub = DMatrix::from_fn(d.nrows(), cols.len(), |r, c| d[(r, cols[c])]);
    let q = sub.clone().qr().q();
    (signals - &q * q.tr_mul(signals)).norm()
}

/// Exact recovery condition for support `s`: every other atom has
/// `‖D_s⁺ d_j‖₁ < 1`, which makes greedy selection provably exact on
/// noise-free signals built from `s`.
fn exact_recovery_condition(d: &DMatrix<f64>, s: &[usize]) -> bool {
    let sub = DMatrix::from_fn(d.nrows(), s.len(), |r, c| d[(r, s[c])]);
    let pinv = sub.pseudo_inverse(1e-12).expect("non-negative tolerance");
    (0..d.ncols())
        .filter(|j| !s.contains(j))
        .all(|j| (&pinv * d.column(j)).lp_norm(1) < 1.0)
}

struct SompInstance {
    d: DMatrix<f64>,
    support: [usize; 2],
    signals: DMatrix<f64>,
}

fn somp_instance(rng: &mut ChaCha8Rng) -> SompInstance {
    let d = incoherent_dictionary(rng, 8, 20, 0.5);
    let a = rng.random_range(0..20);
    let b = (a + rng.random_range(1..20)) % 20;
    let coef = DMatrix::from_fn(2, 5, |_, _| {
        let m = rng.random_range(0.2..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    });
    let signals = d.column(a) * coef.row(0) + d.column(b) * coef.row(1);
    SompInstance { d, support: [a.min(b), a.max(b)], signals }
}

/// `(recovered, |SOMP residual − best 2-subset residual|)`.
fn somp_check(inst: &SompInstance, cfg: &SolverConfig) -> Result<(bool, f64), String> {
    let out = somp_solve(&inst.d, &inst.signals, cfg).map_err(|e| e.to_string())?;
    let mut support = out.support().to_vec();
    support.sort_unstable();
    let somp_res = (&inst.signals - &inst.d * out.matrix()).norm();
    let mut best = f64::INFINITY;
    for i in 0..20 {
        for j in i + 1..20 {
            best = best.min(ls_residual(&inst.d, &inst.signals, &[i, j]));
        }
    }
    Ok((support == inst.support, (somp_res - best).abs()))
}

fn somp_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = SolverConfig { max_atoms: 2, residual_tol: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut recovered, mut worst, mut skipped) = (0, 0.0f64, 0);
    let mut evaluated = 0;
    while evaluated < 100 {
        let inst = somp_instance(&mut rng);
        assert!(coherence(&inst.d) < 0.5);
        if !exact_recovery_condition(&inst.d, &inst.support) {
            skipped += 1;
            continue;
        }
        evaluated += 1;
        let (ok, gap) = somp_check(&inst, &cfg)?;
        recovered += usize::from(ok);
        worst = worst.max(gap);
    }
    let elapsed = start.elapsed();
    // the same generator without the recovery-condition filter, for reference
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut raw = 0;
    for _ in 0..100 {
        raw += usize::from(somp_check(&somp_instance(&mut rng), &cfg)?.0);
    }
    check(
        recovered == 100 && worst < 1e-9 && elapsed < Duration::from_secs(5),
        format!(
            "recovered {recovered}/100, worst residual gap {worst:.2e}, {:.2}s ({skipped} draws failed the recovery condition; unfiltered draws recover {raw}/100)",
            elapsed.as_secs_f64()
        ),
    )
}

fn somp_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    for _ in 0..1000 {
        let dim = rng.random_range(4..24);
        let atoms = rng.random_range(2..40);
        let cols = rng.random_range(1..6);
        let cfg = SolverConfig { max_atoms: rng.random_range(1..7), residual_tol: 0.0 };
        let d = unit_columns(&mut rng, dim, atoms);
        let x = DMatrix::from_fn(dim, cols, |_, _| rng.random::<f64>() - 0.5);
        let (out, trace) = somp_solve_traced(&d, &x, &cfg).map_err(|e| e.to_string())?;
        let slack = 1e-12 * trace[0].max(1.0);
        let monotone = trace.windows(2).all(|w| w[1] <= w[0] + slack);
        if out.row_support_size() > cfg.max_atoms || !monotone {
            violations += 1;
        }
    }
    let elapsed = start.elapsed();
    check(
        violations == 0 && elapsed < Duration::from_secs(10),
        format!("{violations} violations in 1000 instances, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn grid_and_dictionary_shapes() -> Outcome {
    let (large, small) = (ScaleLabel::Large.grid(), ScaleLabel::Small.grid());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let templates: Vec<GrayImage> = (0..10)
        .map(|_| GrayImage::from_fn(TEMPLATE_SIDE, TEMPLATE_SIDE, |_, _| rng.random::<f64>()))
        .collect();
    let dl = build_dictionary(&templates, &large).map_err(|e| e.to_string())?;
    let ds = build_dictionary(&templates, &small).map_err(|e| e.to_string())?;
    let got = [large.count, large.dim, small.count, small.dim, dl.nrows(), dl.ncols(), ds.nrows(), ds.ncols()];
    check(
        got == [9, 256, 169, 64, 256, 90, 64, 1690],
        format!("large {}x{}, small {}x{}, dictionaries {}x{} and {}x{}", got[0], got[1], got[2], got[3], got[4], got[5], got[6], got[7]),
    )
}

fn random_flags(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.random::<bool>()).collect()
}

fn pooling_and_gate_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut gate_mismatch = 0;
    let cfg = GateConfig::default();
    for _ in 0..100 {
        // per-template fragment averaging
        let n = rng.random_range(1..11);
        let locations = rng.random_range(1..20);
        let code = DVector::from_fn(n * locations, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let got = accumulate_fragments(&code, n).map_err(|e| e.to_string())?;
        let mut want = vec![0.0; locations];
        for (atom, &c) in code.iter().enumerate() {
            if c > 0.0 {
                want[atom / n] += c / n as f64;
            }
        }
        for q in 0..locations {
            worst = worst.max((got[q] - want[q]).abs());
        }

        // alignment pooling as the diagonal of the stacked matrix
        let vectors: Vec<DVector<f64>> = (0..locations)
            .map(|_| DVector::from_fn(locations, |_, _| rng.random::<f64>()))
            .collect();
        let stacked = DMatrix::from_fn(locations, locations, |r, c| vectors[r][c]);
        let pooled = alignment_pool(&vectors).map_err(|e| e.to_string())?;
        worst = worst.max((pooled - stacked.diagonal()).amax());

        // spatial weights over a row-major grid
        let label = if rng.random::<bool>() { ScaleLabel::Large } else { ScaleLabel::Small };
        let grid = label.grid();
        let flags = random_flags(&mut rng, grid.count);
        let beta = rng.random_range(0.0..2.0);
        let weights = spatial_weights(&grid, &flags, beta).map_err(|e| e.to_string())?;
        let mut k = 0;
        for row in 1..=grid.u {
            for col in 1..=grid.w {
                let d = (col as f64 - (grid.w as f64 + 1.0) / 2.0).abs() + (row as f64 - (grid.u as f64 + 1.0) / 2.0).abs();
                let want = if flags[k] { 1.0 + (-beta * d).exp() } else { 1.0 };
                worst = worst.max((weights[k] - want).abs());
                k += 1;
            }
        }

        // location-constrained reconstruction errors
        let dim = rng.random_range(2..10);
        let dict = DMatrix::from_fn(dim, n * locations, |_, _| rng.random::<f64>() - 0.5);
        let patches = PatchMatrix::from_matrix(DMatrix::from_fn(dim, locations, |_, _| rng.random::<f64>()));
        let codes: Vec<DVector<f64>> = (0..locations)
            .map(|_| DVector::from_fn(n * locations, |_, _| if rng.random::<f64>() < 0.3 { rng.random::<f64>() - 0.5 } else { 0.0 }))
            .collect();
        let errors = location_errors(&dict, n, &patches, &codes).map_err(|e| e.to_string())?;
        for (i, code) in codes.iter().enumerate() {
            let masked = DVector::from_fn(code.len(), |j, _| if j / n == i { code[j] } else { 0.0 });
            let r = patches.matrix().column(i) - &dict * masked;
            worst = worst.max((errors[i] - r.dot(&r)).abs());
        }

        // gates on clear fractions
        let small = OcclusionReport::from_errors((0..169).map(|_| rng.random::<f64>() * 0.08).collect(), cfg.eps)
            .map_err(|e| e.to_string())?;
        let large = OcclusionReport::from_errors((0..9).map(|_| rng.random::<f64>() * 0.08).collect(), cfg.eps)
            .map_err(|e| e.to_string())?;
        let clear = |r: &OcclusionReport| r.errors.iter().filter(|&&e| e < cfg.eps).count() as f64 / r.errors.len() as f64;
        let delta = rng.random::<f64>();
        let o = rng.random::<f64>();
        gate_mismatch += usize::from(dictionary_update_gate(&large, &small, delta) != ((clear(&small) + clear(&large)) / 2.0 > delta));
        gate_mismatch += usize::from(buffer_update_gate(&large, o) != (clear(&large) > o));
        gate_mismatch += usize::from(buffer_update_gate(&small, o) != (clear(&small) > o));
        worst = worst.max((small.fraction_clear - clear(&small)).abs());

        // candidate likelihood
        let eta = rng.random_range(0.0..20.0);
        let gamma = gamma_weight(&large, eta);
        let gamma_want = large.errors.iter().map(|e| (-eta * e).exp()).sum::<f64>() / 9.0;
        worst = worst.max((gamma - gamma_want).abs());
        let features = |count: usize, rng: &mut ChaCha8Rng| {
            let raw: Vec<DVector<f64>> = (0..count).map(|_| DVector::from_fn(count, |_, _| rng.random::<f64>())).collect();
            let w = DVector::from_fn(count, |_, _| 1.0 + rng.random::<f64>());
            let want: f64 = (0..count).map(|k| raw[k][k] * w[k]).sum::<f64>() / count as f64;
            (PooledFeatures::new(raw, &w).unwrap(), want)
        };
        let (fs, ms) = features(169, &mut rng);
        let (fl, ml) = features(9, &mut rng);
        worst = worst.max((candidate_likelihood(&fs, &fl, gamma) - (gamma * ml + ms)).abs());
    }
    check(
        worst < 1e-12 && gate_mismatch == 0,
        format!("max deviation {worst:.2e}, gate mismatches {gate_mismatch} over 100 instances"),
    )
}

fn batch_pca(data: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mean = data.column_mean();
    let mut x = data.clone();
    for mut c in x.column_iter_mut() {
        c -= &mean;
    }
    let eig = SymmetricEigen::new(x.tr_mul(&x));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut u = DMatrix::zeros(x.nrows(), k);
    for (c, &i) in order.iter().take(k).enumerate() {
        let v = &x * eig.eigenvectors.column(i);
        u.column_mut(c).copy_from(&(&v / v.norm()));
    }
    u
}

fn incremental_subspace() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // a decaying spectrum keeps the top five directions well separated
    let scales: Vec<f64> = (0..1024).map(|r| 1.0 / (1.0 + r as f64 / 4.0)).collect();
    let data = DMatrix::from_fn(1024, 50, |r, _| scales[r] * (rng.random::<f64>() - 0.5));
    let start = Instant::now();
    let mut model = SubspaceModel::new(1024, 1.0, 50).map_err(|e| e.to_string())?;
    for chunk in 0..5 {
        model.incremental_update(&data.columns(chunk * 10, 10).into_owned()).map_err(|e| e.to_string())?;
    }
    let elapsed = start.elapsed();
    let top = model.basis().columns(0, 5).into_owned();
    let reference = batch_pca(&data, 5);
    let cosines = top.tr_mul(&reference).svd(false, false).singular_values;
    let worst_angle = cosines.iter().map(|c| c.clamp(-1.0, 1.0).acos()).fold(0.0, f64::max);
    // acos loses precision near 1; the sine form is the sharper measure
    let sine = (&reference - &top * top.tr_mul(&reference)).svd(false, false).singular_values.max();
    check(
        sine.asin() < 1e-6 && elapsed < Duration::from_secs(2),
        format!("largest principal angle {:.2e} rad (acos form {worst_angle:.2e}), {:.3}s", sine.asin(), elapsed.as_secs_f64()),
    )
}

fn guided_filter_limits() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let guide = GrayImage::from_fn(32, 32, |_, _| rng.random::<f64>());
    let constant = vec![0.37; 32 * 32];
    let flat = guided_filter(&guide, &constant, 2, 0.1).map_err(|e| e.to_string())?;
    let exact = flat.iter().all(|&v| v == 0.37);
    let smooth = guided_filter(&guide, guide.data(), 2, 1e-8).map_err(|e| e.to_string())?;
    let diff = smooth.iter().zip(guide.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(
        exact && diff < 1e-3,
        format!("constant preserved exactly: {exact}, self-guide max diff {diff:.2e}"),
    )
}

fn particle_filter() -> Outcome {
    let init = AffineState::from_box(100.0, 80.0, 64.0, 64.0);
    let zero = [0.0; 6];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut set = ParticleSet::uniform(init, 50).map_err(|e| e.to_string())?;
    for _ in 0..100 {
        let moved = propagate(&set, &zero, &mut rng).map_err(|e| e.to_string())?;
        let lik: Vec<f64> = (0..moved.len()).map(|_| rng.random::<f64>()).collect();
        let weighted = reweight(&moved, &lik).map_err(|e| e.to_string())?;
        set = resample(&weighted, &mut rng).map_err(|e| e.to_string())?;
    }
    let fixed = set.states.iter().all(|s| *s == init) && map_estimate(&set).map_err(|e| e.to_string())? == init;

    let run = |seed: u64| -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParticleSet::uniform(init, 200).unwrap();
        let sigma = TrackerConfig::default().sigma;
        for _ in 0..10 {
            let moved = propagate(&set, &sigma, &mut rng).unwrap();
            let lik: Vec<f64> = moved.states.iter().map(|s| (-(s.lx - 132.0).powi(2) / 50.0).exp()).collect();
            set = resample(&reweight(&moved, &lik).unwrap(), &mut rng).unwrap();
        }
        set.states.iter().flat_map(|s| s.as_array().map(f64::to_bits)).collect()
    };
    let deterministic = run(42) == run(42) && run(42) != run(43);

    // 10⁴ particles in shuffled order carrying one of four labels
    let n = 10_000;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let raw: Vec<f64> = labels.iter().map(|&l| (l + 1) as f64 * rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    let states: Vec<AffineState> = labels.iter().map(|&l| AffineState::from_box(l as f64, 0.0, 32.0, 32.0)).collect();
    let drawn = resample(&ParticleSet { states, weights: raw.clone(), degenerate: false }, &mut rng)
        .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for label in 0..4 {
        let want = labels.iter().zip(&raw).filter(|(&l, _)| l == label).map(|(_, w)| w).sum::<f64>() / total;
        let target = AffineState::from_box(label as f64, 0.0, 32.0, 32.0);
        let share = drawn.states.iter().filter(|s| **s == target).count() as f64 / n as f64;
        worst = worst.max((share - want).abs() / want);
    }
    check(
        fixed && deterministic && worst < 0.02,
        format!("fixed point {fixed}, seed determinism {deterministic}, worst relative share error {:.3}%", worst * 100.0),
    )
}

struct SyntheticRun {
    errors: Vec<f64>,
    gates: Vec<bool>,
    boxes: Vec<BBox>,
    gt: Vec<BBox>,
    fps: f64,
}

fn run_synthetic(occlusion: Option<Occlusion>) -> Result<SyntheticRun, String> {
    let seq = generate(&SyntheticConfig { occlusion, ..SyntheticConfig::default() });
    let gt: Vec<BBox> = seq.ground_truth.iter().map(|&b| BBox::from_array(b)).collect();
    let mut tracker = Tracker::init(&seq.frames[0], seq.ground_truth[0], TrackerConfig::default()).map_err(|e| e.to_string())?;
    let mut run = SyntheticRun { errors: vec![0.0], gates: vec![true], boxes: vec![gt[0]], gt: gt.clone(), fps: 0.0 };
    let start = Instant::now();
    for (f, frame) in seq.frames.iter().enumerate().skip(1) {
        let r = tracker.step(frame).map_err(|e| format!("frame {f}: {e}"))?;
        let b = BBox::from_array(r.bbox);
        run.errors.push(center_error(&b, &gt[f]));
        run.gates.push(r.dictionary_gate);
        run.boxes.push(b);
    }
    run.fps = (seq.frames.len() - 1) as f64 / start.elapsed().as_secs_f64();
    Ok(run)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn synthetic_tracking() -> Outcome {
    let run = run_synthetic(None)?;
    let curves = compute_curves(&run.boxes, &run.gt).map_err(|e| e.to_string())?;
    let err = mean(&run.errors[1..]);
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let accurate = err < 3.0 && curves.dp20 == 1.0;
    let detail = format!(
        "mean center error {err:.3} px, DP@20 {:.3}, {:.3} fps at 650 particles on {cores} core(s)",
        curves.dp20, run.fps
    );
    if cores < 4 {
        // throughput is specified for a multi-core desktop machine
        return check(accurate, format!("{detail} (fps target needs >= 4 cores, not checked)"));
    }
    check(accurate && run.fps >= 0.5, detail)
}

fn synthetic_occlusion() -> Outcome {
    let occ = Occlusion { start: 80, end: 100, coverage: 0.5 };
    let run = run_synthetic(Some(occ))?;
    let occluded = (occ.start..=occ.end).filter(|&f| !run.gates[f]).count() as f64 / (occ.end - occ.start + 1) as f64;
    let after = mean(&run.errors[120..]);
    check(
        occluded >= 0.8 && after < 5.0,
        format!("dictionary gate closed on {:.0}% of occluded frames, mean error {after:.3} px on frames 120-199", occluded * 100.0),
    )
}

fn metrics_fixtures() -> Outcome {
    let b = |x, y, w, h| BBox::new(x, y, w, h);
    let worked = overlap_score(&b(0.0, 0.0, 10.0, 10.0), &b(5.0, 0.0, 10.0, 10.0)) == 50.0 / 150.0
        && overlap_score(&b(1.0, 2.0, 3.0, 4.0), &b(1.0, 2.0, 3.0, 4.0)) == 1.0
        && overlap_score(&b(0.0, 0.0, 5.0, 5.0), &b(10.0, 10.0, 5.0, 5.0)) == 0.0
        && center_error(&b(-1.0, -1.0, 2.0, 2.0), &b(2.0, 3.0, 2.0, 2.0)) == 5.0;

    let gt: Vec<BBox> = (0..10).map(|i| b(10.0 + i as f64, 10.0, 20.0, 20.0)).collect();
    let identity = compute_curves(&gt, &gt).map_err(|e| e.to_string())?;
    let identity_ok = identity.dp20 == 1.0 && (identity.auc - 20.0 / 21.0).abs() <= 1e-12;

    // five exact frames, two shifted by 10 px (overlap 1/3), two by 30 px
    // and one by 100 px (both disjoint)
    let shifts = [0.0, 0.0, 0.0, 0.0, 0.0, 10.0, 10.0, 30.0, 30.0, 100.0];
    let track: Vec<BBox> = gt.iter().zip(shifts).map(|(g, s)| b(g.x + s, g.y, g.w, g.h)).collect();
    let mixed = compute_curves(&track, &gt).map_err(|e| e.to_string())?;
    let precision: Vec<f64> = (0..=50).map(|t| if t < 10 { 0.5 } else if t < 30 { 0.7 } else { 0.9 }).collect();
    let success: Vec<f64> = (0..=20).map(|i| if i <= 6 { 0.7 } else if i < 20 { 0.5 } else { 0.0 }).collect();
    let mixed_ok = mixed.precision == precision
        && mixed.success == success
        && mixed.dp20 == 0.7
        && (mixed.auc - 11.4 / 21.0).abs() <= 1e-12;
    check(
        worked && identity_ok && mixed_ok,
        format!(
            "worked examples {worked}, identity dp20={} auc={:.12}, mixed fixture {mixed_ok} (auc {:.12})",
            identity.dp20, identity.auc, mixed.auc
        ),
    )
}

fn end_to_end_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let seq = generate(&SyntheticConfig { frames: 6, ..SyntheticConfig::default() });
    let img = dir.path().join("seq/img");
    std::fs::create_dir_all(&img).map_err(|e| e.to_string())?;
    let mut gt = String::new();
    for (i, (frame, g)) in seq.frames.iter().zip(&seq.ground_truth).enumerate() {
        image::GrayImage::from_raw(frame.width() as u32, frame.height() as u32, frame.to_luma8())
            .expect("buffer matches the frame size")
            .save(img.join(format!("{:04}.png", i + 1)))
            .map_err(|e| e.to_string())?;
        gt.push_str(&format!("{},{},{},{}\n", g[0] + 1.0, g[1] + 1.0, g[2], g[3]));
    }
    std::fs::write(dir.path().join("seq/groundtruth_rect.txt"), gt).map_err(|e| e.to_string())?;
    let config = dir.path().join("config.toml");
    std::fs::write(&config, "n_particles = 60\n").map_err(|e| e.to_string())?;
    let track = |out: &str| -> Result<Vec<u8>, String> {
        let args = TrackArgs {
            seq: dir.path().join("seq"),
            init: None,
            gt_init: true,
            out: dir.path().join(out),
            config: Some(config.clone()),
            seed: Some(17),
        };
        cmd_track(&args).map_err(|e| e.to_string())?;
        std::fs::read(dir.path().join(out).join("results.txt")).map_err(|e| e.to_string())
    };
    let (a, b) = (track("run1")?, track("run2")?);
    check(
        !a.is_empty() && a == b,
        format!("two runs with seed 17 wrote {} and {} bytes, identical: {}", a.len(), b.len(), a == b),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("SOMP oracle equivalence", somp_oracle),
        ("SOMP invariants", somp_invariants),
        ("grid and dictionary shapes", grid_and_dictionary_shapes),
        ("pooling, weighting and gate oracles", pooling_and_gate_oracles),
        ("incremental subspace", incremental_subspace),
        ("guided filter", guided_filter_limits),
        ("particle filter", particle_filter),
        ("synthetic tracking", synthetic_tracking),
        ("synthetic occlusion", synthetic_occlusion),
        ("metrics fixtures", metrics_fixtures),
        ("end-to-end determinism", end_to_end_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
