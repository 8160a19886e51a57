//! Incremental eigenbasis of tracked appearances, occlusion-masked template
//! fusion and the guided filter used to smooth fusion seams.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::image::{clamp_unit, GrayImage};
use crate::patching::{GridSpec, TEMPLATE_SIDE};

/// Basis size kept after each update.
pub const DEFAULT_MAX_BASIS: usize = 20;
pub const DEFAULT_FORGETTING: f64 = 0.95;
/// Fraction of pixels ignored by the robust re-fit in [`SubspaceModel::reconstruct`].
pub const TRIM_FRACTION: f64 = 0.10;
pub const GUIDED_RADIUS: usize = 2;
pub const GUIDED_REG: f64 = 0.1;

/// Singular values whose square falls below this fraction of the total energy are dropped.
const ENERGY_CUTOFF: f64 = 1e-6;
/// Absolute floor for singular values, relative to the data scale.
const SINGULAR_FLOOR: f64 = 1e-12;

/// Mean and truncated eigenbasis of the observed appearance vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceModel {
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    singular_values: DVector<f64>,
    n_observed: f64,
    forgetting: f64,
    max_basis: usize,
}

impl SubspaceModel {
    pub fn new(dim: usize, forgetting: f64, max_basis: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("subspace dimension must be positive".into()));
        }
        if !(forgetting > 0.0 && forgetting <= 1.0) {
            return Err(Error::Config(format!(
                "forgetting factor must lie in (0, 1], got {forgetting}"
            )));
        }
        if max_basis == 0 {
            return Err(Error::Config("max_basis must be positive".into()));
        }
        Ok(Self {
            mean: DVector::zeros(dim),
            basis: DMatrix::zeros(dim, 0),
            singular_values: DVector::zeros(0),
            n_observed: 0.0,
            forgetting,
            max_basis,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Effective number of observations after forgetting.
    pub fn n_observed(&self) -> f64 {
        self.n_observed
    }

    pub fn forgetting(&self) -> f64 {
        self.forgetting
    }

    pub fn max_basis(&self) -> usize {
        self.max_basis
    }

    /// Sequential Karhunen-Loeve update with mean tracking.
    pub fn incremental_update(&mut self, columns: &DMatrix<f64>) -> Result<()> {
        let m = columns.ncols();
        if m == 0 {
            return Err(Error::Contract("incremental_update needs at least one column".into()));
        }
        if columns.nrows() != self.dim() {
            return Err(Error::Dimension(format!(
                "update columns have dimension {}, model has {}",
                columns.nrows(),
                self.dim()
            )));
        }
        if columns.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("subspace", "non-finite update column"));
        }

        let batch_mean = columns.column_mean();
        let mut centered = columns.clone();
        for mut c in centered.column_iter_mut() {
            c -= &batch_mean;
        }

        if self.n_observed == 0.0 {
            self.mean = batch_mean;
            self.n_observed = m as f64;
            let (u, s) = truncated_svd(&centered, self.max_basis, data_scale(columns))?;
            self.basis = u;
            self.singular_values = s;
            return Ok(());
        }

        let n0 = self.n_observed;
        let mf = m as f64;
        let shift = (n0 * mf / (n0 + mf)).sqrt() * (&self.mean - &batch_mean);
        let data = extend_columns(&centered, &shift);
        let f = self.forgetting;
        self.mean = (f * n0 * &self.mean + mf * &batch_mean) / (mf + f * n0);
        self.n_observed = mf + f * n0;

        let k = self.rank();
        let proj = self.basis.tr_mul(&data);
        let mut resid = &data - &self.basis * &proj;
        // A second projection pass keeps the residual orthogonal to the basis.
        let again = self.basis.tr_mul(&resid);
        resid -= &self.basis * again;
        let q = resid.clone().qr().q();
        let extra = q.ncols();

        let mut r = DMatrix::zeros(k + extra, k + data.ncols());
        for i in 0..k {
            r[(i, i)] = f * self.singular_values[i];
        }
        r.view_mut((0, k), (k, data.ncols())).copy_from(&proj);
        r.view_mut((k, k), (extra, data.ncols())).copy_from(&q.tr_mul(&resid));

        let mut stacked = DMatrix::zeros(self.dim(), k + extra);
        stacked.columns_mut(0, k).copy_from(&self.basis);
        stacked.columns_mut(k, extra).copy_from(&q);

        let scale = data_scale(columns).max(self.singular_values.iter().copied().fold(0.0, f64::max));
        let (u_small, s) = truncated_svd(&r, self.max_basis, scale)?;
        let mut basis = stacked * u_small;
        orthonormalize(&mut basis);
        self.basis = basis;
        self.singular_values = s;
        Ok(())
    }

    /// Plain least-squares reconstruction `mean + basis·basisᵀ(x − mean)`.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = x - &self.mean;
        &self.mean + &self.basis * self.basis.tr_mul(&d)
    }

    /// Reconstruction by the subspace after discarding the pixels with the
    /// largest plain-projection residuals.
    pub fn reconstruct_vector(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "template has {} pixels, model has {}",
                x.len(),
                self.dim()
            )));
        }
        if self.rank() == 0 {
            return Ok(self.mean.clone());
        }
        let d = x - &self.mean;
        let coeffs = self.basis.tr_mul(&d);
        let resid = &d - &self.basis * &coeffs;

        let n = d.len();
        let trimmed = ((n as f64) * TRIM_FRACTION).floor() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| resid[b].abs().total_cmp(&resid[a].abs()).then(a.cmp(&b)));
        let mut keep = vec![true; n];
        for &i in &order[..trimmed] {
            keep[i] = false;
        }

        let k = self.rank();
        let mut normal = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for (i, _) in keep.iter().enumerate().filter(|(_, &kp)| kp) {
            let row = self.basis.row(i);
            for a in 0..k {
                rhs[a] += row[a] * d[i];
                for b in 0..k {
                    normal[(a, b)] += row[a] * row[b];
                }
            }
        }
        let refit = match normal.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => normal
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .map_err(|e| Error::numeric("subspace", e.to_string()))?,
        };
        Ok(&self.mean + &self.basis * refit)
    }

    /// Robust reconstruction of a template image; see [`Self::reconstruct_vector`].
    pub fn reconstruct(&self, template: &GrayImage) -> Result<GrayImage> {
        let x = DVector::from_column_slice(template.data());
        let h = self.reconstruct_vector(&x)?;
        let mut it = h.iter();
        Ok(GrayImage::from_fn(template.width(), template.height(), |_, _| {
            *it.next().expect("pixel count checked")
        }))
    }
}

fn data_scale(m: &DMatrix<f64>) -> f64 {
    m.amax().max(1.0)
}

fn extend_columns(m: &DMatrix<f64>, extra: &DVector<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols() + 1);
    out.columns_mut(0, m.ncols()).copy_from(m);
    out.column_mut(m.ncols()).copy_from(extra);
    out
}

/// Left singular vectors and values sorted by decreasing value, dropping
/// negligible directions and truncating to `max_rank`.
fn truncated_svd(m: &DMatrix<f64>, max_rank: usize, scale: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.ok_or_else(|| Error::numeric("subspace", "svd produced no basis"))?;
    let s = svd.singular_values;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("subspace", "non-finite singular value"));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let energy: f64 = s.iter().map(|v| v * v).sum();
    let floor = SINGULAR_FLOOR * scale * (m.nrows().max(m.ncols()) as f64).sqrt();
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| s[i] > floor && s[i] * s[i] >= ENERGY_CUTOFF * energy)
        .take(max_rank)
        .collect();
    let mut basis = DMatrix::zeros(m.nrows(), kept.len());
    let mut values = DVector::zeros(kept.len());
    for (c, &i) in kept.iter().enumerate() {
        basis.column_mut(c).copy_from(&u.column(i));
        values[c] = s[i];
    }
    Ok((basis, values))
}

/// Modified Gram-Schmidt pass that removes accumulated round-off.
fn orthonormalize(basis: &mut DMatrix<f64>) {
    for j in 0..basis.ncols() {
        for i in 0..j {
            let (done, mut rest) = basis.columns_range_pair_mut(i, j..);
            let dot = done.dot(&rest.column(0));
            rest.column_mut(0).axpy(-dot, &done, 1.0);
        }
        let norm = basis.column(j).norm();
        if norm > 0.0 {
            basis.column_mut(j).unscale_mut(norm);
        }
    }
}

/// Pixel-level trust map: 1 keeps the tracked pixel, 0 takes the reconstruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    side: usize,
    values: Vec<u8>,
}

impl PixelMask {
    pub fn filled(side: usize, value: bool) -> Self {
        Self {
            side,
            values: vec![u8::from(value); side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.side + x] == 1
    }

    pub fn count_trusted(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }
}

/// Expands per-patch clear flags to pixels by majority vote over the covering
/// patches; ties and uncovered pixels count as trusted.
pub fn patch_mask_to_pixel_mask(flags: &[bool], grid: &GridSpec) -> Result<PixelMask> {
    if flags.len() != grid.count {
        return Err(Error::Dimension(format!(
            "{} flags for a grid of {} patches",
            flags.len(),
            grid.count
        )));
    }
    let side = grid.template_side;
    let mut cover = vec![0usize; side * side];
    let mut clear = vec![0usize; side * side];
    for (k, &flag) in flags.iter().enumerate() {
        let (x0, y0) = grid.corner(k);
        for y in y0..y0 + grid.patch_side {
            for x in x0..x0 + grid.patch_side {
                cover[y * side + x] += 1;
                clear[y * side + x] += usize::from(flag);
            }
        }
    }
    let values = cover
        .iter()
        .zip(&clear)
        .map(|(&c, &ok)| u8::from(2 * ok >= c))
        .collect();
    Ok(PixelMask { side, values })
}

/// Mean over a `(2r+1)²` window with edge-replicated borders. Row-major.
fn box_mean(values: &[f64], width: usize, height: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut rows = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for dx in -r..=r {
                acc += values[y * width + clamp(x as isize + dx, width)];
            }
            rows[y * width + x] = acc;
        }
    }
    let norm = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    let mut out = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for dy in -r..=r {
                acc += rows[clamp(y as isize + dy, height) * width + x];
            }
            out[y * width + x] = acc / norm;
        }
    }
    out
}

/// Guided filter: local linear model of `input` in terms of `guide`.
/// `input` is row-major with the guide's dimensions; the result is unclamped.
pub fn guided_filter(guide: &GrayImage, input: &[f64], radius: usize, reg: f64) -> Result<Vec<f64>> {
    let (w, h) = (guide.width(), guide.height());
    if input.len() != w * h {
        return Err(Error::Dimension(format!(
            "guided filter input has {} samples, guide is {w}x{h}",
            input.len()
        )));
    }
    if radius == 0 {
        return Err(Error::Config("guided filter radius must be at least 1".into()));
    }
    if !(reg > 0.0 && reg.is_finite()) {
        return Err(Error::Config(format!("guided filter reg must be positive, got {reg}")));
    }
    let g = guide.data();
    // Filtering is shift-equivariant in the input; working on `input - p0`
    // keeps a constant input exactly constant.
    let p0 = input[0];
    let p: Vec<f64> = input.iter().map(|v| v - p0).collect();
    let gg: Vec<f64> = g.iter().map(|v| v * v).collect();
    let gp: Vec<f64> = g.iter().zip(&p).map(|(a, b)| a * b).collect();
    let mean_g = box_mean(g, w, h, radius);
    let mean_p = box_mean(&p, w, h, radius);
    let mean_gg = box_mean(&gg, w, h, radius);
    let mean_gp = box_mean(&gp, w, h, radius);
    let mut a = vec![0.0; w * h];
    let mut b = vec![0.0; w * h];
    for i in 0..w * h {
        let var = mean_gg[i] - mean_g[i] * mean_g[i];
        let cov = mean_gp[i] - mean_g[i] * mean_p[i];
        a[i] = cov / (var + reg);
        b[i] = mean_p[i] - a[i] * mean_g[i];
    }
    let mean_a = box_mean(&a, w, h, radius);
    let mean_b = box_mean(&b, w, h, radius);
    Ok((0..w * h).map(|i| p0 + (mean_a[i] * g[i] + mean_b[i])).collect())
}

/// Per-pixel select between the tracked crop and its reconstruction.
pub fn masked_blend(crop: &GrayImage, reconstruction: &GrayImage, mask: &PixelMask) -> Result<Vec<f64>> {
    if !crop.same_size(reconstruction)
        || crop.width() != mask.side()
        || crop.height() != mask.side()
    {
        return Err(Error::Dimension(format!(
            "fusing {}x{} crop with {}x{} reconstruction and {}x{} mask",
            crop.width(),
            crop.height(),
            reconstruction.width(),
            reconstruction.height(),
            mask.side(),
            mask.side()
        )));
    }
    Ok(crop
        .data()
        .iter()
        .zip(reconstruction.data())
        .zip(mask.values())
        .map(|((&c, &r), &k)| if k == 1 { c } else { r })
        .collect())
}

/// New template from the tracked crop with occluded pixels taken from the
/// reconstruction, smoothed by the crop-guided filter.
pub fn fuse_template(
    crop: &GrayImage,
    reconstruction: &GrayImage,
    mask: &PixelMask,
    radius: usize,
    reg: f64,
) -> Result<GrayImage> {
    if crop.width() != TEMPLATE_SIDE || crop.height() != TEMPLATE_SIDE {
        return Err(Error::Dimension(format!(
            "templates are {TEMPLATE_SIDE}x{TEMPLATE_SIDE}, got {}x{}",
            crop.width(),
            crop.height()
        )));
    }
    let blend = masked_blend(crop, reconstruction, mask)?;
    let smooth = guided_filter(crop, &blend, radius, reg)?;
    let mut it = smooth.into_iter();
    Ok(GrayImage::from_fn(crop.width(), crop.height(), |_, _| {
        clamp_unit(it.next().expect("pixel count checked"))
    }))
}
