//! Grid geometry, affine cropping and patch vectorization.
//!
//! A candidate region is warped into a `template_side` × `template_side` crop,
//! then cut into overlapping square patches on a regular grid. Patches are
//! indexed row-major over the grid (`k = j * w + i`, zero-based, `i` the column)
//! and each one is vectorized column-major before ℓ2 normalization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filter::AffineState;
use crate::image::GrayImage;

/// Side of the normalized target crop in pixels.
pub const TEMPLATE_SIDE: usize = 32;

/// Geometry of one patch scale over the normalized template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub template_side: usize,
    pub patch_side: usize,
    pub step: usize,
    /// Patches per row.
    pub w: usize,
    /// Patches per column.
    pub u: usize,
    pub count: usize,
    /// Length of a vectorized patch.
    pub dim: usize,
}

impl GridSpec {
    /// Zero-based grid coordinates `(i, j)` (column, row) of patch `k`.
    pub fn coords(&self, k: usize) -> (usize, usize) {
        (k % self.w, k / self.w)
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.w + i
    }

    /// Top-left pixel `(x, y)` of patch `k` inside the template.
    pub fn corner(&self, k: usize) -> (usize, usize) {
        let (i, j) = self.coords(k);
        (i * self.step, j * self.step)
    }

    pub fn corners(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.count).map(move |k| self.corner(k))
    }
}

pub fn grid_layout(template_side: usize, patch_side: usize, step: usize) -> Result<GridSpec> {
    let bad = |why: &str| {
        Error::Config(format!(
            "grid (template_side={template_side}, patch_side={patch_side}, step={step}): {why}"
        ))
    };
    if patch_side == 0 {
        return Err(bad("patch side must be at least 1"));
    }
    if step == 0 {
        return Err(bad("step must be at least 1"));
    }
    if patch_side > template_side {
        return Err(bad("patch larger than template"));
    }
    if (template_side - patch_side) % step != 0 {
        return Err(bad("template_side - patch_side is not divisible by step"));
    }
    let w = (template_side - patch_side) / step + 1;
    Ok(GridSpec {
        template_side,
        patch_side,
        step,
        w,
        u: w,
        count: w * w,
        dim: patch_side * patch_side,
    })
}

/// Vectorized patches, one ℓ2-normalized column per grid location.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix(DMatrix<f64>);

impl PatchMatrix {
    pub fn from_matrix(columns: DMatrix<f64>) -> Self {
        Self(columns)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn count(&self) -> usize {
        self.0.ncols()
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn column(&self, k: usize) -> DVector<f64> {
        self.0.column(k).into_owned()
    }
}

/// Scales `v` to unit ℓ2 norm; an all-zero vector stays zero.
pub fn normalize_in_place(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

pub fn extract_patches(template: &GrayImage, grid: &GridSpec) -> Result<PatchMatrix> {
    check_template_side(template, grid)?;
    let mut out = DMatrix::<f64>::zeros(grid.dim, grid.count);
    for k in 0..grid.count {
        write_patch(template, grid, k, out.column_mut(k).as_mut_slice());
    }
    Ok(PatchMatrix(out))
}

/// Vectorized, normalized patch `k` of `template` written into `dst`; the
/// single-location counterpart of [`extract_patches`].
pub fn extract_patch(template: &GrayImage, grid: &GridSpec, k: usize, dst: &mut [f64]) -> Result<()> {
    check_template_side(template, grid)?;
    if k >= grid.count || dst.len() != grid.dim {
        return Err(Error::Dimension(format!(
            "patch {k} into a buffer of {} (grid has {} patches of dim {})",
            dst.len(),
            grid.count,
            grid.dim
        )));
    }
    write_patch(template, grid, k, dst);
    Ok(())
}

fn check_template_side(template: &GrayImage, grid: &GridSpec) -> Result<()> {
    let side = grid.template_side;
    if template.width() != side || template.height() != side {
        return Err(Error::Dimension(format!(
            "template is {}x{}, grid expects {side}x{side}",
            template.width(),
            template.height()
        )));
    }
    Ok(())
}

fn write_patch(template: &GrayImage, grid: &GridSpec, k: usize, dst: &mut [f64]) {
    let side = grid.template_side;
    let ps = grid.patch_side;
    let (x0, y0) = grid.corner(k);
    let pixels = template.data();
    for dx in 0..ps {
        for dy in 0..ps {
            dst[dx * ps + dy] = pixels[(y0 + dy) * side + x0 + dx];
        }
    }
    normalize_in_place(dst);
}

/// Samples the region described by `state` into an `out_side` × `out_side` crop.
///
/// Crop pixel `(cx, cy)` sits at canonical coordinates
/// `((cx + ½)/out_side − ½, (cy + ½)/out_side − ½)` inside the unit square,
/// which is mapped to the frame by [`AffineState::apply`]. Frame pixels are unit
/// cells with centers at half-integer coordinates; sampling is bilinear and
/// reads 0 outside the frame.
pub fn warp_crop(frame: &GrayImage, state: &AffineState, out_side: usize) -> Result<GrayImage> {
    state.validate()?;
    if out_side == 0 {
        return Err(Error::Config("crop side must be at least 1".into()));
    }
    let map = state.matrix();
    let inv = 1.0 / out_side as f64;
    let mut data = Vec::with_capacity(out_side * out_side);
    for cy in 0..out_side {
        let v = (cy as f64 + 0.5) * inv - 0.5;
        for cx in 0..out_side {
            let u = (cx as f64 + 0.5) * inv - 0.5;
            let (fx, fy) = map.apply(u, v);
            data.push(sample_bilinear(frame, fx - 0.5, fy - 0.5));
        }
    }
    Ok(GrayImage::from_fn(out_side, out_side, |x, y| {
        data[y * out_side + x]
    }))
}

/// Bilinear sample at pixel-center coordinates `(px, py)`.
#[inline]
pub(crate) fn sample_bilinear(frame: &GrayImage, px: f64, py: f64) -> f64 {
    let x0 = px.floor();
    let y0 = py.floor();
    let ax = px - x0;
    let ay = py - y0;
    let (xi, yi) = (x0 as isize, y0 as isize);
    let w = frame.width() as isize;
    let h = frame.height() as isize;
    if xi >= 0 && yi >= 0 && xi + 1 < w && yi + 1 < h {
        let stride = frame.width();
        let base = yi as usize * stride + xi as usize;
        let d = frame.data();
        let top = d[base] * (1.0 - ax) + d[base + 1] * ax;
        let bottom = d[base + stride] * (1.0 - ax) + d[base + stride + 1] * ax;
        return top * (1.0 - ay) + bottom * ay;
    }
    let p00 = frame.get_or_zero(xi, yi);
    let p10 = frame.get_or_zero(xi + 1, yi);
    let p01 = frame.get_or_zero(xi, yi + 1);
    let p11 = frame.get_or_zero(xi + 1, yi + 1);
    (p00 * (1.0 - ax) + p10 * ax) * (1.0 - ay) + (p01 * (1.0 - ax) + p11 * ax) * ay
}
