//! Block-Hankel lifting of multi-coil k-space and the rank-truncation
//! projection built on it (SAKE).
//!
//! Each row of the lifted matrix is one `window x window` neighbourhood,
//! taken across all coils. Rows follow window position (row-major); columns
//! follow `(coil, offset)` with the coil slowest and the in-window offset
//! row-major.

use nalgebra::DMatrix;
use ndarray::Array3;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kspace::MultiCoilKSpace;

pub use crate::sampler::reconstruct_svd_wkgm;

pub const DEFAULT_WINDOW: usize = 6;

pub type HankelMatrix = DMatrix<Complex64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HankelSpec {
    pub window: usize,
    pub rank: usize,
}

impl HankelSpec {
    pub fn new(window: usize, rank: usize) -> Self {
        Self { window, rank }
    }

    /// `rank = max(1, C * window^2 / 2)`.
    pub fn with_default_rank(window: usize, coils: usize) -> Self {
        Self {
            window,
            rank: (coils * window * window / 2).max(1),
        }
    }

    /// `(rows, cols)` of the lift for a `[C, H, W]` grid.
    pub fn matrix_dims(&self, shape: (usize, usize, usize)) -> (usize, usize) {
        let (c, h, w) = shape;
        (
            (h + 1 - self.window) * (w + 1 - self.window),
            c * self.window * self.window,
        )
    }

    pub fn validate(&self, shape: (usize, usize, usize)) -> Result<()> {
        let (_, h, w) = shape;
        if self.window == 0 || self.window > h.min(w) {
            return Err(Error::param(format!(
                "Hankel window {} does not fit a {h}x{w} grid",
                self.window
            )));
        }
        let (rows, cols) = self.matrix_dims(shape);
        if self.rank == 0 || self.rank > rows.min(cols) {
            return Err(Error::param(format!(
                "Hankel rank {} outside [1, {}] for a {rows}x{cols} lift",
                self.rank,
                rows.min(cols)
            )));
        }
        Ok(())
    }
}

pub fn hankel_forward(k: &MultiCoilKSpace, spec: &HankelSpec) -> Result<HankelMatrix> {
    let (c, h, w) = k.dim();
    if spec.window == 0 || spec.window > h.min(w) {
        return Err(Error::param(format!(
            "Hankel window {} does not fit a {h}x{w} grid",
            spec.window
        )));
    }
    let win = spec.window;
    let (pr, pc) = (h + 1 - win, w + 1 - win);
    let (rows, cols) = spec.matrix_dims((c, h, w));
    let data = k.data();
    Ok(DMatrix::from_fn(rows, cols, |row, col| {
        let (pi, pj) = (row / pc, row % pc);
        let coil = col / (win * win);
        let off = col % (win * win);
        let (oi, oj) = (off / win, off % win);
        debug_assert!(pi < pr);
        data[[coil, pi + oi, pj + oj]]
    }))
}

/// Number of lifted cells that reference grid index `i` along an axis of
/// length `n`.
fn overlap_count(i: usize, n: usize, win: usize) -> usize {
    let positions = n + 1 - win;
    let lo = i.saturating_sub(win - 1);
    let hi = i.min(positions - 1);
    hi + 1 - lo
}

/// Adjoint of the lift: sums every cell back onto the grid entry it was
/// copied from.
pub fn hankel_adjoint(a: &HankelMatrix, spec: &HankelSpec, shape: (usize, usize, usize)) -> Result<Array3<Complex64>> {
    let (c, h, w) = shape;
    let win = spec.window;
    if win == 0 || win > h.min(w) {
        return Err(Error::param(format!("Hankel window {win} does not fit a {h}x{w} grid")));
    }
    let (rows, cols) = spec.matrix_dims(shape);
    if a.shape() != (rows, cols) {
        return Err(Error::shape(a.shape(), (rows, cols)));
    }
    let pc = w + 1 - win;
    let mut out = Array3::<Complex64>::zeros(shape);
    for col in 0..cols {
        let coil = col / (win * win);
        let off = col % (win * win);
        let (oi, oj) = (off / win, off % win);
        let column = a.column(col);
        for (row, v) in column.iter().enumerate() {
            let (pi, pj) = (row / pc, row % pc);
            out[[coil, pi + oi, pj + oj]] += *v;
        }
    }
    debug_assert_eq!(out.dim().0, c);
    Ok(out)
}

/// Pseudo-inverse of the lift: every grid entry becomes the average of the
/// cells that reference it.
pub fn hankel_pinv(a: &HankelMatrix, spec: &HankelSpec, shape: (usize, usize, usize)) -> Result<MultiCoilKSpace> {
    let (_, h, w) = shape;
    let mut out = hankel_adjoint(a, spec, shape)?;
    for mut plane in out.outer_iter_mut() {
        for ((i, j), v) in plane.indexed_iter_mut() {
            let n = overlap_count(i, h, spec.window) * overlap_count(j, w, spec.window);
            *v /= n as f64;
        }
    }
    MultiCoilKSpace::new(out)
}

/// Singular values in descending order.
pub fn singular_values(a: &HankelMatrix) -> Vec<f64> {
    let mut s: Vec<f64> = a.clone().singular_values().iter().cloned().collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// Best rank-`rank` approximation: keeps the `rank` largest singular values
/// and zeroes the rest. A rank at or above the smallest dimension returns
/// the input unchanged.
pub fn svd_hard_threshold(a: &HankelMatrix, rank: usize) -> HankelMatrix {
    let (m, n) = a.shape();
    if rank >= m.min(n) {
        return a.clone();
    }
    if rank == 0 {
        return DMatrix::zeros(m, n);
    }
    // Projecting the rows onto the leading right singular subspace,
    // A V_r V_r^H = U_r S_r V_r^H, needs only V.
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| {
        svd.singular_values[y]
            .partial_cmp(&svd.singular_values[x])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut vr_h = DMatrix::<Complex64>::zeros(rank, n);
    for (dst, &src) in order.iter().take(rank).enumerate() {
        vr_h.row_mut(dst).copy_from(&v_t.row(src));
    }
    let coeffs = a * vr_h.adjoint();
    coeffs * vr_h
}

/// `H^+( G_rank( H(k) ) )`, applied jointly across coils.
pub fn sake_project(k: &MultiCoilKSpace, spec: &HankelSpec) -> Result<MultiCoilKSpace> {
    spec.validate(k.dim())?;
    let lifted = hankel_forward(k, spec)?;
    let truncated = svd_hard_threshold(&lifted, spec.rank);
    hankel_pinv(&truncated, spec, k.dim())
}
