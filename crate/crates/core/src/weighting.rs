//! Radial k-space weighting `w = (r (u^2 + v^2))^p` that suppresses low
//! frequencies, together with its exact inverse.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::kspace::MultiCoilKSpace;

pub const DEFAULT_WEIGHT_R: f64 = 0.02;
pub const DEFAULT_WEIGHT_P: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    values: Array2<f64>,
    r: f64,
    p: f64,
}

impl WeightMap {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// The all-ones map (`p = 0`).
    pub fn identity(shape: (usize, usize)) -> Self {
        Self {
            values: Array2::ones(shape),
            r: 1.0,
            p: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.values.iter().all(|&v| v == 1.0)
    }
}

/// Builds the weight map with `u`, `v` the integer offsets from DC at
/// `(H/2, W/2)`. The DC entry, which would be zero for `p > 0`, takes the
/// radius-one value `r^p`.
pub fn build_weight(shape: (usize, usize), r: f64, p: f64) -> Result<WeightMap> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::param(format!("weight cutoff r must be > 0, got {r}")));
    }
    if !(p >= 0.0 && p.is_finite()) {
        return Err(Error::param(format!("weight smoothness p must be >= 0, got {p}")));
    }
    let (h, w) = shape;
    let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
    let values = Array2::from_shape_fn(shape, |(i, j)| {
        let u = i as f64 - ch;
        let v = j as f64 - cw;
        let rad2 = (u * u + v * v).max(1.0);
        (r * rad2).powf(p)
    });
    if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::param(format!(
            "weight map with r = {r}, p = {p} is not strictly positive and finite"
        )));
    }
    Ok(WeightMap { values, r, p })
}

fn check_shape(k: &MultiCoilKSpace, w: &WeightMap) -> Result<()> {
    if k.grid_shape() != w.shape() {
        return Err(Error::shape(k.dim(), w.shape()));
    }
    Ok(())
}

/// `k_w = w * k`, per coil.
pub fn apply_weight(k: &MultiCoilKSpace, w: &WeightMap) -> Result<MultiCoilKSpace> {
    check_shape(k, w)?;
    let mut data = k.data().clone();
    for mut plane in data.axis_iter_mut(Axis(0)) {
        plane.zip_mut_with(&w.values, |v, &s| *v *= s);
    }
    MultiCoilKSpace::new(data)
}

/// `k = k_w / w`, per coil.
pub fn remove_weight(kw: &MultiCoilKSpace, w: &WeightMap) -> Result<MultiCoilKSpace> {
    check_shape(kw, w)?;
    if w.values.iter().any(|&v| v <= 0.0) {
        return Err(Error::param("cannot remove a weight map with nonpositive entries"));
    }
    let mut data = kw.data().clone();
    for mut plane in data.axis_iter_mut(Axis(0)) {
        plane.zip_mut_with(&w.values, |v, &s| *v /= s);
    }
    MultiCoilKSpace::new(data)
}

/// Spread of entry magnitudes: `max |k| - min |k|` over all coils.
pub fn dynamic_range(k: &MultiCoilKSpace) -> f64 {
    let (lo, hi) = k
        .data()
        .iter()
        .map(|c| c.norm())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| (lo.min(m), hi.max(m)));
    hi - lo
}
