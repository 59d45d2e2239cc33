//! Seeded undersampling pattern generators.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kspace::SamplingMask;

/// Relative tolerance on the achieved acceleration factor.
pub const ACCEL_TOLERANCE: f64 = 0.15;

/// Sampling densities at or above this are treated as full sampling.
const FULL_DENSITY: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPattern {
    /// Fully sampled rows (phase-encoding lines) chosen at random.
    Cartesian1d,
    UniformRandom2d,
    /// Variable-density Poisson disc: the exclusion radius grows with
    /// distance from DC.
    PoissonDisc2d,
}

impl MaskPattern {
    pub fn name(&self) -> &'static str {
        match self {
            MaskPattern::Cartesian1d => "cartesian1d",
            MaskPattern::UniformRandom2d => "uniform-random-2d",
            MaskPattern::PoissonDisc2d => "poisson-disc-2d",
        }
    }
}

impl fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartesian1d" => Ok(MaskPattern::Cartesian1d),
            "uniform-random-2d" => Ok(MaskPattern::UniformRandom2d),
            "poisson-disc-2d" | "poisson" => Ok(MaskPattern::PoissonDisc2d),
            other => Err(Error::param(format!("unknown mask pattern '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub pattern: MaskPattern,
    pub target_accel: f64,
    /// Central rows (cartesian1d) or side of the central square (2-D) that
    /// are always sampled.
    pub acs: usize,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(pattern: MaskPattern, target_accel: f64, acs: usize, seed: u64) -> Self {
        Self {
            pattern,
            target_accel,
            acs,
            seed,
        }
    }

    fn validate(&self, h: usize, w: usize) -> Result<()> {
        if !(self.target_accel > 1.0 && self.target_accel.is_finite()) {
            return Err(Error::param(format!(
                "target acceleration must be > 1, got {}",
                self.target_accel
            )));
        }
        let limit = match self.pattern {
            MaskPattern::Cartesian1d => h,
            _ => h.min(w),
        };
        if self.acs > limit {
            return Err(Error::param(format!(
                "ACS size {} does not fit in a {h}x{w} grid",
                self.acs
            )));
        }
        Ok(())
    }
}

/// `H*W / |Omega|`.
pub fn acceleration_factor(m: &SamplingMask) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::param("acceleration factor of an empty mask is undefined"));
    }
    let (h, w) = m.shape();
    Ok((h * w) as f64 / m.sampled_count() as f64)
}

/// Start index of a centered block of `len` cells on an axis of `n` cells,
/// placed so that it always covers the DC index `n / 2`.
fn centered_start(n: usize, len: usize) -> usize {
    (n / 2).saturating_sub(len / 2).min(n - len)
}

fn acs_square(h: usize, w: usize, side: usize) -> Array2<bool> {
    let mut m = Array2::from_elem((h, w), false);
    if side == 0 {
        return m;
    }
    let (r0, c0) = (centered_start(h, side), centered_start(w, side));
    for i in r0..r0 + side {
        for j in c0..c0 + side {
            m[[i, j]] = true;
        }
    }
    m
}

pub fn generate_mask(spec: &MaskSpec, shape: (usize, usize)) -> Result<SamplingMask> {
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return Err(Error::param("mask shape must be nonzero"));
    }
    spec.validate(h, w)?;
    if 1.0 / spec.target_accel >= FULL_DENSITY {
        return Ok(SamplingMask::full(h, w));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let entries = match spec.pattern {
        MaskPattern::Cartesian1d => cartesian_rows(spec, h, w, &mut rng)?,
        MaskPattern::UniformRandom2d => uniform_random(spec, h, w, &mut rng)?,
        MaskPattern::PoissonDisc2d => poisson_disc(spec, h, w, &mut rng)?,
    };
    let mask = SamplingMask::new(entries)?;

    let achieved = acceleration_factor(&mask)?;
    let rel = (achieved - spec.target_accel).abs() / spec.target_accel;
    if rel > ACCEL_TOLERANCE {
        return Err(Error::param(format!(
            "{} mask: achieved R = {achieved:.3} is outside ±{:.0}% of the requested R = {} \
             (ACS {} on {h}x{w})",
            spec.pattern,
            ACCEL_TOLERANCE * 100.0,
            spec.target_accel,
            spec.acs
        )));
    }
    Ok(mask)
}

fn cartesian_rows(spec: &MaskSpec, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Array2<bool>> {
    let target = ((h as f64 / spec.target_accel).round() as usize).max(1);
    let mut rows = vec![false; h];
    let start = centered_start(h, spec.acs);
    for r in rows.iter_mut().skip(start).take(spec.acs) {
        *r = true;
    }
    rows[h / 2] = true;
    let fixed = rows.iter().filter(|&&b| b).count();

    let mut free: Vec<usize> = (0..h).filter(|&i| !rows[i]).collect();
    free.shuffle(rng);
    for &i in free.iter().take(target.saturating_sub(fixed)) {
        rows[i] = true;
    }
    Ok(Array2::from_shape_fn((h, w), |(i, _)| rows[i]))
}

fn uniform_random(spec: &MaskSpec, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Array2<bool>> {
    let target = (((h * w) as f64 / spec.target_accel).round() as usize).max(1);
    let mut m = acs_square(h, w, spec.acs);
    m[[h / 2, w / 2]] = true;
    let fixed = m.iter().filter(|&&b| b).count();

    let mut free: Vec<(usize, usize)> = m.indexed_iter().filter(|(_, &b)| !b).map(|(ix, _)| ix).collect();
    free.shuffle(rng);
    for &ix in free.iter().take(target.saturating_sub(fixed)) {
        m[ix] = true;
    }
    Ok(m)
}

/// Exclusion radius profile of the variable-density Poisson disc:
/// `r(p) = r0 * (1 + rho(p))`, with `rho` the distance from DC normalised by
/// the half-diagonal of the grid.
#[derive(Debug, Clone, Copy)]
pub struct PoissonRadius {
    pub r0: f64,
    h: usize,
    w: usize,
}

impl PoissonRadius {
    pub fn new(r0: f64, h: usize, w: usize) -> Self {
        Self { r0, h, w }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        let di = i as f64 - (self.h / 2) as f64;
        let dj = j as f64 - (self.w / 2) as f64;
        let half_diag = 0.5 * ((self.h * self.h + self.w * self.w) as f64).sqrt();
        self.r0 * (1.0 + (di * di + dj * dj).sqrt() / half_diag)
    }

    pub fn max(&self) -> f64 {
        2.0 * self.r0
    }
}

/// Random sequential dart throwing over the cells in `order`: a cell is kept
/// unless an already kept non-ACS point lies strictly closer than the radius
/// at the candidate. Rejection scans only the bounding box of the radius.
fn throw_darts(base: &Array2<bool>, order: &[(usize, usize)], radius: &PoissonRadius) -> Array2<bool> {
    let (h, w) = base.dim();
    let mut kept = Array2::from_elem((h, w), false);
    let reach = radius.max().ceil() as isize;
    for &(i, j) in order {
        let r = radius.at(i, j);
        let r2 = r * r;
        let mut ok = true;
        'scan: for di in -reach..=reach {
            let ii = i as isize + di;
            if ii < 0 || ii >= h as isize {
                continue;
            }
            for dj in -reach..=reach {
                let jj = j as isize + dj;
                if jj < 0 || jj >= w as isize {
                    continue;
                }
                if kept[[ii as usize, jj as usize]] && ((di * di + dj * dj) as f64) < r2 {
                    ok = false;
                    break 'scan;
                }
            }
        }
        if ok {
            kept[[i, j]] = true;
        }
    }
    let mut out = base.clone();
    out.zip_mut_with(&kept, |o, &k| *o |= k);
    out
}

fn poisson_disc(spec: &MaskSpec, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Array2<bool>> {
    let (mask, _) = poisson_disc_with_radius(spec, h, w, rng)?;
    Ok(mask)
}

/// Poisson-disc generation that also reports the radius profile used, so
/// callers can verify the minimum-distance property.
pub fn poisson_disc_mask(spec: &MaskSpec, shape: (usize, usize)) -> Result<(SamplingMask, PoissonRadius)> {
    let (h, w) = shape;
    spec.validate(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (entries, radius) = poisson_disc_with_radius(spec, h, w, &mut rng)?;
    Ok((SamplingMask::new(entries)?, radius))
}

fn poisson_disc_with_radius(
    spec: &MaskSpec,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<bool>, PoissonRadius)> {
    let target = ((h * w) as f64 / spec.target_accel).round() as usize;
    let mut base = acs_square(h, w, spec.acs);
    base[[h / 2, w / 2]] = true;
    if base.iter().filter(|&&b| b).count() > target {
        return Err(Error::param(format!(
            "ACS region of side {} already exceeds the sample budget for R = {}",
            spec.acs, spec.target_accel
        )));
    }

    let mut order: Vec<(usize, usize)> = base.indexed_iter().filter(|(_, &b)| !b).map(|(ix, _)| ix).collect();
    order.shuffle(rng);

    let count = |r0: f64| {
        let radius = PoissonRadius::new(r0, h, w);
        let m = throw_darts(&base, &order, &radius);
        (m.iter().filter(|&&b| b).count(), m, radius)
    };

    // Sample count is non-increasing in r0 for practical purposes; bisect on
    // it and keep the closest candidate seen.
    let (mut lo, mut hi) = (0.5f64, (h.max(w)) as f64);
    let mut best = count(lo);
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        let cand = count(mid);
        let too_many = cand.0 > target;
        if cand.0.abs_diff(target) < best.0.abs_diff(target) {
            best = cand;
        }
        if too_many {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((best.1, best.2))
}
