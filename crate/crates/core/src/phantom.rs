//! Synthetic ground truth: jittered Shepp-Logan-style ellipse phantoms seen
//! through smooth coil profiles, and multi-coil sums of complex exponentials
//! whose block-Hankel lift has a known rank.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kspace::{fft2c_coils, sos_combine, MultiCoilKSpace, MIN_SIDE};

/// Window used to bound the component count of exponential phantoms.
const REFERENCE_WINDOW: usize = 6;
/// Sub-pixel samples per axis when rasterising ellipses.
const SUPERSAMPLE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomKind {
    Ellipses,
    Exponentials,
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhantomKind::Ellipses => "ellipses",
            PhantomKind::Exponentials => "exponentials",
        })
    }
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipses" => Ok(PhantomKind::Ellipses),
            "exponentials" => Ok(PhantomKind::Exponentials),
            other => Err(Error::param(format!("unknown phantom kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub size: (usize, usize),
    pub coils: usize,
    pub seed: u64,
    /// Number of complex exponentials (exponential phantoms only).
    pub components: usize,
}

impl PhantomSpec {
    pub fn ellipses(size: (usize, usize), coils: usize, seed: u64) -> Self {
        Self {
            kind: PhantomKind::Ellipses,
            size,
            coils,
            seed,
            components: 0,
        }
    }

    pub fn exponentials(size: (usize, usize), coils: usize, components: usize, seed: u64) -> Self {
        Self {
            kind: PhantomKind::Exponentials,
            size,
            coils,
            seed,
            components,
        }
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::param(format!("phantom size {h}x{w} is too small")));
        }
        if self.coils == 0 {
            return Err(Error::param("phantom needs at least one coil"));
        }
        if self.kind == PhantomKind::Exponentials {
            let win = REFERENCE_WINDOW.min(h).min(w);
            let rows = (h - win + 1) * (w - win + 1);
            let min_dim = rows.min(self.coils * win * win);
            if self.components == 0 || self.components * self.coils > min_dim {
                return Err(Error::param(format!(
                    "{} components x {} coils does not fit a Hankel lift of min dimension {min_dim}",
                    self.components, self.coils
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    /// Ground-truth magnitude image (SOS of the coil images).
    pub image: Array2<f64>,
    pub kspace: MultiCoilKSpace,
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        PhantomKind::Ellipses => ellipse_phantom(spec, &mut rng),
        PhantomKind::Exponentials => exponential_phantom(spec, &mut rng),
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    value: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    theta_deg: f64,
}

// Modified Shepp-Logan table (Toft): intensity, semi-axes, center, angle.
const SHEPP_LOGAN: [Ellipse; 10] = [
    Ellipse {
        value: 1.0,
        a: 0.69,
        b: 0.92,
        x0: 0.0,
        y0: 0.0,
        theta_deg: 0.0,
    },
    Ellipse {
        value: -0.8,
        a: 0.6624,
        b: 0.874,
        x0: 0.0,
        y0: -0.0184,
        theta_deg: 0.0,
    },
    Ellipse {
        value: -0.2,
        a: 0.11,
        b: 0.31,
        x0: 0.22,
        y0: 0.0,
        theta_deg: -18.0,
    },
    Ellipse {
        value: -0.2,
        a: 0.16,
        b: 0.41,
        x0: -0.22,
        y0: 0.0,
        theta_deg: 18.0,
    },
    Ellipse {
        value: 0.1,
        a: 0.21,
        b: 0.25,
        x0: 0.0,
        y0: 0.35,
        theta_deg: 0.0,
    },
    Ellipse {
        value: 0.1,
        a: 0.046,
        b: 0.046,
        x0: 0.0,
        y0: 0.1,
        theta_deg: 0.0,
    },
    Ellipse {
        value: 0.1,
        a: 0.046,
        b: 0.046,
        x0: 0.0,
        y0: -0.1,
        theta_deg: 0.0,
    },
    Ellipse {
        value: 0.1,
        a: 0.046,
        b: 0.023,
        x0: -0.08,
        y0: -0.605,
        theta_deg: 0.0,
    },
    Ellipse {
        value: 0.1,
        a: 0.023,
        b: 0.023,
        x0: 0.0,
        y0: -0.606,
        theta_deg: 0.0,
    },
    Ellipse {
        value: 0.1,
        a: 0.023,
        b: 0.046,
        x0: 0.06,
        y0: -0.605,
        theta_deg: 0.0,
    },
];

fn jitter<R: Rng>(rng: &mut R, scale: f64) -> f64 {
    rng.random_range(-scale..=scale)
}

fn random_ellipses<R: Rng>(rng: &mut R) -> Vec<Ellipse> {
    // Shared skull/brain geometry moves together; inner structures jitter
    // independently.
    let (gx, gy) = (jitter(rng, 0.03), jitter(rng, 0.03));
    let gscale = 1.0 + jitter(rng, 0.05);
    SHEPP_LOGAN
        .iter()
        .enumerate()
        .map(|(idx, e)| {
            let mut e = *e;
            e.x0 = e.x0 * gscale + gx;
            e.y0 = e.y0 * gscale + gy;
            e.a *= gscale;
            e.b *= gscale;
            if idx >= 2 {
                e.x0 += jitter(rng, 0.03);
                e.y0 += jitter(rng, 0.03);
                e.a *= 1.0 + jitter(rng, 0.15);
                e.b *= 1.0 + jitter(rng, 0.15);
                e.theta_deg += jitter(rng, 10.0);
                e.value *= 1.0 + jitter(rng, 0.3);
            }
            e
        })
        .collect()
}

fn rasterize(ellipses: &[Ellipse], h: usize, w: usize) -> Array2<f64> {
    let n = SUPERSAMPLE;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc = 0.0;
        for si in 0..n {
            for sj in 0..n {
                // y runs top (+1) to bottom (-1), x left (-1) to right (+1)
                let y = 1.0 - 2.0 * (i as f64 + (si as f64 + 0.5) / n as f64) / h as f64;
                let x = -1.0 + 2.0 * (j as f64 + (sj as f64 + 0.5) / n as f64) / w as f64;
                for e in ellipses {
                    let (s, c) = e.theta_deg.to_radians().sin_cos();
                    let dx = x - e.x0;
                    let dy = y - e.y0;
                    let u = (dx * c + dy * s) / e.a;
                    let v = (-dx * s + dy * c) / e.b;
                    if u * u + v * v <= 1.0 {
                        acc += e.value;
                    }
                }
            }
        }
        (acc / (n * n) as f64).max(0.0)
    })
}

/// Smooth real coil profiles normalised so that `sum_c S_c^2 = 1` at every
/// pixel. Coils sit on a ring around the field of view with broad Gaussian
/// falloff.
pub fn coil_profiles(coils: usize, h: usize, w: usize) -> Array3<f64> {
    let mut prof = Array3::<f64>::zeros((coils, h, w));
    if coils == 1 {
        prof.fill(1.0);
        return prof;
    }
    let ring = 1.5;
    let width = 1.2;
    for c in 0..coils {
        let ang = 2.0 * PI * c as f64 / coils as f64 + PI / 4.0;
        let (px, py) = (ring * ang.cos(), ring * ang.sin());
        for i in 0..h {
            for j in 0..w {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / h as f64;
                let x = -1.0 + 2.0 * (j as f64 + 0.5) / w as f64;
                let d2 = (x - px).powi(2) + (y - py).powi(2);
                prof[[c, i, j]] = (-d2 / (2.0 * width * width)).exp();
            }
        }
    }
    let norm = prof.map_axis(Axis(0), |v| v.iter().map(|x| x * x).sum::<f64>().sqrt());
    for mut plane in prof.outer_iter_mut() {
        plane.zip_mut_with(&norm, |p, &n| *p /= n);
    }
    prof
}

fn ellipse_phantom(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Phantom> {
    let (h, w) = spec.size;
    let ellipses = random_ellipses(rng);
    let mut image = rasterize(&ellipses, h, w);
    let peak = image.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::param("ellipse phantom rasterised to an empty image"));
    }
    image.mapv_inplace(|v| v / peak);

    let profiles = coil_profiles(spec.coils, h, w);
    let mut coil_images = Array3::<Complex64>::zeros((spec.coils, h, w));
    for c in 0..spec.coils {
        for i in 0..h {
            for j in 0..w {
                coil_images[[c, i, j]] = Complex64::new(profiles[[c, i, j]] * image[[i, j]], 0.0);
            }
        }
    }
    let kspace = fft2c_coils(&MultiCoilKSpace::new(coil_images)?);
    Ok(Phantom { image, kspace })
}

fn exponential_phantom(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Phantom> {
    let (h, w) = spec.size;
    let m = spec.components;
    let freqs: Vec<(f64, f64)> = (0..m)
        .map(|_| (rng.random_range(-PI..PI), rng.random_range(-PI..PI)))
        .collect();
    let weights: Vec<Vec<Complex64>> = (0..spec.coils)
        .map(|_| {
            (0..m)
                .map(|_| Complex64::from_polar(rng.random_range(0.5..1.5), rng.random_range(-PI..PI)))
                .collect()
        })
        .collect();
    let data = Array3::from_shape_fn((spec.coils, h, w), |(c, i, j)| {
        freqs
            .iter()
            .zip(&weights[c])
            .map(|(&(wi, wj), &a)| a * Complex64::from_polar(1.0, wi * i as f64 + wj * j as f64))
            .sum::<Complex64>()
    });
    let kspace = MultiCoilKSpace::new(data)?;
    let image = sos_combine(&kspace);
    Ok(Phantom { image, kspace })
}
