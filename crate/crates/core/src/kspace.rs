//! Multi-coil k-space data model and the centered orthonormal 2-D Fourier
//! transform pair.
//!
//! Conventions: DC sits at `(H/2, W/2)` (integer division) and both transforms
//! carry a `1/sqrt(H*W)` factor, so `fft2c` is unitary.

use std::cell::RefCell;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Smallest admissible grid side.
pub const MIN_SIDE: usize = 4;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn check_finite<'a>(mut it: impl Iterator<Item = &'a Complex64>) -> Result<()> {
    if it.all(|c| c.re.is_finite() && c.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::param("grid contains NaN or infinite entries"))
    }
}

fn check_side(h: usize, w: usize) -> Result<()> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::param(format!(
            "grid {h}x{w} is smaller than the minimum {MIN_SIDE}x{MIN_SIDE}"
        )));
    }
    Ok(())
}

/// A single complex 2-D grid, in either image or k-space domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    data: Array2<Complex64>,
}

impl ComplexImage {
    pub fn new(data: Array2<Complex64>) -> Result<Self> {
        let (h, w) = data.dim();
        check_side(h, w)?;
        check_finite(data.iter())?;
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Self::new(Array2::zeros((h, w)))
    }

    /// Wraps a real-valued grid.
    pub fn from_real(real: &Array2<f64>) -> Result<Self> {
        Self::new(real.mapv(|v| Complex64::new(v, 0.0)))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<Complex64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Complex k-space for `C` receive coils, stored `[C, H, W]` with the coil
/// axis slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCoilKSpace {
    data: Array3<Complex64>,
}

impl MultiCoilKSpace {
    pub fn new(data: Array3<Complex64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 {
            return Err(Error::param("k-space must have at least one coil"));
        }
        check_side(h, w)?;
        check_finite(data.iter())?;
        Ok(Self { data })
    }

    pub fn zeros(coils: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(Array3::zeros((coils, h, w)))
    }

    pub fn from_coils(coils: &[ComplexImage]) -> Result<Self> {
        let first = coils
            .first()
            .ok_or_else(|| Error::param("k-space must have at least one coil"))?;
        let (h, w) = first.shape();
        let mut data = Array3::zeros((coils.len(), h, w));
        for (c, img) in coils.iter().enumerate() {
            if img.shape() != (h, w) {
                return Err(Error::shape((h, w), img.shape()));
            }
            data.index_axis_mut(Axis(0), c).assign(img.data());
        }
        Ok(Self { data })
    }

    pub fn coils(&self) -> usize {
        self.data.dim().0
    }

    /// `(C, H, W)`
    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    /// Mutable access to the raw grid. Callers must keep every entry finite.
    pub fn data_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array3<Complex64> {
        self.data
    }

    pub fn coil(&self, c: usize) -> ArrayView2<'_, Complex64> {
        self.data.index_axis(Axis(0), c)
    }

    pub fn coil_image(&self, c: usize) -> ComplexImage {
        ComplexImage {
            data: self.coil(c).to_owned(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Adds i.i.d. circular complex Gaussian noise; `std` is the per-component
    /// standard deviation.
    pub fn with_noise<R: Rng + ?Sized>(&self, std: f64, rng: &mut R) -> Result<Self> {
        if !(std >= 0.0 && std.is_finite()) {
            return Err(Error::param(format!("noise std must be >= 0, got {std}")));
        }
        let mut data = self.data.clone();
        for v in data.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *v += Complex64::new(re, im) * std;
        }
        Ok(Self { data })
    }
}

/// Binary undersampling pattern. `true` marks an acquired sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingMask {
    entries: Array2<bool>,
    sampled: usize,
}

impl SamplingMask {
    /// Builds a mask with at least one sampled entry.
    pub fn new(entries: Array2<bool>) -> Result<Self> {
        let sampled = entries.iter().filter(|&&b| b).count();
        if sampled == 0 {
            return Err(Error::param("sampling mask has no sampled entries"));
        }
        Ok(Self { entries, sampled })
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self {
            entries: Array2::from_elem((h, w), true),
            sampled: h * w,
        }
    }

    /// A mask with no acquired samples. Only meaningful for unconditional
    /// generation; [`acceleration_factor`](crate::masks::acceleration_factor)
    /// rejects it.
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            entries: Array2::from_elem((h, w), false),
            sampled: 0,
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        Self::new(Array2::from_shape_fn((h, w), |(i, j)| f(i, j)))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.dim()
    }

    pub fn entries(&self) -> &Array2<bool> {
        &self.entries
    }

    pub fn is_sampled(&self, i: usize, j: usize) -> bool {
        self.entries[[i, j]]
    }

    pub fn sampled_count(&self) -> usize {
        self.sampled
    }

    pub fn is_empty(&self) -> bool {
        self.sampled == 0
    }
}

fn fft2_centered(input: &Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let (h, w) = input.dim();
    // ifftshift on the way in: index H/2 lands on 0.
    let mut rows = vec![Complex64::new(0.0, 0.0); h * w];
    for i in 0..h {
        let si = (i + h / 2) % h;
        for j in 0..w {
            let sj = (j + w / 2) % w;
            rows[i * w + j] = input[[si, sj]];
        }
    }

    let mut cols = vec![Complex64::new(0.0, 0.0); h * w];
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let (row_plan, col_plan) = if inverse {
            (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
        } else {
            (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
        };
        row_plan.process(&mut rows);
        for i in 0..h {
            for j in 0..w {
                cols[j * h + i] = rows[i * w + j];
            }
        }
        col_plan.process(&mut cols);
    });

    // fftshift on the way out: index 0 lands on H/2.
    let scale = 1.0 / ((h * w) as f64).sqrt();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let si = (i + h - h / 2) % h;
        let sj = (j + w - w / 2) % w;
        cols[sj * h + si] * scale
    })
}

/// Centered orthonormal forward 2-D DFT.
pub fn fft2c(image: &ComplexImage) -> ComplexImage {
    ComplexImage {
        data: fft2_centered(&image.data, false),
    }
}

/// Centered orthonormal inverse 2-D DFT.
pub fn ifft2c(kspace: &ComplexImage) -> ComplexImage {
    ComplexImage {
        data: fft2_centered(&kspace.data, true),
    }
}

/// Forward transform applied to every coil plane.
pub fn fft2c_coils(images: &MultiCoilKSpace) -> MultiCoilKSpace {
    map_coils(images, false)
}

/// Inverse transform applied to every coil plane.
pub fn ifft2c_coils(kspace: &MultiCoilKSpace) -> MultiCoilKSpace {
    map_coils(kspace, true)
}

fn map_coils(src: &MultiCoilKSpace, inverse: bool) -> MultiCoilKSpace {
    let mut data = Array3::zeros(src.dim());
    for (c, plane) in src.data.outer_iter().enumerate() {
        let out = fft2_centered(&plane.to_owned(), inverse);
        data.index_axis_mut(Axis(0), c).assign(&out);
    }
    MultiCoilKSpace { data }
}

fn check_mask_shape(k: &MultiCoilKSpace, m: &SamplingMask) -> Result<()> {
    if k.grid_shape() != m.shape() {
        return Err(Error::shape(k.dim(), m.shape()));
    }
    Ok(())
}

/// `y_c = M k_c`: zero every unsampled entry of every coil.
pub fn apply_mask(k: &MultiCoilKSpace, m: &SamplingMask) -> Result<MultiCoilKSpace> {
    check_mask_shape(k, m)?;
    let mut data = k.data.clone();
    for mut plane in data.outer_iter_mut() {
        ndarray::Zip::from(&mut plane).and(&m.entries).for_each(|v, &s| {
            if !s {
                *v = Complex64::new(0.0, 0.0);
            }
        });
    }
    Ok(MultiCoilKSpace { data })
}

/// Root-sum-of-squares coil combination of the inverse-transformed coils.
pub fn sos_combine(k: &MultiCoilKSpace) -> Array2<f64> {
    let images = ifft2c_coils(k);
    let mut acc = Array2::<f64>::zeros(k.grid_shape());
    for plane in images.data.outer_iter() {
        ndarray::Zip::from(&mut acc)
            .and(&plane)
            .for_each(|a, v| *a += v.norm_sqr());
    }
    acc.mapv_inplace(f64::sqrt);
    acc
}

/// Zero-filled baseline: SOS image of the masked k-space.
pub fn zero_filled_recon(y: &MultiCoilKSpace, m: &SamplingMask) -> Result<Array2<f64>> {
    Ok(sos_combine(&apply_mask(y, m)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexImage::new(Array2::from_shape_fn((h, w), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        }))
        .unwrap()
    }

    /// Direct O(N^2) centered orthonormal DFT.
    fn brute_dft(x: &Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
        let (h, w) = x.dim();
        let sign = if inverse { 1.0 } else { -1.0 };
        let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
        let scale = 1.0 / ((h * w) as f64).sqrt();
        Array2::from_shape_fn((h, w), |(u, v)| {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let phase = sign
                        * 2.0
                        * PI
                        * ((u as f64 - ch) * (i as f64 - ch) / h as f64 + (v as f64 - cw) * (j as f64 - cw) / w as f64);
                    acc += x[[i, j]] * Complex64::from_polar(1.0, phase);
                }
            }
            acc * scale
        })
    }

    fn max_diff(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn constant_image_has_single_dc_coefficient() {
        let img = ComplexImage::from_real(&Array2::ones((4, 4))).unwrap();
        let k = fft2c(&img);
        for ((i, j), v) in k.data().indexed_iter() {
            let expected = if (i, j) == (2, 2) { 4.0 } else { 0.0 };
            assert!((v - Complex64::new(expected, 0.0)).norm() < 1e-12, "({i},{j}) = {v}");
        }
    }

    #[test]
    fn centered_spike_inverts_to_constant_quarter() {
        let mut k = Array2::zeros((4, 4));
        k[[2, 2]] = Complex64::new(1.0, 0.0);
        let brute = brute_dft(&k, true);
        let img = ifft2c(&ComplexImage::new(k).unwrap());
        assert!(max_diff(img.data(), &brute) < 1e-12);
        for v in img.data() {
            assert!((v - Complex64::new(0.25, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_dft_on_odd_and_even_sizes() {
        for &(h, w) in &[(4, 4), (5, 7), (6, 9), (8, 5)] {
            let x = random_image(h, w, (h * 31 + w) as u64);
            let fast = fft2c(&x);
            assert!(max_diff(fast.data(), &brute_dft(x.data(), false)) < 1e-10);
            let fast_inv = ifft2c(&x);
            assert!(max_diff(fast_inv.data(), &brute_dft(x.data(), true)) < 1e-10);
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let x = random_image(16, 12, 7);
        let k = fft2c(&x);
        assert!(((k.norm() / x.norm()) - 1.0).abs() < 1e-12);
        let back = ifft2c(&k);
        assert!(max_diff(back.data(), x.data()) / x.norm() < 1e-12);
        let again = fft2c(&ifft2c(&x));
        assert!(max_diff(again.data(), x.data()) / x.norm() < 1e-12);
    }

    #[test]
    fn inverse_is_linear() {
        let a = random_image(8, 8, 1);
        let b = random_image(8, 8, 2);
        let (ca, cb) = (Complex64::new(0.5, -1.5), Complex64::new(2.0, 0.25));
        let combo = ComplexImage::new(a.data().mapv(|v| v * ca) + b.data().mapv(|v| v * cb)).unwrap();
        let lhs = ifft2c(&combo);
        let rhs = ifft2c(&a).data().mapv(|v| v * ca) + ifft2c(&b).data().mapv(|v| v * cb);
        assert!(max_diff(lhs.data(), &rhs) < 1e-12);
    }

    #[test]
    fn rejects_small_or_nonfinite_grids() {
        assert!(ComplexImage::zeros(3, 8).is_err());
        let mut bad = Array2::zeros((4, 4));
        bad[[1, 1]] = Complex64::new(f64::NAN, 0.0);
        assert!(ComplexImage::new(bad).is_err());
        assert!(MultiCoilKSpace::zeros(0, 4, 4).is_err());
    }

    fn random_kspace(c: usize, h: usize, w: usize, seed: u64) -> MultiCoilKSpace {
        let coils: Vec<_> = (0..c).map(|i| random_image(h, w, seed + i as u64)).collect();
        MultiCoilKSpace::from_coils(&coils).unwrap()
    }

    #[test]
    fn mask_identity_single_sample_and_idempotence() {
        let k = random_kspace(3, 6, 6, 10);
        let full = SamplingMask::full(6, 6);
        assert_eq!(apply_mask(&k, &full).unwrap(), k);

        let one = SamplingMask::from_fn(6, 6, |i, j| i == 1 && j == 4).unwrap();
        let y = apply_mask(&k, &one).unwrap();
        for c in 0..3 {
            let nonzero: Vec<_> = y
                .coil(c)
                .indexed_iter()
                .filter(|(_, v)| v.norm() > 0.0)
                .map(|(ix, _)| ix)
                .collect();
            assert_eq!(nonzero, vec![(1, 4)]);
            assert_eq!(y.coil(c)[[1, 4]], k.coil(c)[[1, 4]]);
        }

        let m = SamplingMask::from_fn(6, 6, |i, j| (i + 2 * j) % 3 == 0).unwrap();
        let once = apply_mask(&k, &m).unwrap();
        assert_eq!(apply_mask(&once, &m).unwrap(), once);
        assert!(once.norm() <= k.norm());
    }

    #[test]
    fn mask_shape_mismatch_is_an_error() {
        let k = random_kspace(1, 6, 6, 3);
        assert!(matches!(
            apply_mask(&k, &SamplingMask::full(6, 8)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn empty_mask_only_through_explicit_constructor() {
        assert!(SamplingMask::new(Array2::from_elem((4, 4), false)).is_err());
        assert!(SamplingMask::empty(4, 4).is_empty());
    }

    #[test]
    fn sos_single_coil_is_magnitude() {
        let k = random_kspace(1, 8, 8, 4);
        let sos = sos_combine(&k);
        let img = ifft2c(&k.coil_image(0));
        for (s, v) in sos.iter().zip(img.data().iter()) {
            assert!((s - v.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn sos_of_duplicated_coil_scales_by_sqrt2() {
        let single = random_image(8, 8, 5);
        let k1 = MultiCoilKSpace::from_coils(std::slice::from_ref(&single)).unwrap();
        let k2 = MultiCoilKSpace::from_coils(&[single.clone(), single]).unwrap();
        let (a, b) = (sos_combine(&k1), sos_combine(&k2));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((y - x * 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn sos_matches_per_pixel_formula() {
        let k = random_kspace(2, 6, 8, 6);
        let sos = sos_combine(&k);
        let i0 = brute_dft(&k.coil(0).to_owned(), true);
        let i1 = brute_dft(&k.coil(1).to_owned(), true);
        for ((ix, s), (a, b)) in sos.indexed_iter().zip(i0.iter().zip(i1.iter())) {
            let expected = (a.norm_sqr() + b.norm_sqr()).sqrt();
            assert!((s - expected).abs() < 1e-10, "{ix:?}");
        }
    }

    #[test]
    fn zero_filled_with_full_mask_equals_sos() {
        let k = random_kspace(2, 8, 8, 11);
        let zf = zero_filled_recon(&k, &SamplingMask::full(8, 8)).unwrap();
        assert_eq!(zf, sos_combine(&k));
        assert_eq!(zf, zero_filled_recon(&k, &SamplingMask::full(8, 8)).unwrap());
    }

    #[test]
    fn noise_injection_has_requested_spread() {
        let k = MultiCoilKSpace::zeros(1, 64, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noisy = k.with_noise(0.5, &mut rng).unwrap();
        let n = (64 * 64 * 2) as f64;
        let var = noisy.data().iter().map(|c| c.re * c.re + c.im * c.im).sum::<f64>() / n;
        assert!((var - 0.25).abs() < 0.02, "{var}");
        assert!(k.with_noise(-1.0, &mut rng).is_err());
    }
}
