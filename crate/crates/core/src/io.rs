//! Binary containers for k-space (`.wksp`), masks (`.wmsk`) and real images
//! (`.img`), plus a 16-bit PGM preview writer.
//!
//! All integers and floats are little-endian. Complex values are stored as
//! interleaved float32 `(re, im)` pairs, row-major, coil slowest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kspace::{MultiCoilKSpace, SamplingMask};

pub const KSPACE_MAGIC: &[u8; 4] = b"WKSP";
pub const MASK_MAGIC: &[u8; 4] = b"WMSK";
pub const IMAGE_MAGIC: &[u8; 4] = b"WIMG";
pub const FORMAT_VERSION: u32 = 1;

// Upper bound on any single dimension read from a header.
const MAX_DIM: u32 = 1 << 16;

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    if &b != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&b),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub(crate) fn expect_version<R: Read>(r: &mut R) -> Result<()> {
    let v = read_u32(r)?;
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {v}")));
    }
    Ok(())
}

fn read_dim<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let d = read_u32(r)?;
    if d == 0 || d > MAX_DIM {
        return Err(Error::Format(format!("{what} = {d} out of range")));
    }
    Ok(d as usize)
}

pub fn write_kspace<W: Write>(mut w: W, k: &MultiCoilKSpace) -> Result<()> {
    let (c, h, wd) = k.dim();
    w.write_all(KSPACE_MAGIC)?;
    for v in [FORMAT_VERSION, c as u32, h as u32, wd as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in k.data().iter() {
        w.write_all(&(v.re as f32).to_le_bytes())?;
        w.write_all(&(v.im as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_kspace<R: Read>(mut r: R) -> Result<MultiCoilKSpace> {
    expect_magic(&mut r, KSPACE_MAGIC)?;
    expect_version(&mut r)?;
    let c = read_dim(&mut r, "coils")?;
    let h = read_dim(&mut r, "height")?;
    let w = read_dim(&mut r, "width")?;
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c * h * w {
        let re = read_f32(&mut r)? as f64;
        let im = read_f32(&mut r)? as f64;
        data.push(Complex64::new(re, im));
    }
    let arr = Array3::from_shape_vec((c, h, w), data).expect("length matches header");
    MultiCoilKSpace::new(arr)
}

pub fn write_mask<W: Write>(mut w: W, m: &SamplingMask) -> Result<()> {
    let (h, wd) = m.shape();
    w.write_all(MASK_MAGIC)?;
    for v in [FORMAT_VERSION, h as u32, wd as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    let bytes: Vec<u8> = m.entries().iter().map(|&b| b as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_mask<R: Read>(mut r: R) -> Result<SamplingMask> {
    expect_magic(&mut r, MASK_MAGIC)?;
    expect_version(&mut r)?;
    let h = read_dim(&mut r, "height")?;
    let w = read_dim(&mut r, "width")?;
    let mut bytes = vec![0u8; h * w];
    r.read_exact(&mut bytes)?;
    let mut entries = Vec::with_capacity(h * w);
    for b in bytes {
        match b {
            0 => entries.push(false),
            1 => entries.push(true),
            other => return Err(Error::Format(format!("mask byte {other} not in {{0,1}}"))),
        }
    }
    SamplingMask::new(Array2::from_shape_vec((h, w), entries).expect("length matches header"))
}

pub fn write_image<W: Write>(mut w: W, img: &Array2<f64>) -> Result<()> {
    let (h, wd) = img.dim();
    w.write_all(IMAGE_MAGIC)?;
    for v in [FORMAT_VERSION, h as u32, wd as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in img.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_image<R: Read>(mut r: R) -> Result<Array2<f64>> {
    expect_magic(&mut r, IMAGE_MAGIC)?;
    expect_version(&mut r)?;
    let h = read_dim(&mut r, "height")?;
    let w = read_dim(&mut r, "width")?;
    let mut data = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        let v = read_f32(&mut r)? as f64;
        if !v.is_finite() {
            return Err(Error::Format("image contains non-finite values".into()));
        }
        data.push(v);
    }
    Ok(Array2::from_shape_vec((h, w), data).expect("length matches header"))
}

/// Binary 16-bit PGM (P5, maxval 65535), scaled so the image maximum maps to
/// 65535. Negative values clamp to 0.
pub fn write_pgm<W: Write>(mut w: W, img: &Array2<f64>) -> Result<()> {
    let (h, wd) = img.dim();
    let peak = img.iter().cloned().fold(0.0f64, f64::max);
    let scale = if peak > 0.0 { 65535.0 / peak } else { 0.0 };
    write!(w, "P5\n{wd} {h}\n65535\n")?;
    for v in img.iter() {
        let q = (v.max(0.0) * scale).round().min(65535.0) as u16;
        w.write_all(&q.to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_kspace(path: impl AsRef<Path>, k: &MultiCoilKSpace) -> Result<()> {
    write_kspace(BufWriter::new(File::create(path)?), k)
}

pub fn load_kspace(path: impl AsRef<Path>) -> Result<MultiCoilKSpace> {
    read_kspace(BufReader::new(File::open(path)?))
}

pub fn save_mask(path: impl AsRef<Path>, m: &SamplingMask) -> Result<()> {
    write_mask(BufWriter::new(File::create(path)?), m)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<SamplingMask> {
    read_mask(BufReader::new(File::open(path)?))
}

pub fn save_image(path: impl AsRef<Path>, img: &Array2<f64>) -> Result<()> {
    write_image(BufWriter::new(File::create(path)?), img)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    read_image(BufReader::new(File::open(path)?))
}

pub fn save_pgm(path: impl AsRef<Path>, img: &Array2<f64>) -> Result<()> {
    write_pgm(BufWriter::new(File::create(path)?), img)
}
