//! `.wkgm` model files.
//!
//! Layout (little-endian): magic `WKGM`, `u32` version, `u32` length plus
//! UTF-8 architecture name, architecture hyperparameters (`u32` each),
//! schedule `sigma_min`, `sigma_max` (`f64`) and `N` (`u32`), weight
//! parameters `r`, `p` (`f64`), then the tensor payload.
//!
//! * `conv-score-net`: hyperparameters `hidden`, `frequencies`; payload is
//!   `u32` count followed by that many `f32` parameters.
//! * `gaussian-oracle`: hyperparameters `H`, `W`; payload is the `[6, H, W]`
//!   mean as `f32` followed by the data variance as `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;

use super::net::{ConvScoreNet, NetConfig};
use super::{geometric_schedule, AugmentedTensor, GaussianOracle, NoiseSchedule, ScoreEstimator, AUG_CHANNELS};
use crate::error::{Error, Result};
use crate::io::{expect_magic, expect_version, read_f32, read_f64, read_u32, FORMAT_VERSION};
use crate::kspace::MIN_SIDE;
use crate::weighting::{build_weight, WeightMap};

pub const MODEL_MAGIC: &[u8; 4] = b"WKGM";
pub const ARCH_CONV: &str = "conv-score-net";
pub const ARCH_ORACLE: &str = "gaussian-oracle";

const MAX_ARCH_LEN: u32 = 64;
const MAX_PARAMS: u32 = 1 << 26;
const MAX_SIDE: usize = 1 << 12;

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreModel {
    Net(ConvScoreNet),
    Oracle(GaussianOracle),
}

impl ScoreModel {
    pub fn architecture(&self) -> &'static str {
        match self {
            ScoreModel::Net(_) => ARCH_CONV,
            ScoreModel::Oracle(_) => ARCH_ORACLE,
        }
    }
}

impl ScoreEstimator for ScoreModel {
    fn score(&self, x: &AugmentedTensor, sigma: f64) -> AugmentedTensor {
        match self {
            ScoreModel::Net(n) => n.score(x, sigma),
            ScoreModel::Oracle(o) => o.score(x, sigma),
        }
    }

    fn check_input(&self, dim: (usize, usize, usize)) -> Result<()> {
        match self {
            ScoreModel::Net(n) => n.check_input(dim),
            ScoreModel::Oracle(o) => o.check_input(dim),
        }
    }
}

/// A score model together with the schedule and weighting it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: ScoreModel,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub num_scales: usize,
    pub weight_r: f64,
    pub weight_p: f64,
}

impl ModelFile {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        geometric_schedule(self.sigma_min, self.sigma_max, self.num_scales)
    }

    pub fn weight(&self, shape: (usize, usize)) -> Result<WeightMap> {
        build_weight(shape, self.weight_r, self.weight_p)
    }
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::param(format!("{v} does not fit in a u32 field")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_model<W: Write>(mut w: W, file: &ModelFile) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let arch = file.model.architecture();
    put_u32(&mut w, arch.len())?;
    w.write_all(arch.as_bytes())?;
    match &file.model {
        ScoreModel::Net(net) => {
            put_u32(&mut w, net.config().hidden)?;
            put_u32(&mut w, net.config().frequencies)?;
        }
        ScoreModel::Oracle(o) => {
            let (_, h, wd) = o.mean().dim();
            put_u32(&mut w, h)?;
            put_u32(&mut w, wd)?;
        }
    }
    w.write_all(&file.sigma_min.to_le_bytes())?;
    w.write_all(&file.sigma_max.to_le_bytes())?;
    put_u32(&mut w, file.num_scales)?;
    w.write_all(&file.weight_r.to_le_bytes())?;
    w.write_all(&file.weight_p.to_le_bytes())?;
    match &file.model {
        ScoreModel::Net(net) => {
            put_u32(&mut w, net.params().len())?;
            for &p in net.params() {
                w.write_all(&(p as f32).to_le_bytes())?;
            }
        }
        ScoreModel::Oracle(o) => {
            for &m in o.mean().iter() {
                w.write_all(&(m as f32).to_le_bytes())?;
            }
            w.write_all(&o.var().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<ModelFile> {
    expect_magic(&mut r, MODEL_MAGIC)?;
    expect_version(&mut r)?;
    let len = read_u32(&mut r)?;
    if len == 0 || len > MAX_ARCH_LEN {
        return Err(Error::Format(format!("architecture name length {len} out of range")));
    }
    let mut name = vec![0u8; len as usize];
    r.read_exact(&mut name)?;
    let arch = String::from_utf8(name).map_err(|_| Error::Format("architecture name is not UTF-8".into()))?;
    let a = read_u32(&mut r)? as usize;
    let b = read_u32(&mut r)? as usize;
    let sigma_min = read_f64(&mut r)?;
    let sigma_max = read_f64(&mut r)?;
    let num_scales = read_u32(&mut r)? as usize;
    let weight_r = read_f64(&mut r)?;
    let weight_p = read_f64(&mut r)?;
    let bad = |e: Error| Error::Format(e.to_string());
    geometric_schedule(sigma_min, sigma_max, num_scales).map_err(bad)?;
    build_weight((4, 4), weight_r, weight_p).map_err(bad)?;

    let model = match arch.as_str() {
        ARCH_CONV => {
            let config = NetConfig {
                hidden: a,
                frequencies: b,
                sigma_min,
                sigma_max,
            };
            config.validate().map_err(bad)?;
            let count = read_u32(&mut r)?;
            if count > MAX_PARAMS || count as usize != config.param_count() {
                return Err(Error::Format(format!(
                    "parameter count {count} does not match the architecture ({})",
                    config.param_count()
                )));
            }
            let params = (0..count)
                .map(|_| read_f32(&mut r).map(f64::from))
                .collect::<Result<Vec<_>>>()?;
            ScoreModel::Net(ConvScoreNet::from_params(config, params).map_err(bad)?)
        }
        ARCH_ORACLE => {
            let (h, w) = (a, b);
            if h < MIN_SIDE || w < MIN_SIDE || h > MAX_SIDE || w > MAX_SIDE {
                return Err(Error::Format(format!("oracle grid {h}x{w} out of range")));
            }
            let mut mean = Array3::zeros((AUG_CHANNELS, h, w));
            for m in mean.iter_mut() {
                *m = f64::from(read_f32(&mut r)?);
            }
            let var = read_f64(&mut r)?;
            ScoreModel::Oracle(GaussianOracle::new(mean, var).map_err(bad)?)
        }
        other => return Err(Error::Format(format!("unknown architecture {other:?}"))),
    };
    Ok(ModelFile {
        model,
        sigma_min,
        sigma_max,
        num_scales,
        weight_r,
        weight_p,
    })
}

pub fn save_model(path: impl AsRef<Path>, file: &ModelFile) -> Result<()> {
    write_model(BufWriter::new(File::create(path)?), file)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    read_model(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::super::{train_score, TrainingConfig};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn oracle_file() -> ModelFile {
        let mean = Array3::from_shape_fn((6, 5, 4), |(c, i, j)| c as f64 * 0.25 - i as f64 + 0.5 * j as f64);
        ModelFile {
            model: ScoreModel::Oracle(GaussianOracle::new(mean, 0.0625).unwrap()),
            sigma_min: 0.01,
            sigma_max: 1.0,
            num_scales: 1000,
            weight_r: 0.02,
            weight_p: 0.5,
        }
    }

    #[test]
    fn oracle_round_trip_and_header() {
        let file = oracle_file();
        let mut bytes = Vec::new();
        write_model(&mut bytes, &file).unwrap();
        assert_eq!(&bytes[..4], b"WKGM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 15);
        assert_eq!(&bytes[12..27], b"gaussian-oracle");
        let expected_len = 27 + 8 + 8 + 8 + 4 + 8 + 8 + 6 * 5 * 4 * 4 + 8;
        assert_eq!(bytes.len(), expected_len);
        // mean values are exact in f32
        assert_eq!(read_model(bytes.as_slice()).unwrap(), file);
    }

    #[test]
    fn net_round_trip_is_f32_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let net = ConvScoreNet::init(NetConfig::new(3, 0.01, 1.0), &mut rng).unwrap();
        let rounded: Vec<f64> = net.params().iter().map(|&p| f64::from(p as f32)).collect();
        let file = ModelFile {
            model: ScoreModel::Net(ConvScoreNet::from_params(*net.config(), rounded).unwrap()),
            sigma_min: 0.01,
            sigma_max: 1.0,
            num_scales: 10,
            weight_r: 0.02,
            weight_p: 0.5,
        };
        let mut bytes = Vec::new();
        write_model(&mut bytes, &file).unwrap();
        assert_eq!(read_model(bytes.as_slice()).unwrap(), file);
    }

    #[test]
    fn identical_seeds_give_identical_bytes() {
        let schedule = geometric_schedule(0.01, 1.0, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let data: Vec<_> = (0..8)
            .map(|_| AugmentedTensor::standard_normal((6, 4, 4), &mut rng))
            .collect();
        let cfg = TrainingConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 99,
            hidden: 3,
        };
        let bytes = |_: ()| {
            let (net, _) = train_score(&data, &schedule, &cfg).unwrap();
            let file = ModelFile {
                model: ScoreModel::Net(net),
                sigma_min: 0.01,
                sigma_max: 1.0,
                num_scales: 20,
                weight_r: 0.02,
                weight_p: 0.5,
            };
            let mut out = Vec::new();
            write_model(&mut out, &file).unwrap();
            out
        };
        assert_eq!(bytes(()), bytes(()));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut bytes = Vec::new();
        write_model(&mut bytes, &oracle_file()).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_model(bad_magic.as_slice()), Err(Error::Format(_))));
        let mut bad_arch = bytes.clone();
        bad_arch[12] = b'h';
        assert!(matches!(read_model(bad_arch.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read_model(&bytes[..bytes.len() - 3]), Err(Error::Io(_))));
    }
}
