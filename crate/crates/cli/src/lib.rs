//! `wkgm` command-line front end: mask generation, phantom synthesis,
//! prior training, reconstruction and metrics.
//!
//! Exit codes: 0 success, 1 validation, 2 I/O, 3 numerical failure.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wkgm_core::hankel::HankelSpec;
use wkgm_core::io;
use wkgm_core::kspace::{sos_combine, MultiCoilKSpace};
use wkgm_core::masks::{acceleration_factor, generate_mask, MaskPattern, MaskSpec};
use wkgm_core::metrics;
use wkgm_core::phantom::{make_phantom, PhantomKind, PhantomSpec};
use wkgm_core::sampler::{reconstruct_svd_wkgm, reconstruct_wkgm, SamplerConfig};
use wkgm_core::score::{
    augment6, geometric_schedule, load_model, save_model, train_score, AugmentedTensor, GaussianOracle, ModelFile,
    ScoreModel, TrainingConfig, DEFAULT_NUM_SCALES, DEFAULT_SIGMA_MAX, DEFAULT_SIGMA_MIN,
};
use wkgm_core::weighting::{apply_weight, build_weight, DEFAULT_WEIGHT_P, DEFAULT_WEIGHT_R};

pub use config::{Method, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] wkgm_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use wkgm_core::Error as E;
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
            CliError::Core(e) => match e {
                E::ShapeMismatch { .. } | E::InvalidParameter(_) => 1,
                E::Format(_) | E::Io(_) => 2,
                E::NonFinite { .. } | E::Diverged { .. } => 3,
            },
        }
    }

    fn kind(&self) -> &'static str {
        match self.exit_code() {
            1 => "validation",
            2 => "io",
            _ => "numerical",
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "wkgm", version, about = "Weighted k-space generative model reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an undersampling mask (.wmsk)
    Mask(MaskArgs),
    /// Synthesize a ground-truth image (.img) and its multi-coil k-space (.wksp)
    Phantom(PhantomArgs),
    /// Train the score network, or fit the Gaussian model with --oracle (.wkgm)
    Train(TrainArgs),
    /// Reconstruct undersampled k-space
    Recon(ReconArgs),
    /// PSNR and SSIM of a test image against a reference
    Metrics(MetricsArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration (for example a previous run.json); flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[command(flatten)]
    common: Common,
    /// cartesian1d, uniform-random-2d or poisson-disc-2d
    #[arg(long)]
    pattern: Option<String>,
    /// Target acceleration factor R > 1
    #[arg(long)]
    accel: Option<f64>,
    /// Fully sampled central rows (cartesian1d) or square side (2-D patterns)
    #[arg(long)]
    acs: Option<usize>,
    /// Square grid side; shorthand for --height and --width
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[command(flatten)]
    common: Common,
    /// ellipses or exponentials
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    coils: Option<usize>,
    /// Number of complex exponentials (exponentials kind only)
    #[arg(long)]
    components: Option<usize>,
    /// Ground-truth image (.img)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Multi-coil k-space (.wksp)
    #[arg(long)]
    kspace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Fit the closed-form Gaussian model instead of training the network
    #[arg(long)]
    oracle: bool,
    /// Training k-space files; each coil is one sample. Without them,
    /// ellipse phantoms are synthesized.
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    coils: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Number of noise levels
    #[arg(long = "N")]
    num_scales: Option<usize>,
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    weight_r: Option<f64>,
    #[arg(long)]
    weight_p: Option<f64>,
    /// Model file (.wkgm)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReconArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long)]
    kspace: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Outer iterations (noise levels); defaults to the model's schedule
    #[arg(long = "N")]
    num_scales: Option<usize>,
    /// Corrector steps per outer iteration
    #[arg(long = "M")]
    corrector_steps: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    /// Data-consistency weight; "inf" replaces sampled entries
    #[arg(long)]
    lambda_dc: Option<f64>,
    #[arg(long)]
    hankel_window: Option<usize>,
    #[arg(long)]
    hankel_rank: Option<usize>,
    #[arg(long)]
    weight_r: Option<f64>,
    #[arg(long)]
    weight_p: Option<f64>,
    /// Reconstructed k-space (.wksp)
    #[arg(long)]
    out: Option<PathBuf>,
    /// SOS magnitude preview (.pgm); a float32 .img is written alongside
    #[arg(long)]
    sos_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Print the report as JSON
    #[arg(long)]
    json: bool,
    /// Also write the JSON report (and run.json beside it)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Per-phantom seeds for synthesized training sets, drawn from a stream of
/// the run seed that no other command uses.
fn phantom_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAINING_STREAM);
    (0..count).map(|_| rng.next_u64()).collect()
}

const TRAINING_STREAM: u64 = 0x74_7261_696e;

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let report = serde_json::json!({
                "error": e.kind(),
                "exit_code": e.exit_code(),
                "message": e.to_string(),
            });
            eprintln!("{report}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Mask(a) => cmd_mask(a),
        Command::Phantom(a) => cmd_phantom(a),
        Command::Train(a) => cmd_train(a),
        Command::Recon(a) => cmd_recon(a),
        Command::Metrics(a) => cmd_metrics(a),
    }
}

fn base_config(common: &Common, name: &str) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(prev) = &cfg.command {
        if prev != name {
            return Err(CliError::Validation(format!(
                "config was written by `{prev}`, cannot run it as `{name}`"
            )));
        }
    }
    cfg.command = Some(name.to_string());
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Validation(format!("missing required --{flag}")))
}

fn finish(cfg: &RunConfig, primary: &Path) -> Result<(), CliError> {
    cfg.echo(&config::output_dir(primary))?;
    Ok(())
}

fn cmd_mask(a: MaskArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&a.common, "mask")?;
    let m = &mut cfg.mask;
    set(&mut m.pattern, a.pattern);
    set(&mut m.accel, a.accel);
    set(&mut m.acs, a.acs);
    set(&mut m.height, a.size.or(a.height));
    set(&mut m.width, a.size.or(a.width));
    set_opt(&mut cfg.paths.out, a.out);
    let out = required(&cfg.paths.out, "out")?.to_path_buf();

    let pattern: MaskPattern = cfg.mask.pattern.parse()?;
    let spec = MaskSpec::new(pattern, cfg.mask.accel, cfg.mask.acs, cfg.seed);
    let mask = generate_mask(&spec, (cfg.mask.height, cfg.mask.width))?;
    io::save_mask(&out, &mask)?;
    println!(
        "wrote {} ({}x{}, R = {:.3})",
        out.display(),
        cfg.mask.height,
        cfg.mask.width,
        acceleration_factor(&mask)?
    );
    finish(&cfg, &out)
}

fn cmd_phantom(a: PhantomArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&a.common, "phantom")?;
    let p = &mut cfg.phantom;
    set(&mut p.kind, a.kind);
    set(&mut p.height, a.size.or(a.height));
    set(&mut p.width, a.size.or(a.width));
    set(&mut p.coils, a.coils);
    set(&mut p.components, a.components);
    set_opt(&mut cfg.paths.out, a.out);
    set_opt(&mut cfg.paths.kspace, a.kspace);
    let out = required(&cfg.paths.out, "out")?.to_path_buf();
    let kspace_out = required(&cfg.paths.kspace, "kspace")?.to_path_buf();

    let kind: PhantomKind = cfg.phantom.kind.parse()?;
    let size = (cfg.phantom.height, cfg.phantom.width);
    let spec = match kind {
        PhantomKind::Ellipses => PhantomSpec::ellipses(size, cfg.phantom.coils, cfg.seed),
        PhantomKind::Exponentials => {
            PhantomSpec::exponentials(size, cfg.phantom.coils, cfg.phantom.components, cfg.seed)
        }
    };
    let ph = make_phantom(&spec)?;
    io::save_image(&out, &ph.image)?;
    io::save_kspace(&kspace_out, &ph.kspace)?;
    println!("wrote {} and {}", out.display(), kspace_out.display());
    finish(&cfg, &out)
}

fn training_set(cfg: &RunConfig, r: f64, p: f64) -> Result<Vec<AugmentedTensor>, CliError> {
    let spaces: Vec<MultiCoilKSpace> = if cfg.paths.data.is_empty() {
        let t = &cfg.training;
        phantom_seeds(cfg.seed, t.count)
            .into_iter()
            .map(|s| make_phantom(&PhantomSpec::ellipses((t.height, t.width), t.coils, s)).map(|ph| ph.kspace))
            .collect::<Result<_, _>>()?
    } else {
        cfg.paths.data.iter().map(io::load_kspace).collect::<Result<_, _>>()?
    };
    let shape = spaces
        .first()
        .ok_or_else(|| CliError::Validation("training needs at least one sample".into()))?
        .grid_shape();
    let w = build_weight(shape, r, p)?;
    let mut set = Vec::new();
    for k in &spaces {
        if k.grid_shape() != shape {
            return Err(wkgm_core::Error::ShapeMismatch {
                left: format!("{:?}", k.dim()),
                right: format!("{shape:?}"),
            }
            .into());
        }
        let kw = apply_weight(k, &w)?;
        for c in 0..kw.coils() {
            set.push(augment6(&kw.coil(c).to_owned()));
        }
    }
    Ok(set)
}

#[derive(Serialize)]
struct TrainSummary {
    samples: usize,
    architecture: &'static str,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&a.common, "train")?;
    let t = &mut cfg.training;
    if a.oracle {
        t.oracle = true;
    }
    set(&mut t.count, a.count);
    set(&mut t.height, a.size);
    set(&mut t.width, a.size);
    set(&mut t.coils, a.coils);
    set(&mut t.epochs, a.epochs);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.learning_rate, a.learning_rate);
    set(&mut t.hidden, a.hidden);
    let s = &mut cfg.schedule;
    s.sigma_min = a.sigma_min.or(s.sigma_min).or(Some(DEFAULT_SIGMA_MIN));
    s.sigma_max = a.sigma_max.or(s.sigma_max).or(Some(DEFAULT_SIGMA_MAX));
    s.num_scales = a.num_scales.or(s.num_scales).or(Some(DEFAULT_NUM_SCALES));
    let wcfg = &mut cfg.weighting;
    wcfg.r = a.weight_r.or(wcfg.r).or(Some(DEFAULT_WEIGHT_R));
    wcfg.p = a.weight_p.or(wcfg.p).or(Some(DEFAULT_WEIGHT_P));
    if !a.data.is_empty() {
        cfg.paths.data = a.data;
    }
    set_opt(&mut cfg.paths.out, a.out);
    let out = required(&cfg.paths.out, "out")?.to_path_buf();

    let (sigma_min, sigma_max, n) = (
        cfg.schedule.sigma_min.unwrap_or(DEFAULT_SIGMA_MIN),
        cfg.schedule.sigma_max.unwrap_or(DEFAULT_SIGMA_MAX),
        cfg.schedule.num_scales.unwrap_or(DEFAULT_NUM_SCALES),
    );
    let (r, p) = (
        cfg.weighting.r.unwrap_or(DEFAULT_WEIGHT_R),
        cfg.weighting.p.unwrap_or(DEFAULT_WEIGHT_P),
    );
    let schedule = geometric_schedule(sigma_min, sigma_max, n)?;
    let data = training_set(&cfg, r, p)?;

    let (model, summary) = if cfg.training.oracle {
        let oracle = GaussianOracle::fit(&data)?;
        let summary = TrainSummary {
            samples: data.len(),
            architecture: wkgm_core::score::ARCH_ORACLE,
            initial_loss: None,
            final_loss: None,
        };
        (ScoreModel::Oracle(oracle), summary)
    } else {
        let tc = TrainingConfig {
            epochs: cfg.training.epochs,
            batch_size: cfg.training.batch_size,
            learning_rate: cfg.training.learning_rate,
            seed: cfg.seed,
            hidden: cfg.training.hidden,
        };
        let (net, report) = train_score(&data, &schedule, &tc)?;
        let summary = TrainSummary {
            samples: data.len(),
            architecture: wkgm_core::score::ARCH_CONV,
            initial_loss: Some(report.initial_loss),
            final_loss: Some(report.final_loss),
        };
        (ScoreModel::Net(net), summary)
    };
    let file = ModelFile {
        model,
        sigma_min,
        sigma_max,
        num_scales: n,
        weight_r: r,
        weight_p: p,
    };
    save_model(&out, &file)?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    finish(&cfg, &out)
}

fn resolve(flag_or_cfg: Option<f64>, model: f64, what: &str) -> Result<f64, CliError> {
    match flag_or_cfg {
        Some(v) if v != model => Err(CliError::Validation(format!(
            "{what} = {v} does not match the model's {what} = {model}"
        ))),
        _ => Ok(model),
    }
}

fn cmd_recon(a: ReconArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&a.common, "recon")?;
    let s = &mut cfg.sampler;
    set(&mut s.method, a.method);
    set(&mut s.corrector_steps, a.corrector_steps);
    set(&mut s.snr, a.snr);
    if let Some(l) = a.lambda_dc {
        s.lambda_dc = if l.is_infinite() { None } else { Some(l) };
    }
    set(&mut cfg.hankel.window, a.hankel_window);
    set_opt(&mut cfg.hankel.rank, a.hankel_rank);
    set_opt(&mut cfg.schedule.num_scales, a.num_scales);
    set_opt(&mut cfg.weighting.r, a.weight_r);
    set_opt(&mut cfg.weighting.p, a.weight_p);
    set_opt(&mut cfg.paths.kspace, a.kspace);
    set_opt(&mut cfg.paths.mask, a.mask);
    set_opt(&mut cfg.paths.model, a.model);
    set_opt(&mut cfg.paths.out, a.out);
    set_opt(&mut cfg.paths.sos_out, a.sos_out);
    let out = required(&cfg.paths.out, "out")?.to_path_buf();

    let y = io::load_kspace(required(&cfg.paths.kspace, "kspace")?)?;
    let m = io::load_mask(required(&cfg.paths.mask, "mask")?)?;
    if y.grid_shape() != m.shape() {
        return Err(CliError::Validation(format!(
            "mask shape {:?} does not match k-space shape {:?}",
            m.shape(),
            y.dim()
        )));
    }
    let model = load_model(required(&cfg.paths.model, "model")?)?;

    let sigma_min = resolve(cfg.schedule.sigma_min, model.sigma_min, "sigma_min")?;
    let sigma_max = resolve(cfg.schedule.sigma_max, model.sigma_max, "sigma_max")?;
    let n = cfg.schedule.num_scales.unwrap_or(model.num_scales);
    let r = resolve(cfg.weighting.r, model.weight_r, "weight_r")?;
    let p = resolve(cfg.weighting.p, model.weight_p, "weight_p")?;
    cfg.schedule.sigma_min = Some(sigma_min);
    cfg.schedule.sigma_max = Some(sigma_max);
    cfg.schedule.num_scales = Some(n);
    cfg.weighting.r = Some(r);
    cfg.weighting.p = Some(p);

    let schedule = geometric_schedule(sigma_min, sigma_max, n)?;
    let w = build_weight(y.grid_shape(), r, p)?;
    let sc = SamplerConfig {
        corrector_steps: cfg.sampler.corrector_steps,
        snr: cfg.sampler.snr,
        lambda_dc: cfg.sampler.lambda_dc.unwrap_or(f64::INFINITY),
        seed: cfg.seed,
        noise: true,
    };
    let k = match cfg.sampler.method {
        Method::Wkgm => reconstruct_wkgm(&y, &m, &model.model, &w, &schedule, &sc)?,
        Method::SvdWkgm => {
            let spec = match cfg.hankel.rank {
                Some(rank) => HankelSpec::new(cfg.hankel.window, rank),
                None => HankelSpec::with_default_rank(cfg.hankel.window, y.coils()),
            };
            cfg.hankel.rank = Some(spec.rank);
            reconstruct_svd_wkgm(&y, &m, &model.model, &w, &schedule, &sc, &spec)?
        }
    };
    io::save_kspace(&out, &k)?;
    if let Some(pgm) = &cfg.paths.sos_out {
        let img = sos_combine(&k);
        io::save_pgm(pgm, &img)?;
        io::save_image(pgm.with_extension("img"), &img)?;
    }
    println!("wrote {}", out.display());
    finish(&cfg, &out)
}

fn cmd_metrics(a: MetricsArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&a.common, "metrics")?;
    set_opt(&mut cfg.paths.reference, a.reference);
    set_opt(&mut cfg.paths.test, a.test);
    set_opt(&mut cfg.paths.out, a.out);
    let reference = io::load_image(required(&cfg.paths.reference, "ref")?)?;
    let test = io::load_image(required(&cfg.paths.test, "test")?)?;
    let report = metrics::evaluate(&reference, &test)?;
    let json = serde_json::json!({ "psnr": report.psnr, "ssim": report.ssim });
    if a.json {
        println!("{json}");
    } else {
        println!("PSNR {:.3} dB  SSIM {:.4}", report.psnr, report.ssim);
    }
    if let Some(out) = &cfg.paths.out {
        std::fs::write(out, format!("{json}\n")).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        finish(&cfg, out)?;
    }
    Ok(())
}
