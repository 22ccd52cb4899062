//! The `c3ae` command line.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::codec::{encode, make_bins};
use crate::config::{ModelKind, TrainConfig};
use crate::cost::{render_report, CostReport, ReportFormat};
use crate::data::{
    crop::image_center, load_ppm, load_samples, model_inputs, square_crop, write_synthetic, DatasetManifest,
    Sample, SynthSpec, DEFAULT_SCALES,
};
use crate::error::{Error, Result};
use crate::gradcheck::{render_table, run_suite, MIN_PROBES};
use crate::nn::{build, deserialize, serialize, Architecture, ConcatMode};
use crate::train::{train_with, write_log};

/// Exit status for bad flags, configs and arguments.
pub const EXIT_USAGE: u8 = 1;
/// Exit status for unreadable or invalid data, weights and failed checks.
pub const EXIT_DATA: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "c3ae", version, about = "Compact CNN age estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a manifest and write its weight file.
    Train(TrainArgs),
    /// Predict the age of one face.
    Predict(PredictArgs),
    /// Print per-layer parameter and MACC counts.
    Analyze(AnalyzeArgs),
    /// Print the two-point label vector of an age.
    Encode(EncodeArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset of PPM images and a manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Manifest CSV, or a directory holding `manifest.csv`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output weight file.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch CSV log. Defaults to the weight file path with a `.csv` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// One image per branch, in descending crop scale.
    #[arg(long, num_args = 1.., required = true)]
    pub image: Vec<PathBuf>,
    /// Derive all branch crops from a single image.
    #[arg(long)]
    pub auto_crop: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, default_value = "plain")]
    pub arch: String,
    /// Branch merge for the full model: flatten or pooled.
    #[arg(long, default_value = "flatten")]
    pub concat: String,
    /// Insert squeeze-and-excitation gates.
    #[arg(long)]
    pub se: bool,
    #[arg(long)]
    pub residual: bool,
    #[arg(long, default_value = "text")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub age: f64,
    #[arg(long, default_value_t = 10.0)]
    pub k: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub min: f64,
    #[arg(long, default_value_t = 110.0, allow_negative_numbers = true)]
    pub max: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = MIN_PROBES)]
    pub probes: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub min_age: u32,
    #[arg(long, default_value_t = 80)]
    pub max_age: u32,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
}

/// Exit status for a library error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(&cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

pub fn run(command: &Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<u8> {
    match command {
        Command::Train(a) => train(a, out, err),
        Command::Predict(a) => predict(a, out),
        Command::Analyze(a) => analyze(a, out),
        Command::Encode(a) => {
            let grid = make_bins(a.min, a.max, a.k)?;
            let label = encode(a.age, &grid)?;
            let line: Vec<String> = label.weights.iter().map(|&w| short_decimal(w)).collect();
            write_out(out, &format!("{}\n", line.join(",")))?;
            Ok(0)
        }
        Command::Gradcheck(a) => {
            let results = run_suite(a.seed, a.probes)?;
            write_out(out, &render_table(&results))?;
            Ok(if results.iter().all(|r| r.passed()) {
                0
            } else {
                EXIT_DATA
            })
        }
        Command::Synth(a) => {
            let spec = SynthSpec {
                count: a.count,
                seed: a.seed,
                age_range: (a.min_age, a.max_age),
                image_size: a.size,
                noise_level: a.noise,
            };
            let manifest = write_synthetic(&a.out, &spec)?;
            write_out(
                out,
                &format!("wrote {} images to {}\n", manifest.records.len(), a.out.display()),
            )?;
            Ok(0)
        }
    }
}

/// Six decimals with trailing zeros removed: `0.2`, `0.8`, `0`.
pub fn short_decimal(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.csv")
    } else {
        data.to_path_buf()
    }
}

fn train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<u8> {
    let text = std::fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let cfg = TrainConfig::parse(&text)?;
    let manifest = DatasetManifest::load(manifest_path(&a.data))?;
    manifest.check_ages(&cfg.grid()?)?;
    let branches = cfg.architecture()?.branches;
    let samples = load_samples(&manifest, branches, cfg.crop_scales)?;
    let split = manifest.split(cfg.val_fraction, cfg.seed)?;
    let pick = |idx: &[usize]| -> Vec<Sample> { idx.iter().map(|&i| samples[i].clone()).collect() };
    let (train_set, val_set) = (pick(&split.train), pick(&split.val));

    let quiet = a.quiet;
    let outcome = train_with(&cfg, &train_set, &val_set, |e| {
        if !quiet {
            let _ = writeln!(err, "{}", e.csv_line());
        }
    })?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    std::fs::write(&a.out, serialize(&outcome.model)).map_err(|e| Error::io(&a.out, e))?;
    write_log(&log_path, &outcome.log)?;

    let mut summary = format!("train_mae {:.4}\n", outcome.train_mae);
    if let Some(v) = outcome.val_mae {
        summary.push_str(&format!("val_mae {v:.4}\n"));
    }
    summary.push_str(&format!(
        "weights {}\nlog {}\n",
        a.out.display(),
        log_path.display()
    ));
    write_out(out, &summary)?;
    Ok(0)
}

fn predict(a: &PredictArgs, out: &mut dyn Write) -> Result<u8> {
    let bytes = std::fs::read(&a.model).map_err(|e| Error::io(&a.model, e))?;
    let model = deserialize(&bytes)?;
    let branches = model.branches();
    let images = a.image.iter().map(load_ppm).collect::<Result<Vec<_>>>()?;
    let inputs = match (images.as_slice(), a.auto_crop) {
        ([one], true) => model_inputs(one, None, branches, DEFAULT_SCALES)?,
        (_, true) => return Err(Error::invalid("--auto-crop takes exactly one --image")),
        (many, false) if many.len() == branches => many
            .iter()
            .map(|img| {
                let center = image_center(img)?;
                square_crop(img, center, 1.0)
            })
            .collect::<Result<Vec<_>>>()?,
        (many, false) => {
            return Err(Error::invalid(format!(
                "model has {branches} branches but {} images were given; pass {branches} images or one image with --auto-crop",
                many.len()
            )))
        }
    };
    let pred = model.infer(&inputs)?;
    let dist: Vec<String> = pred
        .distribution
        .data()
        .iter()
        .map(|p| format!("{p:.6}"))
        .collect();
    write_out(out, &format!("{:.2}\n{}\n", pred.age[0], dist.join(",")))?;
    Ok(0)
}

fn analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> Result<u8> {
    let kind: ModelKind = a.arch.parse()?;
    let format: ReportFormat = a.format.parse()?;
    let concat: ConcatMode = a.concat.parse()?;
    let arch = Architecture {
        branches: match kind {
            ModelKind::Plain => 1,
            ModelKind::Full => 3,
        },
        concat,
        use_se: a.se,
        use_residual: a.residual,
        ..Architecture::plain()
    };
    let report = CostReport::analyze(&build(&arch)?)?;
    write_out(out, &render_report(&report, format))?;
    Ok(0)
}
