//! The `codec` command line: encode, decode, train, eval and bdrate.
//!
//! Exit codes: 0 success, 1 unreadable or malformed input (and usage errors),
//! 2 incompatible checkpoint or format version, 3 checksum failure.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::codec::{lambda_for_index, Codec, MaskMode, LAMBDAS};
use crate::error::Error;
use crate::eval::{average_points, bd_report, emit_rd_csv, evaluate_image, psnr_rgb, read_rd_csv, RdCurve, RdPoint};
use crate::image_io::{list_images, load_image, save_image, write_atomic};
use crate::tensor::Tensor;
use crate::train::{run_schedule, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_INCOMPATIBLE: i32 = 2;
pub const EXIT_CHECKSUM: i32 = 3;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "CODEC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "codec", version, about = "Multiscale ANF learned image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compress an image into a bitstream.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// λ index 0..5; defaults to the one stored in the checkpoint.
        #[arg(long)]
        lambda: Option<u8>,
        /// variance, rdo, fine, coarse or file:<path>.
        #[arg(long, default_value = "variance")]
        mask: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct an image from a bitstream.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the staged training schedule.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average rate and quality over a directory, one point per checkpoint.
    Eval {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "rdo")]
        mask: String,
        /// Curve label written to the CSV.
        #[arg(long, default_value = "ms-anfic")]
        label: String,
    },
    /// BD rates of every curve in `test` against the first curve of `anchor`.
    Bdrate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Checksum { .. } => EXIT_CHECKSUM,
        Error::Version { .. } | Error::Checkpoint(_) => EXIT_INCOMPATIBLE,
        _ => EXIT_INPUT,
    }
}

fn wrap(context: impl fmt::Display) -> impl FnOnce(Error) -> CliError {
    move |e| CliError::new(exit_code(&e), format!("{context}: {e}"))
}

fn load_codec(path: &Path) -> Result<Codec, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::new(EXIT_INPUT, format!("{}: {e}", path.display())))?;
    Codec::from_checkpoint_bytes(&bytes).map_err(|e| {
        let code = if matches!(e, Error::Io(_)) { EXIT_INPUT } else { EXIT_INCOMPATIBLE };
        CliError::new(code, format!("{}: {e}", path.display()))
    })
}

/// Worker count from [`THREADS_ENV`], else the machine's parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Reports go to `out`, errors to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Encode { input, ckpt, lambda, mask, out: dst } => cmd_encode(&input, &ckpt, lambda, &mask, &dst, out),
        Command::Decode { input, ckpt, out: dst } => cmd_decode(&input, &ckpt, &dst, out),
        Command::Train { config, out: dst } => cmd_train(&config, dst.as_deref(), out),
        Command::Eval { dir, ckpts, out: dst, mask, label } => cmd_eval(&dir, &ckpts, &dst, &mask, &label, out),
        Command::Bdrate { anchor, test } => cmd_bdrate(&anchor, &test, out),
    }
}

fn say(out: &mut dyn Write, line: impl fmt::Display) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|e| CliError::new(EXIT_INPUT, format!("writing report: {e}")))
}

fn lambda_index(codec: &Codec, requested: Option<u8>, path: &Path) -> Result<u8, CliError> {
    if let Some(l) = requested {
        lambda_for_index(l).map_err(wrap("--lambda"))?;
    }
    match (requested, codec.lambda_index) {
        (Some(r), Some(c)) if r != c => Err(CliError::new(
            EXIT_INCOMPATIBLE,
            format!("{} was trained for lambda index {c} ({}), not {r}", path.display(), LAMBDAS[c as usize]),
        )),
        (Some(r), _) => Ok(r),
        (None, Some(c)) => Ok(c),
        (None, None) => {
            Err(CliError::new(EXIT_INPUT, format!("{} stores no lambda index; pass --lambda", path.display())))
        }
    }
}

pub fn cmd_encode(
    input: &Path,
    ckpt: &Path,
    lambda: Option<u8>,
    mask: &str,
    dst: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let image = load_image(input).map_err(wrap(input.display()))?;
    let codec = load_codec(ckpt)?;
    let index = lambda_index(&codec, lambda, ckpt)?;
    let mode = MaskMode::parse(mask).map_err(wrap("--mask"))?;
    let start = Instant::now();
    let enc = codec.encode_with(&image, &mode, index).map_err(wrap("encode"))?;
    let elapsed = start.elapsed();
    let psnr = psnr_rgb(&image, &enc.reconstruction).map_err(wrap("encode"))?;
    write_atomic(dst, &enc.bytes).map_err(wrap(dst.display()))?;
    say(
        out,
        format_args!(
            "bpp={} bytes={} estimated_bits={:.1} psnr_rgb={:.4} level1_fraction={:.4} encode_ms={:.1}",
            enc.bpp,
            enc.bytes.len(),
            enc.estimated_bits,
            psnr.db,
            enc.mask.fraction(1),
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

pub fn cmd_decode(input: &Path, ckpt: &Path, dst: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let bytes = std::fs::read(input).map_err(|e| CliError::new(EXIT_INPUT, format!("{}: {e}", input.display())))?;
    let codec = load_codec(ckpt)?;
    let start = Instant::now();
    let dec = codec.decode(&bytes).map_err(wrap(input.display()))?;
    save_image(&dec.image, dst).map_err(wrap(dst.display()))?;
    say(
        out,
        format_args!(
            "width={} height={} decode_ms={:.1}",
            dec.header.width,
            dec.header.height,
            start.elapsed().as_secs_f64() * 1e3
        ),
    )
}

pub fn cmd_train(config: &Path, dst: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let text =
        std::fs::read_to_string(config).map_err(|e| CliError::new(EXIT_INPUT, format!("{}: {e}", config.display())))?;
    let mut cfg = TrainConfig::from_toml(&text).map_err(wrap(config.display()))?;
    if let Some(d) = dst {
        cfg.output_dir = d.to_path_buf();
    }
    let corpus = cfg.load_corpus().map_err(wrap("corpus"))?;
    let mut write_err = None;
    let outcome = run_schedule(&cfg, &corpus, Some(&cfg.output_dir), |r| {
        let line = format!(
            "epoch={} stage={} lambda2={} loss={:.5} rate={:.5} distortion={:.3} residual={:.3}",
            r.epoch, r.stage, r.lambda2, r.stats.loss, r.stats.rate, r.stats.distortion, r.stats.residual
        );
        if let Err(e) = say(out, line) {
            write_err.get_or_insert(e);
        }
    })
    .map_err(wrap("training"))?;
    if let Some(e) = write_err {
        return Err(e);
    }
    say(out, format_args!("wrote {} checkpoints to {}", outcome.forks.len() + 2, cfg.output_dir.display()))
}

/// One row of the per-image CSV written next to the eval output.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageRow {
    pub checkpoint: String,
    pub image: String,
    pub lambda2: f64,
    pub bpp: f64,
    pub estimated_bits: f64,
    pub psnr_rgb_db: f64,
    pub ms_ssim: f64,
    pub ms_ssim_db: f64,
    pub level1_fraction: f64,
}

/// `<stem>_images.csv` beside `path`.
pub fn per_image_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "eval".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}_images.csv"))
}

fn evaluate_all(
    codec: &Codec,
    images: &[(String, Tensor<f32>)],
    mode: &MaskMode,
    index: u8,
    label: &str,
    threads: usize,
) -> Result<Vec<(RdPoint, f64, f64)>, Error> {
    let one = |img: &Tensor<f32>| {
        evaluate_image(codec, img, mode, index, label).map(|(p, e)| (p, e.estimated_bits, e.mask.fraction(1)))
    };
    if threads <= 1 || images.len() <= 1 {
        return images.iter().map(|(_, img)| one(img)).collect();
    }
    let chunk = images.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|(_, img)| one(img)).collect::<Result<Vec<_>, Error>>()))
            .collect();
        let mut all = Vec::with_capacity(images.len());
        for h in handles {
            all.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(all)
    })
}

pub fn cmd_eval(
    dir: &Path,
    ckpts: &[PathBuf],
    dst: &Path,
    mask: &str,
    label: &str,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let paths = list_images(dir).map_err(wrap(dir.display()))?;
    if paths.is_empty() {
        return Err(CliError::new(EXIT_INPUT, format!("{} holds no images", dir.display())));
    }
    let images: Vec<(String, Tensor<f32>)> = paths
        .iter()
        .map(|p| {
            let name = p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
            load_image(p).map(|t| (name, t)).map_err(wrap(p.display()))
        })
        .collect::<Result<_, _>>()?;
    let mode = MaskMode::parse(mask).map_err(wrap("--mask"))?;
    let codecs: Vec<Codec> = ckpts.iter().map(|p| load_codec(p)).collect::<Result<_, _>>()?;
    let indices: Vec<u8> = codecs.iter().zip(ckpts).map(|(c, p)| lambda_index(c, None, p)).collect::<Result<_, _>>()?;
    let threads = thread_count();
    let mut points = Vec::with_capacity(codecs.len());
    let mut rows = Vec::new();
    for ((codec, &index), path) in codecs.iter().zip(&indices).zip(ckpts) {
        let results = evaluate_all(codec, &images, &mode, index, label, threads).map_err(wrap(path.display()))?;
        for ((name, _), (p, bits, frac)) in images.iter().zip(&results) {
            rows.push(ImageRow {
                checkpoint: path.display().to_string(),
                image: name.clone(),
                lambda2: p.lambda2,
                bpp: p.bpp,
                estimated_bits: *bits,
                psnr_rgb_db: p.psnr_rgb_db,
                ms_ssim: p.ms_ssim,
                ms_ssim_db: p.ms_ssim_db,
                level1_fraction: *frac,
            });
        }
        let per: Vec<RdPoint> = results.into_iter().map(|r| r.0).collect();
        let avg = average_points(label, &per).map_err(wrap("eval"))?;
        say(
            out,
            format_args!(
                "lambda2={} bpp={:.6} psnr_rgb={:.4} ms_ssim_db={:.4} images={}",
                avg.lambda2,
                avg.bpp,
                avg.psnr_rgb_db,
                avg.ms_ssim_db,
                per.len()
            ),
        )?;
        points.push(avg);
    }
    emit_rd_csv(&[RdCurve::new(label, points)], dst).map_err(wrap(dst.display()))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::new(EXIT_INPUT, format!("per-image csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::new(EXIT_INPUT, format!("per-image csv: {e}")))?;
    let detail = per_image_path(dst);
    write_atomic(&detail, &bytes).map_err(wrap(detail.display()))
}

pub fn cmd_bdrate(anchor: &Path, test: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let a = read_rd_csv(anchor).map_err(wrap(anchor.display()))?;
    let t = read_rd_csv(test).map_err(wrap(test.display()))?;
    let report = bd_report(&a[0], &t).map_err(wrap("bdrate"))?;
    say(out, report.trim_end())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes() {
        assert_eq!(exit_code(&Error::Checksum { stored: 1, computed: 2 }), EXIT_CHECKSUM);
        assert_eq!(exit_code(&Error::Version { found: 9, expected: 1 }), EXIT_INCOMPATIBLE);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), EXIT_INCOMPATIBLE);
        assert_eq!(exit_code(&Error::Truncated("x".into())), EXIT_INPUT);
    }

    #[test]
    fn usage_errors_exit_with_one() {
        let mut out = Vec::new();
        assert_eq!(run(["codec", "encode", "--input", "x.ppm"], &mut out), EXIT_INPUT);
        assert_eq!(run(["codec", "frobnicate"], &mut out), EXIT_INPUT);
    }

    #[test]
    fn per_image_path_sits_beside_output() {
        assert_eq!(per_image_path(Path::new("/tmp/rd.csv")), PathBuf::from("/tmp/rd_images.csv"));
    }
}
