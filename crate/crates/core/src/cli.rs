//! The `cacps` command line.
//!
//! Every configuration key is also a flag (`--beta 1.5`, `--held_out C`),
//! applied after the config file; `--set key=value` does the same. The
//! `CACPS_OUTPUT_DIR` environment variable replaces the configured output
//! directory unless a flag sets it explicitly.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure, 3 gradient check failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use clap::{Arg, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{DatasetSource, ExperimentConfig, Preset, KEYS};
use crate::data::{domain_seed, preset_domains, read_image, write_corpus, write_image, DomainTag};
use crate::error::{Error, Result};
use crate::fourier::{augment_detailed, MixConfig, MixMode};
use crate::metrics::{MetricRow, Summary};
use crate::raster::Image;
use crate::trainer::{evaluate, EpochRow, EvalRow, Trainer};
use crate::verify::{gradcheck_suite, passes, GRADCHECK_SIZE, GRADCHECK_TOLERANCE};

pub const OUTPUT_DIR_ENV: &str = "CACPS_OUTPUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

/// Keys a resumed run may change; everything else comes from the checkpoint.
const RESUME_KEYS: &[&str] = &["epochs", "output_dir", "checkpoint_every", "eval_every"];

#[derive(Parser, Debug)]
#[command(name = "cacps", version, about = "Confidence-aware cross pseudo supervision for 2-D segmentation")]
pub struct Cli {
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic 4-domain benchmark as a corpus directory.
    Synth(SynthArgs),
    /// Mix the amplitude spectrum of one image towards another's.
    Augment(AugmentArgs),
    /// Train a network pair.
    Train(TrainArgs),
    /// Score a checkpoint's ensemble on one domain.
    Eval(EvalArgs),
    /// Check every gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset when no configuration file is given.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Values given through the per-key flags, filled in after parsing.
    #[arg(skip)]
    pub keys: Vec<(String, String)>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Destination directory [default: <output_dir>/synthetic].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Image whose phase is kept.
    #[arg(long)]
    pub input: PathBuf,
    /// Image whose amplitude is blended in.
    #[arg(long)]
    pub partner: PathBuf,
    /// Output PNG (16-bit).
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value = "rectified")]
    pub mode: String,
    /// Also write amplitude and phase visualizations into this directory.
    #[arg(long)]
    pub spectra: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Continue from a checkpoint; its configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `synthetic` or a corpus path [default: the checkpoint's dataset].
    #[arg(long)]
    pub dataset: Option<String>,
    /// Domain to score [default: the checkpoint's held-out domain].
    #[arg(long)]
    pub domain: Option<String>,
    /// Per-subject CSV [default: <output_dir>/eval.csv].
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Spatial size of the check instances (even, at most 32).
    #[arg(long, default_value_t = GRADCHECK_SIZE)]
    pub size: usize,
    #[arg(long, default_value_t = GRADCHECK_TOLERANCE)]
    pub tolerance: f64,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

static HYPHENATED: LazyLock<Vec<String>> = LazyLock::new(|| {
    KEYS.iter().filter(|k| k.contains('_')).map(|k| k.replace('_', "-")).collect()
});

/// The clap command with one `--<key>` flag per configuration key on the
/// subcommands that take a configuration.
pub fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for name in ["synth", "train"] {
        cmd = cmd.mut_subcommand(name, |mut sub| {
            for &key in KEYS {
                let mut arg = Arg::new(key)
                    .long(key)
                    .value_name("VALUE")
                    .allow_negative_numbers(true)
                    .help_heading("Configuration keys");
                if let Some(alias) = HYPHENATED.iter().find(|a| a.replace('-', "_") == key) {
                    arg = arg.alias(alias.as_str());
                }
                sub = sub.arg(arg);
            }
            sub
        });
    }
    cmd
}

fn key_values(m: &ArgMatches) -> Vec<(String, String)> {
    KEYS.iter()
        .filter_map(|&k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect()
}

/// Parses arguments, exiting through clap on `--help` or usage errors.
pub fn parse<I, T>(args: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(args)?;
    let mut cli = Cli::from_arg_matches(&matches)?;
    if let Some((_, sub)) = matches.subcommand() {
        match &mut cli.command {
            Command::Synth(a) => a.cfg.keys = key_values(sub),
            Command::Train(a) => a.cfg.keys = key_values(sub),
            _ => {}
        }
    }
    Ok(cli)
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::Corpus { .. } => EXIT_INVALID,
        _ => EXIT_RUNTIME,
    }
}

/// Runs `args` (including the program name) and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match parse(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .try_init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| EXIT_OK),
        Command::Augment(a) => cmd_augment(a).map(|_| EXIT_OK),
        Command::Train(a) => cmd_train(a).map(|_| EXIT_OK),
        Command::Eval(a) => cmd_eval(a).map(|_| EXIT_OK),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn overrides(args: &ConfigArgs) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for s in &args.set {
        match s.split_once('=') {
            Some((k, v)) => out.push((k.trim().to_string(), v.trim().to_string())),
            None => bad.push(format!("--set `{s}`: expected key=value")),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Config(bad));
    }
    out.extend(args.keys.iter().cloned());
    Ok(out)
}

fn env_output_dir() -> Option<String> {
    std::env::var(OUTPUT_DIR_ENV).ok().filter(|s| !s.is_empty())
}

/// File or preset, then the output-directory variable, then flags.
pub fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let base = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::parse(&fs::read_to_string(path)?)?,
        (None, Some(p)) => {
            let preset: Preset = p.parse().map_err(|e: String| Error::Config(vec![e]))?;
            ExperimentConfig::from_preset(preset)
        }
        (None, None) => ExperimentConfig::default(),
    };
    let mut pairs = Vec::new();
    if let Some(dir) = env_output_dir() {
        pairs.push(("output_dir".to_string(), dir));
    }
    pairs.extend(overrides(args)?);
    base.with_overrides(&pairs)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf> {
    let cfg = resolve_config(&args.cfg)?;
    let DatasetSource::Synthetic {
        subjects_per_domain,
        image_size,
        seed,
    } = cfg.dataset
    else {
        return Err(Error::Config(vec!["synth needs `dataset = synthetic`".into()]));
    };
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.join("synthetic"));
    let samples = cfg.load_samples()?;
    fs::create_dir_all(&out)?;
    write_corpus(&out, &samples)?;

    let mut m = String::new();
    let _ = writeln!(m, "seed = {seed}");
    let _ = writeln!(m, "subjects_per_domain = {subjects_per_domain}");
    let _ = writeln!(m, "image_size = {image_size}");
    let _ = writeln!(m, "num_classes = {}", cfg.net.num_classes);
    let _ = writeln!(m);
    let _ = writeln!(
        m,
        "domain,intensity_bias,contrast_gamma,texture_frequency,texture_amplitude,noise_sigma,domain_seed"
    );
    for (d, spec) in preset_domains().iter().enumerate() {
        let _ = writeln!(
            m,
            "{},{},{},{},{},{},{}",
            spec.id.as_str(),
            spec.intensity_bias,
            spec.contrast_gamma,
            spec.texture_frequency,
            spec.texture_amplitude,
            spec.noise_sigma,
            domain_seed(seed, d)
        );
    }
    fs::write(out.join("manifest.txt"), m)?;
    println!("wrote {} slices to {}", samples.len(), out.display());
    Ok(out)
}

/// `log(1 + a)` scaled so the largest value maps to 1.
fn amplitude_image(amplitude: &[f64], h: usize, w: usize) -> Result<Image> {
    let logs: Vec<f64> = amplitude.iter().map(|a| a.ln_1p()).collect();
    let top = logs.iter().cloned().fold(0.0, f64::max);
    let scale = if top > 0.0 { 1.0 / top } else { 0.0 };
    Image::new(1, h, w, logs.into_iter().map(|v| v * scale).collect())
}

pub fn cmd_augment(args: &AugmentArgs) -> Result<()> {
    let x = read_image(&args.input)?;
    let partner = read_image(&args.partner)?;
    let mode: MixMode = args.mode.parse()?;
    let cfg = MixConfig {
        lambda: args.lambda,
        alpha: args.alpha,
        mode,
    };
    let out = augment_detailed(&x, &partner, &cfg)?;
    if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_image(&args.output, &out.image)?;
    if let Some(dir) = &args.spectra {
        fs::create_dir_all(dir)?;
        let (h, w) = (x.height(), x.width());
        write_image(&dir.join("amplitude_input.png"), &amplitude_image(&out.source.amplitude, h, w)?)?;
        write_image(&dir.join("amplitude_partner.png"), &amplitude_image(&out.partner.amplitude, h, w)?)?;
        write_image(&dir.join("amplitude_mixed.png"), &amplitude_image(&out.mixed_amplitude, h, w)?)?;
        let tau = std::f64::consts::TAU;
        let phase = out.source.phase.iter().map(|p| (p + std::f64::consts::PI) / tau).collect();
        write_image(&dir.join("phase_input.png"), &Image::new(1, h, w, phase)?)?;
    }
    log::info!("imaginary residue {:.3e}", out.imag_residue);
    Ok(())
}

/// `header` plus the rows of an existing file whose leading epoch is at
/// most `epoch`, so a resumed run drops rows written after its checkpoint.
fn truncated_csv(path: &Path, header: &str, epoch: u64) -> Result<String> {
    let mut out = format!("{header}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let e: Option<u64> = line.split(',').next().and_then(|f| f.parse().ok());
            if e.is_some_and(|e| e <= epoch) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).create(true).open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Trains and returns the output directory.
pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let (cfg, mut trainer, resumed) = match &args.resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            let mut pairs = Vec::new();
            if let Some(dir) = env_output_dir() {
                pairs.push(("output_dir".to_string(), dir));
            }
            pairs.extend(overrides(&args.cfg)?);
            let locked: Vec<String> = pairs
                .iter()
                .filter(|(k, _)| !RESUME_KEYS.contains(&k.as_str()))
                .map(|(k, _)| format!("`{k}` cannot change when resuming"))
                .collect();
            if !locked.is_empty() || args.cfg.config.is_some() || args.cfg.preset.is_some() {
                let mut errs = locked;
                if args.cfg.config.is_some() || args.cfg.preset.is_some() {
                    errs.push("--config and --preset cannot be combined with --resume".into());
                }
                return Err(Error::Config(errs));
            }
            let cfg = ck.config.with_overrides(&pairs)?;
            let mut trainer = ck.trainer;
            trainer.cfg.epochs = cfg.train.epochs;
            (cfg, trainer, true)
        }
        None => {
            let cfg = resolve_config(&args.cfg)?;
            let trainer = Trainer::new(cfg.train, cfg.net)?;
            (cfg, trainer, false)
        }
    };
    let samples = cfg.load_samples()?;
    let split = cfg.split(&samples)?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;

    let epochs_path = dir.join("epochs.csv");
    let evals_path = dir.join("evals.csv");
    let start = trainer.epoch;
    let (epochs_csv, evals_csv) = if resumed {
        (
            truncated_csv(&epochs_path, EpochRow::CSV_HEADER, start)?,
            truncated_csv(&evals_path, EvalRow::CSV_HEADER, start)?,
        )
    } else {
        (format!("{}\n", EpochRow::CSV_HEADER), format!("{}\n", EvalRow::CSV_HEADER))
    };
    fs::write(&epochs_path, epochs_csv)?;
    fs::write(&evals_path, evals_csv)?;
    log::info!(
        "training {} labeled + {} unlabeled slices from epoch {start} to {}",
        split.labeled_count(),
        split.train.len() - split.labeled_count(),
        cfg.train.epochs
    );

    while trainer.epoch < cfg.train.epochs {
        let row = trainer.train_epoch(&split.train)?;
        append(&epochs_path, &format!("{}\n", row.to_csv()))?;
        let e = trainer.epoch;
        if cfg.eval_every > 0 && e % cfg.eval_every == 0 {
            let (_, summary) = evaluate(&trainer.pair, &split.test)?;
            let rows: String = EvalRow::from_summary(e, &summary)
                .iter()
                .map(|r| format!("{}\n", r.to_csv()))
                .collect();
            append(&evals_path, &rows)?;
            log::info!("epoch {e} held-out mean dice {:.4}", summary.mean_dice);
        }
        if cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0 && e < cfg.train.epochs {
            checkpoint::save(&dir.join(format!("checkpoint_{e:04}.ckpt")), &cfg, &trainer)?;
        }
    }
    let last = dir.join("final.ckpt");
    checkpoint::save(&last, &cfg, &trainer)?;
    println!("trained to epoch {}; checkpoint {}", trainer.epoch, last.display());
    Ok(dir)
}

pub fn summary_csv(summary: &Summary) -> String {
    let mut s = String::from("class_id,subjects,dice_mean,dice_std,hausdorff_mean,hausdorff_std\n");
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
    for c in &summary.per_class {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            c.class_id,
            c.dice.count,
            c.dice.mean,
            c.dice.std,
            opt(c.hausdorff.map(|h| h.mean)),
            opt(c.hausdorff.map(|h| h.std))
        );
    }
    s
}

fn summary_block(summary: &Summary) -> String {
    let mut s = String::from("class  subjects  dice (mean ± std)    hausdorff (mean ± std)\n");
    for c in &summary.per_class {
        let hd = c
            .hausdorff
            .map_or_else(|| "undefined".to_string(), |h| format!("{:.3} ± {:.3}", h.mean, h.std));
        let _ = writeln!(
            s,
            "{:>5}  {:>8}  {:.4} ± {:.4}      {hd}",
            c.class_id, c.dice.count, c.dice.mean, c.dice.std
        );
    }
    let _ = write!(s, "mean dice {:.4}", summary.mean_dice);
    if let Some(h) = summary.mean_hausdorff {
        let _ = write!(s, ", mean hausdorff {h:.3}");
    }
    s
}

/// Writes `<output>` and `<output stem>_summary.csv`; returns both paths.
pub fn cmd_eval(args: &EvalArgs) -> Result<(PathBuf, PathBuf)> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let mut cfg = ck.config;
    let mut pairs = Vec::new();
    if let Some(dir) = env_output_dir() {
        pairs.push(("output_dir".to_string(), dir));
    }
    if let Some(d) = &args.dataset {
        pairs.push(("dataset".to_string(), d.clone()));
    }
    cfg = cfg.with_overrides(&pairs)?;
    let domain = DomainTag::new(args.domain.clone().unwrap_or_else(|| cfg.held_out.clone()));
    let samples: Vec<_> = cfg
        .load_samples()?
        .into_iter()
        .filter(|s| s.domain() == &domain)
        .collect();
    if samples.is_empty() {
        return Err(Error::invalid(format!("dataset has no domain `{}`", domain.as_str())));
    }
    let (rows, summary) = evaluate(&ck.trainer.pair, &samples)?;
    let out = args.output.clone().unwrap_or_else(|| cfg.output_dir.join("eval.csv"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut csv = format!("{}\n", MetricRow::CSV_HEADER);
    for r in &rows {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    fs::write(&out, csv)?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("eval");
    let summary_path = out.with_file_name(format!("{stem}_summary.csv"));
    fs::write(&summary_path, summary_csv(&summary))?;
    println!("domain {} ({} subjects)", domain.as_str(), rows.len() / summary.per_class.len().max(1));
    println!("{}", summary_block(&summary));
    Ok((out, summary_path))
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let start = std::time::Instant::now();
    let reports = gradcheck_suite(args.seed, args.size)?;
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    println!("{:<width$}  {:>8}  {:>7}  {:>14}  result", "check", "partials", "skipped", "max_rel_error");
    let mut failed = 0;
    for r in &reports {
        let ok = passes(r, args.tolerance);
        failed += usize::from(!ok);
        println!(
            "{:<width$}  {:>8}  {:>7}  {:>14.3e}  {}",
            r.name,
            r.checked,
            r.skipped,
            r.max_rel_error,
            if ok { "pass" } else { "FAIL" }
        );
    }
    println!(
        "{} of {} checks passed (tolerance {:e}, {:.1}s)",
        reports.len() - failed,
        reports.len(),
        args.tolerance,
        start.elapsed().as_secs_f64()
    );
    if let Some(path) = &args.csv {
        fs::write(path, crate::verify::report_csv(&reports, args.tolerance))?;
    }
    Ok(if failed == 0 { EXIT_OK } else { EXIT_GRADCHECK })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_flags_and_set_are_collected() {
        let cli = parse(["cacps", "train", "--beta", "0.5", "--held-out", "C", "--set", "epochs=0"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!(a.cfg.keys, vec![("beta".into(), "0.5".into()), ("held_out".into(), "C".into())]);
        let o = overrides(&a.cfg).unwrap();
        assert_eq!(o[0], ("epochs".to_string(), "0".to_string()));
    }

    #[test]
    fn unknown_flags_are_usage_errors() {
        assert!(parse(["cacps", "train", "--bogus", "1"]).is_err());
        assert!(parse(["cacps", "gradcheck", "--beta", "1"]).is_err());
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config(vec![])), EXIT_INVALID);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), EXIT_RUNTIME);
    }

    #[test]
    fn malformed_set_is_rejected() {
        let args = ConfigArgs {
            set: vec!["beta".into()],
            ..ConfigArgs::default()
        };
        assert!(matches!(resolve_config(&args), Err(Error::Config(_))));
    }
}
