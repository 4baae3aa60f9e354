//! Command-line driver: dataset synthesis, paired training runs, image
//! generation, spectral analysis, detector training/evaluation, and a
//! consolidated variant-comparison report.
//!
//! Every command resolves its settings from an optional JSON config file
//! plus flag overrides (flags win), writes the fully resolved config next to
//! its outputs, prints a one-line JSON summary on stdout, and reports every
//! failure as a JSON object on stderr with a nonzero exit code.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use gan_forensics::data::{
    load_image, save_image, synth_dataset, write_dataset, ImageBuffer, SyntheticDataset,
    SyntheticSpec,
};
use gan_forensics::forensics::{
    artifact_report, evaluate, log_spectrum, spectrum_1d_to_csv, spectrum_2d_to_csv,
    spectrum_2d_to_pgm, train_detector, DetectionReport, DetectorConfig, DetectorModel,
    DEFAULT_PEAK_PROMINENCE,
};
use gan_forensics::model::{
    losses_to_csv, Checkpoint, GeneratorConfig, TrainSession, TrainingConfig, LOSS_CSV_HEADER,
};

// ── configuration ───────────────────────────────────────────────────────

/// One run's full settings. Any field may be omitted in the JSON file (the
/// default fills in); unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    /// Directory receiving all artifacts of this run.
    output_dir: PathBuf,
    /// Master seed; when set it overrides both `dataset.seed` and
    /// `training.rng_seed` so one number reproduces the whole run.
    seed: Option<u64>,
    /// Load an existing dataset directory (trainA/trainB/testA/testB)
    /// instead of synthesizing from `dataset`.
    data_dir: Option<PathBuf>,
    dataset: SyntheticSpec,
    generator: GeneratorConfig,
    training: TrainingConfig,
    detector: DetectorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("run"),
            seed: None,
            data_dir: None,
            dataset: SyntheticSpec::default(),
            generator: GeneratorConfig::default(),
            training: TrainingConfig::default(),
            detector: DetectorConfig::default(),
        }
    }
}

/// Shared `--config` + override flags. File values load first, then each
/// present flag replaces the corresponding field.
#[derive(Debug, Args)]
struct ConfigOpts {
    /// JSON run-configuration file; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Training step count (overrides `training.total_steps`).
    #[arg(long)]
    steps: Option<u64>,
    /// Image side length (overrides `dataset.image_size` and
    /// `generator.image_size`).
    #[arg(long)]
    image_size: Option<usize>,
}

impl ConfigOpts {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config: RunConfig = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            config.seed = Some(seed);
        }
        if let Some(steps) = self.steps {
            config.training.total_steps = steps;
        }
        if let Some(size) = self.image_size {
            config.dataset.image_size = size;
            config.generator.image_size = size;
        }
        if let Some(seed) = config.seed {
            config.dataset.seed = seed;
            config.training.rng_seed = seed;
        }
        Ok(config)
    }
}

fn write_resolved_config(config: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    write_json(&dir.join("config.resolved.json"), config)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).context("serializing JSON")?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

// ── command tree ────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "gan-forensics",
    about = "Artifact-free image translation and spectrum-based fake-image forensics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the two-domain blob dataset onto disk.
    Synth {
        #[command(flatten)]
        cfg: ConfigOpts,
    },
    /// Train one generator variant; writes a checkpoint and a loss CSV.
    Train {
        #[command(flatten)]
        cfg: ConfigOpts,
        /// Which resampling layers the generators use.
        #[arg(long, value_enum)]
        variant: Variant,
        /// Resume from an existing checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate a directory of images with a trained checkpoint.
    Generate {
        /// Checkpoint file produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of input PNG/PPM images.
        #[arg(long)]
        input: PathBuf,
        /// Directory receiving the translated images.
        #[arg(long)]
        out: PathBuf,
        /// Translation direction: domain A→B or B→A.
        #[arg(long, value_enum, default_value_t = Direction::Ab)]
        direction: Direction,
    },
    /// Export spectra (PGM + CSV) and artifact reports for images.
    Spectrum {
        /// One image file or a directory of images.
        #[arg(long)]
        input: PathBuf,
        /// Directory receiving per-image exports and summary.json.
        #[arg(long)]
        out: PathBuf,
        /// Peak-prominence threshold for reported spectral peaks.
        #[arg(long, default_value_t = DEFAULT_PEAK_PROMINENCE)]
        prominence: f64,
    },
    /// Train or evaluate the spectrum-feature fake detector.
    Detect {
        #[command(subcommand)]
        action: DetectAction,
    },
    /// Consolidate one run directory into a variant-comparison report.
    Report {
        /// Run directory with per-variant losses, detection reports, and
        /// spectrum summaries (see layout in the README).
        #[arg(long)]
        run: PathBuf,
        /// Output basename; writes <out>.md and <out>.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    Conventional,
    ArtifactFree,
}

impl Variant {
    fn dir_name(self) -> &'static str {
        match self {
            Variant::Conventional => "conventional",
            Variant::ArtifactFree => "artifact_free",
        }
    }

    fn artifact_free(self) -> bool {
        self == Variant::ArtifactFree
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Direction {
    /// Translate domain A images to domain B.
    Ab,
    /// Translate domain B images to domain A.
    Ba,
}

#[derive(Subcommand)]
enum DetectAction {
    /// Fit the logistic-regression detector on real and fake directories.
    Train {
        #[command(flatten)]
        cfg: ConfigOpts,
        /// Directory of real images.
        #[arg(long)]
        real: PathBuf,
        /// Directory of fake images.
        #[arg(long)]
        fake: PathBuf,
        /// Output path for the detector model JSON.
        #[arg(long)]
        model_out: PathBuf,
    },
    /// Score real and fake directories with a trained detector.
    Eval {
        /// Directory of real images.
        #[arg(long)]
        real: PathBuf,
        /// Directory of fake images.
        #[arg(long)]
        fake: PathBuf,
        /// Detector model JSON from `detect train`.
        #[arg(long)]
        model: PathBuf,
        /// Output path for the detection report JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

// ── shared helpers ──────────────────────────────────────────────────────

/// Lists the image files in a directory in lexicographic order, keeping each
/// file's stem for naming derived outputs.
fn list_image_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut files = Vec::new();
    let entries =
        std::fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
            .unwrap_or(false);
        if path.is_file() && is_image {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .with_context(|| format!("non-UTF-8 file name {}", path.display()))?
                .to_string();
            files.push((stem, path));
        }
    }
    files.sort();
    if files.is_empty() {
        bail!("no PNG/PPM images in {}", dir.display());
    }
    Ok(files)
}

fn load_images(dir: &Path) -> Result<Vec<ImageBuffer>> {
    list_image_files(dir)?
        .into_iter()
        .map(|(_, path)| {
            load_image(&path).with_context(|| format!("loading {}", path.display()))
        })
        .collect()
}

/// Loads the four dataset splits either from disk or by synthesizing.
fn obtain_dataset(config: &RunConfig) -> Result<SyntheticDataset> {
    match &config.data_dir {
        Some(root) => Ok(SyntheticDataset {
            train_a: load_images(&root.join("trainA"))?,
            train_b: load_images(&root.join("trainB"))?,
            test_a: load_images(&root.join("testA"))?,
            test_b: load_images(&root.join("testB"))?,
        }),
        None => Ok(synth_dataset(&config.dataset)?),
    }
}

// ── commands ────────────────────────────────────────────────────────────

fn cmd_synth(cfg: &ConfigOpts) -> Result<serde_json::Value> {
    let config = cfg.resolve()?;
    let dataset = synth_dataset(&config.dataset).context("synthesizing dataset")?;
    let root = config.output_dir.join("dataset");
    write_dataset(&dataset, &root).context("writing dataset")?;
    write_resolved_config(&config, &config.output_dir)?;
    Ok(serde_json::json!({
        "command": "synth",
        "dataset_dir": root,
        "n_train": config.dataset.n_train,
        "n_test": config.dataset.n_test,
        "image_size": config.dataset.image_size,
    }))
}

fn cmd_train(cfg: &ConfigOpts, variant: Variant, resume: Option<&Path>) -> Result<serde_json::Value> {
    let mut config = cfg.resolve()?;
    config.generator.artifact_free = variant.artifact_free();
    let dataset = obtain_dataset(&config)?;
    let out = config.output_dir.join(variant.dir_name());
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))?;

    let mut session = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            if ckpt.generator_config.artifact_free != variant.artifact_free() {
                bail!(
                    "checkpoint {} holds the {} variant, but --variant {} was requested",
                    path.display(),
                    if ckpt.generator_config.artifact_free { "artifact-free" } else { "conventional" },
                    variant.dir_name()
                );
            }
            let mut session = TrainSession::restore(ckpt).context("restoring session")?;
            // the step target is a schedule knob: the resolved config wins
            session.set_total_steps(config.training.total_steps);
            session
        }
        None => TrainSession::new(config.generator.clone(), config.training.clone())
            .context("initializing session")?,
    };

    let total = session.training_config().total_steps;
    let remaining = total.saturating_sub(session.step_count());
    session
        .run(&dataset.train_a, &dataset.train_b, remaining)
        .context("training")?;

    let losses_path = out.join("losses.csv");
    std::fs::write(&losses_path, losses_to_csv(session.history()))
        .with_context(|| format!("writing {}", losses_path.display()))?;
    let ckpt_path = out.join("checkpoint.json");
    session.checkpoint().save(&ckpt_path).context("saving checkpoint")?;
    write_resolved_config(&config, &config.output_dir)?;

    let last = session.history().last().copied();
    Ok(serde_json::json!({
        "command": "train",
        "variant": variant.dir_name(),
        "steps": session.step_count(),
        "checkpoint": ckpt_path,
        "losses_csv": losses_path,
        "final_adv_d": last.map(|r| r.adv_d),
        "final_adv_g": last.map(|r| r.adv_g),
        "final_cyc": last.map(|r| r.cyc),
    }))
}

fn cmd_generate(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    direction: Direction,
) -> Result<serde_json::Value> {
    let ckpt = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let session = TrainSession::restore(ckpt).context("restoring session")?;
    let generator = match direction {
        Direction::Ab => &session.model.g_ab,
        Direction::Ba => &session.model.g_ba,
    };

    let files = list_image_files(input)?;
    let images: Vec<ImageBuffer> = files
        .iter()
        .map(|(_, path)| load_image(path).with_context(|| format!("loading {}", path.display())))
        .collect::<Result<_>>()?;
    let fakes = generator.generate(&images).context("generating")?;

    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    for ((stem, _), fake) in files.iter().zip(&fakes) {
        let path = out.join(format!("{stem}.png"));
        save_image(fake, &path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(serde_json::json!({
        "command": "generate",
        "direction": match direction { Direction::Ab => "ab", Direction::Ba => "ba" },
        "n_images": fakes.len(),
        "output_dir": out,
    }))
}

fn cmd_spectrum(input: &Path, out: &Path, prominence: f64) -> Result<serde_json::Value> {
    let files = if input.is_dir() {
        list_image_files(input)?
    } else {
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("non-UTF-8 file name {}", input.display()))?
            .to_string();
        vec![(stem, input.to_path_buf())]
    };
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;

    let mut per_image = Vec::new();
    let mut ratio_sum = 0.0;
    for (stem, path) in &files {
        let image = load_image(path).with_context(|| format!("loading {}", path.display()))?;
        let profile = log_spectrum(&image).with_context(|| format!("analyzing {stem}"))?;
        let report = artifact_report(&image, prominence)?;
        std::fs::write(out.join(format!("{stem}.spectrum.pgm")), spectrum_2d_to_pgm(&profile))?;
        std::fs::write(out.join(format!("{stem}.spectrum2d.csv")), spectrum_2d_to_csv(&profile))?;
        std::fs::write(out.join(format!("{stem}.spectrum1d.csv")), spectrum_1d_to_csv(&profile))?;
        write_json(&out.join(format!("{stem}.artifact.json")), &report)?;
        ratio_sum += report.nyquist_energy_ratio;
        per_image.push(serde_json::json!({
            "name": stem,
            "nyquist_energy_ratio": report.nyquist_energy_ratio,
            "n_peaks": report.peak_frequencies.len(),
        }));
    }
    let summary = serde_json::json!({
        "n_images": files.len(),
        "mean_nyquist_energy_ratio": ratio_sum / files.len() as f64,
        "per_image": per_image,
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(serde_json::json!({
        "command": "spectrum",
        "n_images": files.len(),
        "mean_nyquist_energy_ratio": ratio_sum / files.len() as f64,
        "output_dir": out,
    }))
}

fn cmd_detect_train(
    cfg: &ConfigOpts,
    real: &Path,
    fake: &Path,
    model_out: &Path,
) -> Result<serde_json::Value> {
    let config = cfg.resolve()?;
    let reals = load_images(real).context("loading real images")?;
    let fakes = load_images(fake).context("loading fake images")?;
    let (model, train_acc) =
        train_detector(&reals, &fakes, &config.detector).context("training detector")?;
    if let Some(parent) = model_out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_json(&model_out.to_path_buf(), &model)?;
    Ok(serde_json::json!({
        "command": "detect-train",
        "n_real": reals.len(),
        "n_fake": fakes.len(),
        "training_accuracy": train_acc,
        "model": model_out,
    }))
}

fn cmd_detect_eval(
    real: &Path,
    fake: &Path,
    model_path: &Path,
    out: Option<&Path>,
) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(model_path)
        .with_context(|| format!("reading model {}", model_path.display()))?;
    let model: DetectorModel =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", model_path.display()))?;
    let reals = load_images(real).context("loading real images")?;
    let fakes = load_images(fake).context("loading fake images")?;
    let report = evaluate(&model, &reals, &fakes).context("evaluating detector")?;
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        write_json(&path.to_path_buf(), &report)?;
    }
    Ok(serde_json::json!({
        "command": "detect-eval",
        "acc": report.acc,
        "acc_fake": report.acc_fake,
        "n_tn": report.n_tn,
        "n_tp": report.n_tp,
        "n_qf": report.n_qf,
        "n_qr": report.n_qr,
        "report": out,
    }))
}

/// Fixed column order of the consolidated report CSV.
const REPORT_CSV_HEADER: &str =
    "variant,steps,final_cyc,mean_nyquist_energy_ratio,acc,acc_fake,n_tn,n_fp,n_tp,n_fn";

fn cmd_report(run: &Path, out: Option<&Path>) -> Result<serde_json::Value> {
    let variants = ["conventional", "artifact_free"];
    let mut csv = String::from(REPORT_CSV_HEADER);
    csv.push('\n');
    let mut md = String::from(
        "# Variant comparison\n\n\
         | variant | steps | final cycle loss | mean Nyquist ratio | ACC | ACC(Fake) |\n\
         |---|---|---|---|---|---|\n",
    );

    for variant in variants {
        let losses_path = run.join(variant).join("losses.csv");
        let losses = std::fs::read_to_string(&losses_path)
            .with_context(|| format!("missing loss CSV {}", losses_path.display()))?;
        let mut lines = losses.lines();
        if lines.next() != Some(LOSS_CSV_HEADER) {
            bail!("{} does not start with `{LOSS_CSV_HEADER}`", losses_path.display());
        }
        let last = lines.last().with_context(|| format!("{} has no rows", losses_path.display()))?;
        let fields: Vec<&str> = last.split(',').collect();
        if fields.len() != 4 {
            bail!("malformed loss row in {}: {last}", losses_path.display());
        }
        let steps = fields[0];
        let final_cyc: f64 = fields[3]
            .parse()
            .with_context(|| format!("bad cyc value in {}", losses_path.display()))?;

        let summary_path = run.join("spectrum").join(variant).join("summary.json");
        let summary: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(&summary_path)
                .with_context(|| format!("missing spectrum summary {}", summary_path.display()))?,
        )
        .with_context(|| format!("parsing {}", summary_path.display()))?;
        let mean_ratio = summary
            .get("mean_nyquist_energy_ratio")
            .and_then(|v| v.as_f64())
            .with_context(|| format!("no mean ratio in {}", summary_path.display()))?;

        let report_path = run.join("detect").join(format!("{variant}.report.json"));
        let report: DetectionReport = serde_json::from_str(
            &std::fs::read_to_string(&report_path)
                .with_context(|| format!("missing detection report {}", report_path.display()))?,
        )
        .with_context(|| format!("parsing {}", report_path.display()))?;

        csv.push_str(&format!(
            "{variant},{steps},{final_cyc},{mean_ratio},{},{},{},{},{},{}\n",
            report.acc, report.acc_fake, report.n_tn, report.n_fp, report.n_tp, report.n_fn
        ));
        md.push_str(&format!(
            "| {variant} | {steps} | {final_cyc:.4} | {mean_ratio:.4} | {:.2} | {:.2} |\n",
            report.acc, report.acc_fake
        ));
    }

    let base = out.map(Path::to_path_buf).unwrap_or_else(|| run.join("report"));
    if let Some(parent) = base.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let csv_path = base.with_extension("csv");
    let md_path = base.with_extension("md");
    std::fs::write(&csv_path, &csv).with_context(|| format!("writing {}", csv_path.display()))?;
    std::fs::write(&md_path, &md).with_context(|| format!("writing {}", md_path.display()))?;
    Ok(serde_json::json!({
        "command": "report",
        "csv": csv_path,
        "markdown": md_path,
    }))
}

// ── entry point ─────────────────────────────────────────────────────────

fn run(cli: Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::Synth { cfg } => cmd_synth(cfg),
        Command::Train { cfg, variant, resume } => cmd_train(cfg, *variant, resume.as_deref()),
        Command::Generate { checkpoint, input, out, direction } => {
            cmd_generate(checkpoint, input, out, *direction)
        }
        Command::Spectrum { input, out, prominence } => cmd_spectrum(input, out, *prominence),
        Command::Detect { action } => match action {
            DetectAction::Train { cfg, real, fake, model_out } => {
                cmd_detect_train(cfg, real, fake, model_out)
            }
            DetectAction::Eval { real, fake, model, out } => {
                cmd_detect_eval(real, fake, model, out.as_deref())
            }
        },
        Command::Report { run, out } => cmd_report(run, out.as_deref()),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            // argument errors also go out as machine-readable JSON
            let payload = serde_json::json!({ "error": e.to_string() });
            eprintln!("{payload}");
            std::process::exit(2);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            std::process::exit(0);
        }
    };
    match run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            let payload = serde_json::json!({ "error": format!("{e:#}") });
            eprintln!("{payload}");
            std::process::exit(1);
        }
    }
}
