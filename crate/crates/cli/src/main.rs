//! `mce`: data generation, training, evaluation, ablations, gradient checks
//! and single-episode prediction.
//!
//! Any config key can be overridden on the command line as
//! `--section.key=value` (for example `--optim.lr=0.01`, `--seed=3`).
//! Exit codes: 0 success, 1 usage or config error, 2 IO or file-format
//! error, 3 numeric failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mce_core::ablation::{self, AblationPlan};
use mce_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mce_core::data::{class_name, generate_dataset, Dataset};
use mce_core::episode::{evaluation_episodes, split_folds, test_pool};
use mce_core::harness::{evaluate, mask_bits, FeatureCache, Predictor};
use mce_core::metrics::{Confusion, MetricsReport};
use mce_core::model::{EpisodeView, ImageInput};
use mce_core::suite::{gradient_suite, TOLERANCE};
use mce_core::train::{train, write_loss_csv};
use mce_core::{pnm, MceError, MceModel, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "mce",
    version,
    about = "Few-shot segmentation with masked cross-image encoding",
    after_help = "Config keys may be overridden as --section.key=value, e.g. --optim.lr=0.01.\n\
                  Exit codes: 0 ok, 1 usage/config, 2 IO/format, 3 numeric failure."
)]
struct Cli {
    /// TOML run configuration; absent keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Evaluation worker threads (0 = all cores); overrides protocol.jobs.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset as PPM images and PGM masks plus index.csv.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one test episode of the configured fold as an episode directory.
    Episode {
        #[arg(long)]
        out: PathBuf,
        /// Position in the fold's evaluation episode list.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Train on the configured fold; writes checkpoint.mcec and loss.csv.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (or the ground-truth oracle) on the test classes.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Score the ground-truth masks instead of a model.
        #[arg(long)]
        oracle: bool,
        /// Metrics CSV path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the ablation variants on every fold and seed.
    Ablate {
        #[arg(long, value_enum, default_value_t = Grid::Core)]
        grid: Grid,
        /// Also evaluate the fusion variant at these shot counts.
        #[arg(long, value_delimiter = ',')]
        extra_shots: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op and the end-to-end loss.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Segment the query of an episode directory; writes three image files.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episode_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Grid {
    /// Full model, single-branch outputs, single-component removals, baseline.
    Core,
    /// Every output × similarity × level combination plus the baseline.
    Full,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Io(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Io(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<MceError> for Failure {
    fn from(e: MceError) -> Self {
        let msg = e.to_string();
        match e {
            MceError::Config(_)
            | MceError::Contract { .. }
            | MceError::InsufficientSamples { .. } => Failure::Usage(msg),
            MceError::Io { .. }
            | MceError::BadMagic
            | MceError::Version { .. }
            | MceError::Truncated
            | MceError::Checksum { .. }
            | MceError::CheckpointMismatch(_)
            | MceError::Image { .. } => Failure::Io(msg),
            MceError::Divergence { .. } | MceError::Tensor(_) => Failure::Numeric(msg),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

/// Splits `--a.b=value` and `--seed=value` config overrides from the
/// arguments clap should see.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for (i, a) in args.into_iter().enumerate() {
        let parsed = a
            .strip_prefix("--")
            .and_then(|s| s.split_once('='))
            .filter(|(k, _)| i > 0 && (k.contains('.') || *k == "seed"));
        match parsed {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => rest.push(a),
        }
    }
    (rest, overrides)
}

fn load_config(
    path: Option<&Path>,
    base: Option<&str>,
    overrides: &[(String, String)],
    jobs: Option<usize>,
) -> CliResult<RunConfig> {
    let text = match (path, base) {
        (Some(p), _) => fs::read_to_string(p).map_err(|e| io_err(p, e))?,
        (None, Some(b)) => b.to_string(),
        (None, None) => String::new(),
    };
    let mut overrides = overrides.to_vec();
    if let Some(j) = jobs {
        overrides.push(("protocol.jobs".into(), j.to_string()));
    }
    Ok(RunConfig::from_toml_with_overrides(&text, &overrides)?)
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    Ok(generate_dataset(
        &cfg.dataset,
        cfg.protocol.n_classes,
        cfg.seed,
    )?)
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let data = dataset(cfg)?;
    create_dir(out)?;
    let mut index = String::from("index,class_id,class,image,mask,present\n");
    let mut counters = vec![0usize; cfg.protocol.n_classes];
    for (i, s) in data.samples.iter().enumerate() {
        let class = class_name(s.class_id);
        let dir = out.join(&class);
        create_dir(&dir)?;
        let n = counters[s.class_id];
        counters[s.class_id] += 1;
        let image = format!("{class}/{n:04}.ppm");
        let mask = format!("{class}/{n:04}_mask.pgm");
        pnm::write_ppm(&out.join(&image), &s.image)?;
        pnm::write_pgm(&out.join(&mask), &s.mask)?;
        let present: Vec<String> = s.present.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(
            index,
            "{i},{},{class},{image},{mask},{}",
            s.class_id,
            present.join(";")
        );
    }
    write_text(&out.join("index.csv"), &index)?;
    eprintln!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

fn cmd_episode(cfg: &RunConfig, out: &Path, index: usize) -> CliResult<()> {
    let data = dataset(cfg)?;
    let split = &split_folds(cfg.protocol.n_classes, cfg.protocol.n_folds)?[cfg.protocol.fold];
    let episodes = evaluation_episodes(
        &test_pool(&data, split),
        cfg.protocol.shots,
        index + 1,
        cfg.seed,
        split.fold,
    )?;
    let e = &episodes[index];
    create_dir(out)?;
    for (k, &i) in e.support.iter().enumerate() {
        pnm::write_ppm(
            &out.join(format!("support_{k}.ppm")),
            &data.samples[i].image,
        )?;
        pnm::write_pgm(
            &out.join(format!("support_{k}_mask.pgm")),
            &data.samples[i].mask,
        )?;
    }
    pnm::write_ppm(&out.join("query.ppm"), &data.samples[e.query].image)?;
    pnm::write_pgm(&out.join("query_mask.pgm"), &data.samples[e.query].mask)?;
    eprintln!(
        "episode {index}: class {} with {} support image(s)",
        class_name(e.class_id),
        e.support.len()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let data = dataset(cfg)?;
    let split = &split_folds(cfg.protocol.n_classes, cfg.protocol.n_folds)?[cfg.protocol.fold];
    let mut model = MceModel::new(&cfg.model, cfg.seed)?;
    let cache = if cfg.model.backbone.frozen {
        Some(FeatureCache::build(&model, &data)?)
    } else {
        None
    };
    let every = (cfg.optim.iterations / 20).max(1);
    let curve = train(
        &mut model,
        &data,
        cache.as_ref(),
        split,
        &cfg.optim,
        cfg.protocol.shots,
        cfg.seed,
        |it, loss| {
            if it % every == 0 || it + 1 == cfg.optim.iterations {
                eprintln!("iteration {it:>6}  loss {loss:.5}");
            }
        },
    )?;
    create_dir(out)?;
    write_loss_csv(&out.join("loss.csv"), &curve)?;
    save_checkpoint(
        &Checkpoint::from_model(&model, cfg, cfg.seed),
        &out.join("checkpoint.mcec"),
    )?;
    eprintln!("wrote {}", out.join("checkpoint.mcec").display());
    Ok(())
}

fn metrics_csv(cfg: &RunConfig, report: &MetricsReport) -> String {
    let per_class: Vec<String> = report
        .per_class_iou
        .iter()
        .map(|(c, v)| format!("{c}:{v:.6}"))
        .collect();
    format!(
        "fold,seed,shots,episodes,miou,fbiou,per_class_iou\n{},{},{},{},{:.6},{:.6},{}\n",
        cfg.protocol.fold,
        report.seed,
        cfg.protocol.shots,
        report.episodes,
        report.miou,
        report.fbiou,
        per_class.join(";")
    )
}

fn emit(text: &str, out: Option<&Path>) -> CliResult<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_eval(
    cli: &Cli,
    overrides: &[(String, String)],
    checkpoint: Option<&Path>,
    oracle: bool,
    out: Option<&Path>,
) -> CliResult<()> {
    let (cfg, model) = match (oracle, checkpoint) {
        (false, Some(path)) => {
            let ckpt = load_checkpoint(path)?;
            let stored = ckpt.config.clone();
            let (_, model) = ckpt.into_model()?;
            // The stored config is the base unless --config replaces it.
            let cfg = load_config(cli.config.as_deref(), Some(&stored), overrides, cli.jobs)?;
            (cfg, Some(model))
        }
        _ => (
            load_config(cli.config.as_deref(), None, overrides, cli.jobs)?,
            None,
        ),
    };
    let data = dataset(&cfg)?;
    let split = &split_folds(cfg.protocol.n_classes, cfg.protocol.n_folds)?[cfg.protocol.fold];
    let (predictor, cache) = match &model {
        Some(m) if m.cfg.backbone.frozen => {
            (Predictor::Model(m), Some(FeatureCache::build(m, &data)?))
        }
        Some(m) => (Predictor::Model(m), None),
        None => (Predictor::GroundTruth, None),
    };
    let report = evaluate(
        predictor,
        &data,
        cache.as_ref(),
        split,
        cfg.protocol.shots,
        cfg.protocol.eval_episodes,
        cfg.seed,
        cfg.protocol.jobs,
    )?;
    emit(&metrics_csv(&cfg, &report), out)
}

fn cmd_ablate(
    cfg: &RunConfig,
    grid: Grid,
    extra_shots: &[usize],
    out: Option<&Path>,
) -> CliResult<()> {
    let mut plan = AblationPlan::full(cfg);
    if let Grid::Full = grid {
        plan.variants = ablation::full_grid();
    }
    if !extra_shots.is_empty() {
        plan.extra_shots
            .insert("fusion".into(), extra_shots.to_vec());
    }
    let runs = ablation::run_ablations(cfg, &plan, |r| {
        eprintln!(
            "{:>24} fold {} seed {} {}-shot  mIoU {:.4}  FB-IoU {:.4}",
            r.variant, r.fold, r.seed, r.shots, r.miou, r.fbiou
        );
    })?;
    let summary = ablation::summarize(&runs);
    emit(&ablation::to_csv(&runs, &summary), out)
}

fn cmd_gradcheck(instances: usize, seed: u64) -> CliResult<()> {
    let checks = gradient_suite(instances, seed)?;
    let mut failed = Vec::new();
    for c in &checks {
        let ok = c.max_rel_error <= TOLERANCE;
        println!(
            "{:<24} {:>10.3e}  {}",
            c.op,
            c.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(c.op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "relative error above {TOLERANCE:e} for {failed:?}"
        )))
    }
}

fn cmd_predict(checkpoint: &Path, episode_dir: &Path, out: &Path) -> CliResult<()> {
    let (_, model) = load_checkpoint(checkpoint)?.into_model()?;
    let mut supports = Vec::new();
    for k in 0.. {
        let image = episode_dir.join(format!("support_{k}.ppm"));
        if !image.exists() {
            break;
        }
        let mask = pnm::read_pgm_mask(&episode_dir.join(format!("support_{k}_mask.pgm")))?;
        supports.push((pnm::read_ppm(&image)?, mask));
    }
    if supports.is_empty() {
        return Err(Failure::Usage(format!(
            "{}: no support_0.ppm found",
            episode_dir.display()
        )));
    }
    let query = pnm::read_ppm(&episode_dir.join("query.ppm"))?;
    let truth = pnm::read_pgm_mask(&episode_dir.join("query_mask.pgm"))?;
    let view = EpisodeView {
        supports: supports
            .iter()
            .map(|(i, m)| (ImageInput::Raw(i), m))
            .collect(),
        query: ImageInput::Raw(&query),
    };
    let pred = model.predict(&view)?;
    create_dir(out)?;
    pnm::write_ppm(&out.join("query.ppm"), &query)?;
    pnm::write_pgm(&out.join("ground_truth.pgm"), &truth)?;
    pnm::write_pgm(&out.join("prediction.pgm"), &pred.mask)?;
    let c = Confusion::from_masks(&pred.mask_bits(), &mask_bits(&truth));
    println!("foreground IoU {:.4}", c.iou_fg());
    Ok(())
}

fn run(cli: &Cli, overrides: &[(String, String)]) -> CliResult<()> {
    let config = || load_config(cli.config.as_deref(), None, overrides, cli.jobs);
    match &cli.command {
        Command::GenData { out } => cmd_gen_data(&config()?, out),
        Command::Episode { out, index } => cmd_episode(&config()?, out, *index),
        Command::Train { out } => cmd_train(&config()?, out),
        Command::Eval {
            checkpoint,
            oracle,
            out,
        } => cmd_eval(
            cli,
            overrides,
            checkpoint.as_deref(),
            *oracle,
            out.as_deref(),
        ),
        Command::Ablate {
            grid,
            extra_shots,
            out,
        } => cmd_ablate(&config()?, *grid, extra_shots, out.as_deref()),
        Command::Gradcheck { instances, seed } => cmd_gradcheck(*instances, *seed),
        Command::Predict {
            checkpoint,
            episode_dir,
            out,
        } => cmd_predict(checkpoint, episode_dir, out),
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
