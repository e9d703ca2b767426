//! `probe-world`: data generation, pre-training, fine-tuning, evaluation
//! and ablation sweeps.
//!
//! Settings come from built-in desk defaults, then `--config <file.toml>`,
//! then command-line flags, each overriding the previous layer.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use probe_world::dataset::Split;
use probe_world::error::{Error, Result};
use probe_world::experiment::{
    parse_summary_csv, record_config, run_ablation, variants, write_generated, write_plot, RunConfig, SplitStores,
    PLOT_FILE, SUMMARY_FILE,
};
use probe_world::guidance::{
    compare_reports, evaluate_mae, finetune, format_changes, load_guidance, oracle_report, save_guidance, MaeReport,
};
use probe_world::pretrain::{list_checkpoints, run_pretrain, Mode, RunOptions};

// Training allocates large short-lived matrices, which the system allocator
// keeps handing back to the OS.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "probe-world", version, about = "Pose-conditioned world-model pre-training for probe guidance")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration (defaults to the built-in desk config).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing output instead of refusing or resuming.
    #[arg(long, global = true)]
    force: bool,
    /// Dataset directory (defaults to `<output_root>/data`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate phantoms and scans and write the dataset.
    GenData,
    /// Pre-train the world model; resumes from the latest checkpoint.
    Pretrain {
        /// joint, 2d or 3d (overrides the config).
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Fine-tune a guidance model, from scratch unless `--from` is given.
    Finetune {
        /// Pre-training checkpoint, or a run directory (latest checkpoint).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate a fine-tuned model on the test split.
    Eval {
        /// Fine-tuned model directory.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Score the labels themselves (all-zero MAE).
        #[arg(long)]
        oracle: bool,
        /// Print per-axis change of the second report relative to the first.
        #[arg(long, num_args = 2, value_names = ["BASELINE", "VARIANT"])]
        compare: Option<Vec<PathBuf>>,
    },
    /// Joint / 2d / 3d pre-training against a from-scratch baseline.
    Ablate,
    /// Render the ablation figure from a summary CSV.
    Plot {
        /// Summary CSV (defaults to `<output_root>/ablation/summary.csv`).
        #[arg(long)]
        from: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default();
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = c.seed {
        cfg.data.seed = s;
        cfg.pretrain.seed = s;
        cfg.guidance.seed = s;
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_dir(c: &Common, cfg: &RunConfig) -> PathBuf {
    c.data.clone().unwrap_or_else(|| cfg.data_dir())
}

fn is_nonempty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Refuses a non-empty `dir` unless forced, in which case it is cleared.
fn prepare_fresh(dir: &Path, force: bool) -> Result<()> {
    if is_nonempty(dir) {
        if !force {
            return Err(Error::InvalidArgument(format!(
                "{} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn load_stores(c: &Common, cfg: &RunConfig) -> Result<SplitStores> {
    let dir = data_dir(c, cfg);
    if !dir.exists() {
        return Err(Error::InvalidArgument(format!(
            "no dataset at {} (run gen-data first)",
            dir.display()
        )));
    }
    SplitStores::load(&dir, cfg.pretrain.encoder.patch_size)
}

/// A checkpoint directory, or the latest checkpoint inside a run directory.
fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if !path.exists() {
        return Err(Error::CheckpointMismatch(format!("{} does not exist", path.display())));
    }
    Ok(match list_checkpoints(path)?.pop() {
        Some((_, p)) => p,
        None => path.to_path_buf(),
    })
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::GenData => gen_data(c),
        Command::Pretrain { mode } => pretrain(c, mode),
        Command::Finetune { from } => finetune_cmd(c, from),
        Command::Eval { from, oracle, compare } => eval(c, from, oracle, compare),
        Command::Ablate => ablate(c),
        Command::Plot { from } => plot(c, from),
    }
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let dir = c.out.clone().unwrap_or_else(|| data_dir(c, &cfg));
    prepare_fresh(&dir, c.force)?;
    let m = write_generated(&cfg.data, &dir)?;
    println!(
        "dataset {}: {} train scans ({} frames), {} test scans ({} frames), {}x{} images",
        dir.display(),
        m.split_scans(Split::Train).count(),
        m.frames_in(Split::Train),
        m.split_scans(Split::Test).count(),
        m.frames_in(Split::Test),
        m.image_height,
        m.image_width
    );
    Ok(())
}

fn pretrain(c: &Common, mode: Option<Mode>) -> Result<()> {
    let mut cfg = load_config(c)?;
    if let Some(m) = mode {
        cfg.pretrain.mode = m;
    }
    let out = c.out.clone().unwrap_or_else(|| {
        cfg.output_root
            .join(format!("pretrain_{}_seed{}", cfg.pretrain.mode, cfg.pretrain.seed))
    });
    if c.force && out.exists() {
        fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    }
    let stores = load_stores(c, &cfg)?;
    record_config(&out, &cfg)?;
    let o = run_pretrain(
        &cfg.pretrain,
        &stores.train,
        &out,
        &RunOptions {
            resume: true,
            stop_after: None,
        },
    )?;
    println!(
        "pretrained {} steps ({} mode); epoch losses {:.4} -> {:.4}; checkpoint {}",
        o.final_step,
        cfg.pretrain.mode,
        o.epoch_losses.first().copied().unwrap_or(f64::NAN),
        o.epoch_losses.last().copied().unwrap_or(f64::NAN),
        o.checkpoint.display()
    );
    Ok(())
}

fn finetune_cmd(c: &Common, from: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(c)?;
    let ckpt = from.as_deref().map(resolve_checkpoint).transpose()?;
    let label = if ckpt.is_some() { "pretrained" } else { "scratch" };
    let out = c
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_root.join(format!("finetune_{label}_seed{}", cfg.guidance.seed)));
    prepare_fresh(&out, c.force)?;
    let stores = load_stores(c, &cfg)?;
    let o = finetune::<f32>(
        ckpt.as_deref(),
        &stores.train,
        &cfg.guidance,
        &cfg.pretrain.encoder,
        &cfg.pretrain.predictor,
    )?;
    save_guidance(&out, &o.model, &o.manifest)?;
    record_config(&out, &cfg)?;
    println!(
        "fine-tuned {} steps from {}; final epoch loss {:.4}; model {}",
        o.manifest.steps,
        o.manifest.init.label(),
        o.manifest.epoch_losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn print_report(r: &MaeReport) {
    print!("{}", r.to_csv());
    println!(
        "translation {:.4} mm, rotation {:.4} deg, aggregate (std-normalised) {:.4}",
        r.translation_mm, r.rotation_deg, r.aggregate
    );
}

fn eval(c: &Common, from: Option<PathBuf>, oracle: bool, compare: Option<Vec<PathBuf>>) -> Result<()> {
    if let Some(pair) = compare {
        let base = MaeReport::read_json(&pair[0])?;
        let var = MaeReport::read_json(&pair[1])?;
        print!("{}", format_changes(&compare_reports(&base, &var)?));
        return Ok(());
    }
    let cfg = load_config(c)?;
    let stores = load_stores(c, &cfg)?;
    let (report, default_out) = if oracle {
        (oracle_report(&stores.test, &cfg.guidance.planes)?, cfg.output_root.join("eval_oracle"))
    } else {
        let dir = from.ok_or_else(|| Error::InvalidArgument("eval needs --from <model dir> or --oracle".into()))?;
        if !dir.exists() {
            return Err(Error::CheckpointMismatch(format!("{} does not exist", dir.display())));
        }
        let (manifest, model) = load_guidance::<f32>(&dir)?;
        (evaluate_mae(&model, &stores.test, &manifest.config.planes, &manifest.init.label())?, dir)
    };
    let out = c.out.clone().unwrap_or(default_out);
    report.write(&out, "eval")?;
    print_report(&report);
    println!("wrote {}", out.join("eval.json").display());
    Ok(())
}

fn ablate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let out = c.out.clone().unwrap_or_else(|| cfg.output_root.join("ablation"));
    if c.force && out.exists() {
        fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    }
    let stores = load_stores(c, &cfg)?;
    let ab = run_ablation(&cfg, &stores, &out)?;
    println!("variant  rotation_deg (per seed)  mean");
    for v in variants() {
        let per: Vec<String> = ab
            .runs
            .iter()
            .map(|r| format!("{:.4}", r.reports[&v].rotation_deg))
            .collect();
        println!("{v:<8} {}  {:.4}", per.join(" "), ab.mean_over_seeds(&v, |r| r.rotation_deg)?);
    }
    println!("wrote {} and {}", out.join(SUMMARY_FILE).display(), out.join(PLOT_FILE).display());
    Ok(())
}

fn plot(c: &Common, from: Option<PathBuf>) -> Result<()> {
    let csv = match from {
        Some(p) => p,
        None => load_config(c)?.output_root.join("ablation").join(SUMMARY_FILE),
    };
    let text = fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
    let rows = parse_summary_csv(&csv, &text)?;
    let out = c
        .out
        .clone()
        .unwrap_or_else(|| csv.parent().unwrap_or(Path::new(".")).join(PLOT_FILE));
    write_plot(&out, &rows)?;
    println!("wrote {}", out.display());
    Ok(())
}
