//! Run configuration, dataset generation and the pre-training ablation
//! sweep (joint / 2d / 3d pre-training against a from-scratch baseline).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::config_hash;
use crate::dataset::{write_dataset, Dataset, Manifest, Split, WriteOptions};
use crate::error::{invalid, Error, Result};
use crate::guidance::{evaluate_mae, finetune, load_guidance, save_guidance, GuidanceConfig, MaeReport, AXES, UNITS};
use crate::phantom::{generate_phantom_with_spacing, generate_scan, Scan, TrajectoryConfig};
use crate::pretrain::{batch_seed, run_pretrain, FrameStore, Mode, PretrainConfig, RunOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_scans: usize,
    pub test_scans: usize,
    pub image_size: usize,
    pub volume_size: usize,
    pub voxel_spacing_mm: f64,
    pub lossless: bool,
    pub seed: u64,
    pub trajectory: TrajectoryConfig,
}

impl DataConfig {
    pub fn desk() -> Self {
        Self {
            train_scans: 8,
            test_scans: 3,
            image_size: 64,
            volume_size: 64,
            voxel_spacing_mm: 1.0,
            lossless: false,
            seed: 0,
            trajectory: TrajectoryConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_scans == 0 || self.test_scans == 0 {
            return Err(invalid!("both splits need at least one scan"));
        }
        if self.image_size == 0 {
            return Err(invalid!("image_size must be positive"));
        }
        self.trajectory
            .validate(self.volume_size as f64 * self.voxel_spacing_mm)
    }

    /// Seeds of scan `k`: one phantom (individual) and one trajectory each.
    pub fn scan_seeds(&self, k: usize) -> (u64, u64) {
        (batch_seed(self.seed, 2 * k), batch_seed(self.seed, 2 * k + 1))
    }
}

/// Simulates every scan of `cfg`, training scans first.
pub fn generate_scans(cfg: &DataConfig) -> Result<Vec<(Scan, Split)>> {
    cfg.validate()?;
    let total = cfg.train_scans + cfg.test_scans;
    (0..total)
        .map(|k| {
            let (vseed, tseed) = cfg.scan_seeds(k);
            let vol = generate_phantom_with_spacing(vseed, cfg.volume_size, cfg.voxel_spacing_mm)?;
            let scan = generate_scan(&vol, &cfg.trajectory, tseed, (cfg.image_size, cfg.image_size), k)?;
            let split = if k < cfg.train_scans { Split::Train } else { Split::Test };
            Ok((scan, split))
        })
        .collect()
}

/// Generates and writes the dataset into `root` (absent or empty).
pub fn write_generated(cfg: &DataConfig, root: &Path) -> Result<Manifest> {
    let scans = generate_scans(cfg)?;
    let refs: Vec<(&Scan, Split)> = scans.iter().map(|(s, sp)| (s, *sp)).collect();
    write_dataset(
        root,
        &refs,
        &WriteOptions {
            volume_size: cfg.volume_size,
            voxel_spacing_mm: cfg.voxel_spacing_mm,
            lossless: cfg.lossless,
        },
    )
}

/// Train and test frames of a split dataset, patchified.
pub struct SplitStores {
    pub train: FrameStore,
    pub test: FrameStore,
}

impl SplitStores {
    pub fn from_scans(scans: &[(Scan, Split)], patch_size: usize) -> Result<Self> {
        let pick = |split: Split| -> Vec<Scan> {
            scans
                .iter()
                .filter(|(_, s)| *s == split)
                .map(|(scan, _)| scan.clone())
                .collect()
        };
        let (train, test) = (pick(Split::Train), pick(Split::Test));
        check_disjoint(&train, &test)?;
        Ok(Self {
            train: FrameStore::from_scans(&train, patch_size)?,
            test: FrameStore::from_scans(&test, patch_size)?,
        })
    }

    pub fn load(root: &Path, patch_size: usize) -> Result<Self> {
        let ds = Dataset::open(root)?;
        let train = ds.load_split(Split::Train)?;
        let test = ds.load_split(Split::Test)?;
        check_disjoint(&train, &test)?;
        Ok(Self {
            train: FrameStore::from_scans(&train, patch_size)?,
            test: FrameStore::from_scans(&test, patch_size)?,
        })
    }
}

fn check_disjoint(train: &[Scan], test: &[Scan]) -> Result<()> {
    if train.is_empty() || test.is_empty() {
        return Err(invalid!("dataset needs both train and test scans"));
    }
    if let Some(s) = train.iter().find(|a| test.iter().any(|b| b.scan_id == a.scan_id)) {
        return Err(invalid!("scan {} appears in both splits", s.scan_id));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_root: PathBuf,
    /// Seeds swept by `ablate`.
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub guidance: GuidanceConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            output_root: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
            data: DataConfig::desk(),
            pretrain: PretrainConfig::desk(),
            guidance: GuidanceConfig::desk(),
        }
    }

    /// Clinical-scale protocol, kept for documentation.
    pub fn paper_scale() -> Self {
        let mut guidance = GuidanceConfig::desk();
        guidance.batch_size = 1024;
        let pretrain = PretrainConfig::paper_scale();
        let mut data = DataConfig::desk();
        data.image_size = pretrain.encoder.image_size;
        data.volume_size = 2 * pretrain.encoder.image_size;
        Self {
            output_root: PathBuf::from("runs_paper"),
            seeds: vec![0, 1, 2],
            data,
            pretrain,
            guidance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.pretrain.validate()?;
        self.guidance.validate()?;
        if self.seeds.is_empty() {
            return Err(invalid!("at least one seed is required"));
        }
        if self.pretrain.encoder.image_size != self.data.image_size {
            return Err(invalid!(
                "encoder image_size {} differs from data image_size {}",
                self.pretrain.encoder.image_size,
                self.data.image_size
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_root.join("data")
    }

    /// Copy with every training seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = seed;
        c.guidance.seed = seed;
        c
    }
}

/// Writes `config.toml` and `config_hash.txt` into a run directory.
pub fn record_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))?;
    let h = dir.join("config_hash.txt");
    fs::write(&h, format!("{}\n", cfg.hash())).map_err(|e| Error::io(&h, e))
}

/// Baseline variant name; the others are the pre-training modes.
pub const BASELINE: &str = "scratch";

pub fn variants() -> Vec<String> {
    std::iter::once(BASELINE.to_string())
        .chain(Mode::ALL.iter().map(|m| m.to_string()))
        .collect()
}

/// Outputs of one seed of the sweep.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub pretrain_epoch_losses: BTreeMap<String, Vec<f64>>,
    /// Seconds spent pre-training each mode in this process (0 if reused).
    pub pretrain_seconds: BTreeMap<String, f64>,
    pub reports: BTreeMap<String, MaeReport>,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub runs: Vec<SeedRun>,
}

/// Pre-trains every mode, fine-tunes each checkpoint plus a from-scratch
/// baseline and evaluates on the test split, for every seed. Finished
/// pieces found under `out_dir` are reused.
pub fn run_ablation(cfg: &RunConfig, stores: &SplitStores, out_dir: &Path) -> Result<Ablation> {
    cfg.validate()?;
    record_config(out_dir, cfg)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        runs.push(run_seed(&cfg.with_seed(seed), stores, &out_dir.join(format!("seed_{seed}")))?);
    }
    let ab = Ablation { runs };
    let csv = out_dir.join(SUMMARY_FILE);
    fs::write(&csv, summary_csv(&ab.summary()?)).map_err(|e| Error::io(&csv, e))?;
    write_plot(&out_dir.join(PLOT_FILE), &ab.summary()?)?;
    Ok(ab)
}

pub const SUMMARY_FILE: &str = "summary.csv";
pub const PLOT_FILE: &str = "ablation.svg";

fn run_seed(cfg: &RunConfig, stores: &SplitStores, dir: &Path) -> Result<SeedRun> {
    let seed = cfg.pretrain.seed;
    let mut run = SeedRun {
        seed,
        pretrain_epoch_losses: BTreeMap::new(),
        pretrain_seconds: BTreeMap::new(),
        reports: BTreeMap::new(),
    };
    let mut checkpoints = BTreeMap::new();
    for mode in Mode::ALL {
        let mut pc = cfg.pretrain.clone();
        pc.mode = mode;
        let pdir = dir.join(format!("pretrain_{mode}"));
        let started = Instant::now();
        let out = run_pretrain(
            &pc,
            &stores.train,
            &pdir,
            &RunOptions {
                resume: true,
                stop_after: None,
            },
        )?;
        run.pretrain_seconds.insert(mode.to_string(), started.elapsed().as_secs_f64());
        run.pretrain_epoch_losses.insert(mode.to_string(), out.epoch_losses);
        checkpoints.insert(mode.to_string(), out.checkpoint);
    }
    for variant in variants() {
        let fdir = dir.join(format!("finetune_{variant}"));
        let report_path = fdir.join("eval.json");
        let report = if report_path.exists() {
            MaeReport::read_json(&report_path)?
        } else {
            let model = if fdir.join(crate::checkpoint::MANIFEST_FILE).exists() {
                load_guidance::<f32>(&fdir)?.1
            } else {
                let from = checkpoints.get(&variant).map(PathBuf::as_path);
                let out = finetune::<f32>(from, &stores.train, &cfg.guidance, &cfg.pretrain.encoder, &cfg.pretrain.predictor)?;
                save_guidance(&fdir, &out.model, &out.manifest)?;
                out.model
            };
            let report = evaluate_mae(&model, &stores.test, &cfg.guidance.planes, &variant)?;
            report.write(&fdir, "eval")?;
            report
        };
        log::info!(
            "seed {seed} {variant}: translation {:.3} mm, rotation {:.3} deg, aggregate {:.4}",
            report.translation_mm,
            report.rotation_deg,
            report.aggregate
        );
        run.reports.insert(variant, report);
    }
    Ok(run)
}

/// One cell of the ablation matrix. `seed = None` rows are seed means.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub seed: Option<u64>,
    pub plane: String,
    pub axis: String,
    pub unit: String,
    pub mae: f64,
    pub baseline_mae: f64,
    pub change_pct: f64,
}

pub const SUMMARY_HEADER: &str = "variant,seed,plane,axis,unit,mae,baseline_mae,change_pct";

impl Ablation {
    fn report(&self, variant: &str, seed_idx: usize) -> Result<&MaeReport> {
        self.runs[seed_idx]
            .reports
            .get(variant)
            .ok_or_else(|| invalid!("missing {variant} report for seed {}", self.runs[seed_idx].seed))
    }

    /// Seed mean of `f` over the `variant` reports.
    pub fn mean_over_seeds(&self, variant: &str, f: impl Fn(&MaeReport) -> f64) -> Result<f64> {
        let mut s = 0.0;
        for i in 0..self.runs.len() {
            s += f(self.report(variant, i)?);
        }
        Ok(s / self.runs.len() as f64)
    }

    /// Per-seed rows plus seed-mean rows for every variant, plane and axis.
    pub fn summary(&self) -> Result<Vec<SummaryRow>> {
        if self.runs.is_empty() {
            return Err(invalid!("empty ablation"));
        }
        let mut rows = Vec::new();
        for variant in variants() {
            let cells = |i: usize| -> Result<Vec<(String, usize, f64, f64)>> {
                let (r, b) = (self.report(&variant, i)?, self.report(BASELINE, i)?);
                let mut out = Vec::new();
                for (p, bp) in r.planes.iter().chain([&r.overall]).zip(b.planes.iter().chain([&b.overall])) {
                    for a in 0..6 {
                        out.push((p.plane.clone(), a, p.mae[a], bp.mae[a]));
                    }
                }
                Ok(out)
            };
            let mut mean: Vec<(String, usize, f64, f64)> = Vec::new();
            for (i, run) in self.runs.iter().enumerate() {
                let c = cells(i)?;
                if mean.is_empty() {
                    mean = c.iter().map(|(p, a, _, _)| (p.clone(), *a, 0.0, 0.0)).collect();
                }
                let n = self.runs.len() as f64;
                for (m, (plane, a, v, b)) in mean.iter_mut().zip(&c) {
                    m.2 += v / n;
                    m.3 += b / n;
                    rows.push(summary_row(&variant, Some(run.seed), plane, *a, *v, *b));
                }
            }
            for (plane, a, v, b) in &mean {
                rows.push(summary_row(&variant, None, plane, *a, *v, *b));
            }
        }
        Ok(rows)
    }
}

fn summary_row(variant: &str, seed: Option<u64>, plane: &str, axis: usize, mae: f64, baseline: f64) -> SummaryRow {
    SummaryRow {
        variant: variant.into(),
        seed,
        plane: plane.into(),
        axis: AXES[axis].into(),
        unit: UNITS[axis].into(),
        mae,
        baseline_mae: baseline,
        change_pct: crate::guidance::percent_change(baseline, mae),
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let seed = r.seed.map_or_else(|| "mean".to_string(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{},{seed},{},{},{},{},{},{}",
            r.variant, r.plane, r.axis, r.unit, r.mae, r.baseline_mae, r.change_pct
        );
    }
    s
}

pub fn parse_summary_csv(path: &Path, text: &str) -> Result<Vec<SummaryRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(Error::format(path, "unexpected summary header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::format(path, format!("malformed row {}", i + 2));
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(SummaryRow {
                variant: f[0].into(),
                seed: if f[1] == "mean" { None } else { Some(f[1].parse().map_err(|_| bad())?) },
                plane: f[2].into(),
                axis: f[3].into(),
                unit: f[4].into(),
                mae: num(f[5])?,
                baseline_mae: num(f[6])?,
                change_pct: num(f[7])?,
            })
        })
        .collect()
}

/// Bar chart of the seed-mean relative change against the baseline: one
/// panel per plane, six axis groups, one bar per pre-training variant.
pub fn write_plot(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    use plotters::prelude::*;

    let mean: Vec<&SummaryRow> = rows.iter().filter(|r| r.seed.is_none() && r.variant != BASELINE).collect();
    let mut planes: Vec<&str> = Vec::new();
    let mut modes: Vec<&str> = Vec::new();
    for r in &mean {
        if !planes.contains(&r.plane.as_str()) {
            planes.push(&r.plane);
        }
        if !modes.contains(&r.variant.as_str()) {
            modes.push(&r.variant);
        }
    }
    if planes.is_empty() {
        return Err(invalid!("no seed-mean rows to plot"));
    }
    let value = |plane: &str, mode: &str, axis: &str| {
        mean.iter()
            .find(|r| r.plane == plane && r.variant == mode && r.axis == axis)
            .map_or(0.0, |r| r.change_pct)
    };
    let lim = mean
        .iter()
        .map(|r| r.change_pct.abs())
        .filter(|v| v.is_finite())
        .fold(1.0f64, f64::max)
        * 1.15;
    let plot_err = |e: String| Error::format(path, e);
    let width = 360 * planes.len() as u32;
    let root = SVGBackend::new(path, (width, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let panels = root.split_evenly((1, planes.len()));
    let palette = [RGBColor(31, 119, 180), RGBColor(255, 127, 14), RGBColor(44, 160, 44), RGBColor(148, 103, 189)];
    let nm = modes.len() as f64;
    for (panel, plane) in panels.iter().zip(&planes) {
        let mut chart = ChartBuilder::on(panel)
            .caption(*plane, ("sans-serif", 18))
            .margin(8)
            .x_label_area_size(28)
            .y_label_area_size(48)
            .build_cartesian_2d(0.0..6.0, -lim..lim)
            .map_err(|e| plot_err(e.to_string()))?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(6)
            .x_label_formatter(&|x: &f64| {
                let i = (x - 0.5).round();
                if (0.0..6.0).contains(&i) && (x - 0.5 - i).abs() < 1e-6 {
                    AXES[i as usize].to_string()
                } else {
                    String::new()
                }
            })
            .y_desc("change vs scratch (%)")
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        for (m, mode) in modes.iter().enumerate() {
            let color = palette[m % palette.len()];
            let bars = AXES.iter().enumerate().map(|(a, axis)| {
                let x0 = a as f64 + 0.1 + 0.8 * m as f64 / nm;
                let v = value(plane, mode, axis);
                Rectangle::new([(x0, 0.0), (x0 + 0.8 / nm, v)], color.filled())
            });
            chart
                .draw_series(bars)
                .map_err(|e| plot_err(e.to_string()))?
                .label(*mode)
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
    }
    root.present().map_err(|e| plot_err(e.to_string()))
}
