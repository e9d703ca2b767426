//! Acceptance suite. Every test prints one `acceptance <n> [PASS|FAIL]` line
//! straight to stdout, so the verdicts show up even under output capture.
//!
//! Criteria 6, 7 and 8 share one desk-scale ablation sweep (3 seeds of
//! joint / 2d / 3d pre-training plus four fine-tunes each), which takes
//! on the order of an hour on a single CPU core.

use std::io::Write;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use nalgebra::{Matrix4, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use probe_world::encoders::{EncoderConfig, FeatureSet};
use probe_world::experiment::{generate_scans, run_ablation, Ablation, RunConfig, SplitStores, BASELINE};
use probe_world::guidance::{evaluate_mae, finetune, GuidanceConfig};
use probe_world::masking::{sample_context_mask, sample_target_masks, GridSpec, MaskSpec};
use probe_world::nn::{Mat, Parameterized};
use probe_world::phantom::{generate_phantom, generate_scan, TrajectoryConfig};
use probe_world::pose::{relative_pose, Pose};
use probe_world::pretrain::{
    build_batch, jepa_pass, lr_schedule, read_metrics_csv, run_pretrain, teacher_targets, FrameRef, FrameStore,
    JepaItem, JepaModel, Mode, PretrainConfig, RunOptions, Schedule, Trainer, METRICS_FILE,
};
use probe_world::world_model::{jepa_loss, PredictorConfig};

// The training loops allocate large short-lived matrices; the system
// allocator returns them to the OS and pays for page faults every step.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// The criteria run one at a time so that runtimes are measured alone.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) -> bool {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {id} [{verdict}] {name}: {detail}");
    let _ = out.flush();
    pass
}

// ---------------------------------------------------------------- 1

fn ref_smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * a * a
    } else {
        a - 0.5
    }
}

#[test]
fn criterion_1_loss_matches_triple_loop_reference() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = rng.random_range(1..6);
        let l = rng.random_range(1..12);
        let c = rng.random_range(1..40);
        let scale = [0.3, 1.0, 4.0][rng.random_range(0..3)];
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..m {
            let mk = |rng: &mut ChaCha8Rng| FeatureSet {
                tokens: Mat::from_fn(l, c, |_, _| rng.random_range(-scale..scale)),
                patch_indices: (0..l).collect(),
            };
            preds.push(mk(&mut rng));
            targets.push(mk(&mut rng));
        }
        let mut reference = 0.0;
        for i in 0..m {
            for j in 0..l {
                let mut tok = 0.0;
                for k in 0..c {
                    tok += ref_smooth_l1(preds[i].tokens.get(j, k) - targets[i].tokens.get(j, k));
                }
                reference += tok / c as f64;
            }
        }
        reference /= m as f64;
        let got = jepa_loss::<f64>(&preds, &targets).unwrap();
        worst = worst.max((got - reference).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst < 1e-6 && secs < 60.0;
    report(
        1,
        "loss oracle",
        pass,
        &format!("100 instances, max |diff| {worst:.2e} (tol 1e-6), {secs:.2}s"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let _g = serial();
    let started = Instant::now();
    let enc = EncoderConfig {
        depth: 2,
        hidden_dim: 16,
        num_heads: 2,
        patch_size: 8,
        image_size: 32,
        mlp_ratio: 2,
        init_std: 0.2,
    };
    let pred = PredictorConfig {
        depth: 2,
        hidden_dim: 16,
        num_heads: 2,
        mlp_ratio: 2,
        pose_hidden_dim: 16,
        init_std: 0.2,
    };
    let vol = generate_phantom(5, 32).unwrap();
    let traj = TrajectoryConfig {
        frames: 4,
        max_translation_mm: 6.0,
        ..Default::default()
    };
    let store = FrameStore::from_scans(&[generate_scan(&vol, &traj, 6, (32, 32), 0).unwrap()], 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = JepaModel::<f64>::new(&enc, &pred, &mut rng).unwrap();
    let teacher = JepaModel::<f64>::new(&enc, &pred, &mut rng).unwrap().encoder;

    // L_s = 6 context tokens, M = 2 target blocks of L_t = 3 tokens.
    let context: Vec<Vec<usize>> = vec![vec![0, 1, 4, 5, 8, 9], vec![2, 3, 6, 7, 10, 14]];
    let blocks: Vec<Vec<Vec<usize>>> = vec![
        vec![vec![10, 11, 15], vec![2, 3, 7]],
        vec![vec![0, 4, 8], vec![12, 13, 9]],
    ];
    let deltas = [[0.3, -0.2, 0.1, 0.4, -0.5, 0.25], [-0.1, 0.6, -0.3, 0.2, 0.1, -0.4]];
    let make_items = |deltas: &[[f64; 6]; 2]| -> Vec<JepaItem<'_>> {
        (0..2)
            .map(|i| JepaItem {
                source: store.frame(FrameRef { scan: 0, frame: i }),
                target: store.frame(FrameRef { scan: 0, frame: i + 2 }),
                context: &context[i],
                targets: blocks[i].iter().map(|b| b.as_slice()).collect(),
                delta: deltas[i],
            })
            .collect()
    };
    let items = make_items(&deltas);
    let targets = teacher_targets(&teacher, &items, true).unwrap();
    let loss_of = |m: &mut JepaModel<f64>, d: &[[f64; 6]; 2]| jepa_pass(m, &make_items(d), &targets, false).unwrap().loss;

    model.zero_grad();
    let out = jepa_pass(&mut model, &items, &targets, true).unwrap();
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit("", &mut |name, p| grads.push((name.to_string(), p.grad.data.clone())));

    let eps = 1e-5;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-7);
    let mut worst = (0.0f64, String::new());
    let mut checked = 0usize;
    for (gi, (name, g)) in grads.iter().enumerate() {
        for idx in 0..g.len() {
            let bump = |m: &mut JepaModel<f64>, d: f64| {
                let mut k = 0;
                m.visit_mut("", &mut |_, p| {
                    if k == gi {
                        p.value.data[idx] += d;
                    }
                    k += 1;
                });
            };
            bump(&mut model, eps);
            let lp = loss_of(&mut model, &deltas);
            bump(&mut model, -2.0 * eps);
            let lm = loss_of(&mut model, &deltas);
            bump(&mut model, eps);
            let e = rel(g[idx], (lp - lm) / (2.0 * eps));
            if e > worst.0 {
                worst = (e, format!("{name}[{idx}]"));
            }
            checked += 1;
        }
    }
    let groups = grads.len();
    let mut pose_worst = 0.0f64;
    for i in 0..2 {
        for k in 0..6 {
            let mut dp = deltas;
            dp[i][k] += eps;
            let lp = loss_of(&mut model, &dp);
            dp[i][k] -= 2.0 * eps;
            let lm = loss_of(&mut model, &dp);
            pose_worst = pose_worst.max(rel(out.pose_input_grad.get(i, k), (lp - lm) / (2.0 * eps)));
        }
    }
    let grad_a_norm = out.pose_input_grad.sum_sq().sqrt();
    let secs = started.elapsed().as_secs_f64();
    let pass = worst.0 < 1e-3 && pose_worst < 1e-3 && grad_a_norm > 0.0 && secs < 300.0;
    report(
        2,
        "gradient suite",
        pass,
        &format!(
            "{checked} parameters in {groups} tensors, max rel err {:.2e} at {}; pose input max rel err {pose_worst:.2e}, |dL/da| {grad_a_norm:.3e}; {secs:.1}s",
            worst.0, worst.1
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

fn homogeneous(t: [f64; 3], r_deg: [f64; 3]) -> Matrix4<f64> {
    let rot = Rotation3::from_euler_angles(r_deg[0].to_radians(), r_deg[1].to_radians(), r_deg[2].to_radians());
    let mut m = rot.to_homogeneous();
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&Vector3::from(t));
    m
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    Pose::new(
        std::array::from_fn(|_| rng.random_range(-40.0..40.0)),
        [
            rng.random_range(-170.0..170.0),
            rng.random_range(-60.0..60.0),
            rng.random_range(-170.0..170.0),
        ],
    )
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[test]
fn criterion_3_relative_pose_matches_matrix_oracle() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut pairs, mut worst_matrix, mut worst_angle, mut worst_round_trip) = (0, 0.0f64, 0.0f64, 0.0f64);
    while pairs < 1000 {
        let (src, tgt) = (random_pose(&mut rng), random_pose(&mut rng));
        let oracle = homogeneous(tgt.t, tgt.r) * homogeneous(src.t, src.r).try_inverse().unwrap();
        let rot = Rotation3::from_matrix_unchecked(oracle.fixed_view::<3, 3>(0, 0).into_owned());
        let (roll, pitch, yaw) = rot.euler_angles();
        if pitch.to_degrees().abs() > 85.0 {
            continue;
        }
        pairs += 1;
        let d = relative_pose(&src, &tgt).unwrap();
        let mine = homogeneous(d.translation(), d.rotation_deg());
        worst_matrix = worst_matrix.max((mine - oracle).abs().max());
        for k in 0..3 {
            worst_matrix = worst_matrix.max((d.a[k] - oracle[(k, 3)]).abs());
        }
        for (k, v) in [roll, pitch, yaw].into_iter().enumerate() {
            worst_angle = worst_angle.max(angle_diff(d.a[3 + k], v.to_degrees()));
        }
        let back = src.apply(&d).unwrap();
        for k in 0..3 {
            worst_round_trip = worst_round_trip
                .max((back.t[k] - tgt.t[k]).abs())
                .max(angle_diff(back.r[k], tgt.r[k]));
        }
    }
    let pass = worst_matrix < 1e-6 && worst_angle < 1e-6 && worst_round_trip < 1e-6;
    report(
        3,
        "pose algebra oracle",
        pass,
        &format!(
            "1000 pairs, max matrix err {worst_matrix:.2e}, max angle err {worst_angle:.2e} deg, max apply/extract round-trip err {worst_round_trip:.2e}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_mask_properties_hold() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = PretrainConfig::desk();
    let cross = cfg.masks.clone();
    let same = cfg.same_image_masks.clone();
    assert_eq!(cross, MaskSpec::default());
    let mut detail = Vec::new();
    let mut total_violations = 0usize;
    for grid in [cfg.encoder.grid(), GridSpec::new(14, 14, 16)] {
        let n = grid.num_patches() as f64;
        let (tlo, thi) = ((n * cross.target_scale.0).round() as usize, (n * cross.target_scale.1).round() as usize);
        let (clo, chi) = ((n * cross.context_scale.0).round() as usize, (n * cross.context_scale.1).round() as usize);
        let (mut overlap, mut bounds, mut leaked) = (0usize, 0usize, 0usize);
        for _ in 0..10_000 {
            // Cross-image path: pairwise disjoint targets.
            let t = sample_target_masks(&grid, &cross, &mut rng).unwrap();
            for i in 0..t.len() {
                let r = t[i].rect().unwrap();
                let aspect = r.height as f64 / r.width as f64;
                if t[i].len() < tlo
                    || t[i].len() > thi
                    || aspect < cross.target_aspect.0 - 1e-9
                    || aspect > cross.target_aspect.1 + 1e-9
                {
                    bounds += 1;
                }
                for j in i + 1..t.len() {
                    if t[i].indices().iter().any(|k| t[j].indices().contains(k)) {
                        overlap += 1;
                    }
                }
            }
            let c = sample_context_mask(&grid, &cross, &mut rng, None).unwrap();
            if c.len() < clo || c.len() > chi {
                bounds += 1;
            }
            // Same-image path: the context never contains a target patch.
            let t = sample_target_masks(&grid, &same, &mut rng).unwrap();
            let c = sample_context_mask(&grid, &same, &mut rng, Some(&t)).unwrap();
            if c.is_empty() || c.indices().iter().any(|k| t.iter().any(|m| m.indices().contains(k))) {
                leaked += 1;
            }
        }
        total_violations += overlap + bounds + leaked;
        detail.push(format!(
            "{}x{} grid: {overlap} overlaps, {bounds} scale/aspect violations, {leaked} context leaks",
            grid.rows, grid.cols
        ));
    }
    let pass = total_violations == 0;
    report(4, "mask properties", pass, &format!("10^4 samples per grid; {}", detail.join("; ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 5

fn tiny_store(seed: u64, scans: usize, frames: usize, size: usize) -> FrameStore {
    let traj = TrajectoryConfig {
        frames,
        ..Default::default()
    };
    let scans: Vec<_> = (0..scans)
        .map(|k| {
            let vol = generate_phantom(seed + k as u64, 64).unwrap();
            generate_scan(&vol, &traj, seed + 100 + k as u64, (size, size), k).unwrap()
        })
        .collect();
    FrameStore::from_scans(&scans, 8).unwrap()
}

fn short_config(seed: u64) -> PretrainConfig {
    PretrainConfig {
        epochs: 4,
        warmup_epochs: 1,
        batch_size: 8,
        checkpoint_every_epochs: 2,
        seed,
        ..PretrainConfig::desk()
    }
}

#[test]
fn criterion_5_schedule_is_exact() {
    let _g = serial();
    let cfg = PretrainConfig::desk();
    let s = Schedule::new(&cfg, 64);
    let start = lr_schedule(0, &s).unwrap();
    let peak = lr_schedule(s.warmup_steps, &s).unwrap();
    let end = lr_schedule(s.total_steps, &s).unwrap();
    let endpoints = start == 1e-4 && peak == 5e-4 && end == 5e-7;

    let store = tiny_store(50, 1, 64, 64);
    let pc = short_config(5);
    let dir = tempfile::tempdir().unwrap();
    run_pretrain(&pc, &store, dir.path(), &RunOptions::default()).unwrap();
    let rows = read_metrics_csv(&dir.path().join(METRICS_FILE)).unwrap();
    let spe = store.num_frames() / pc.batch_size;
    let rs = Schedule::new(&pc, spe);
    let worst = rows
        .iter()
        .map(|r| (r.lr - lr_schedule(r.step, &rs).unwrap()).abs())
        .fold(0.0f64, f64::max);
    let complete = rows.len() == rs.total_steps;
    let pass = endpoints && complete && worst <= 1e-12;
    report(
        5,
        "schedule exactness",
        pass,
        &format!(
            "lr(0)={start:e}, lr(warmup)={peak:e}, lr(end)={end:e}; {} recorded steps, max |recorded - schedule| {worst:.1e}",
            rows.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6, 7, 8

struct Sweep {
    ablation: Ablation,
    out_dir: PathBuf,
    stores: SplitStores,
}

fn sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let cfg = RunConfig::desk();
        let scans = generate_scans(&cfg.data).unwrap();
        let stores = SplitStores::from_scans(&scans, cfg.pretrain.encoder.patch_size).unwrap();
        let out_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_ablation");
        let _ = std::fs::remove_dir_all(&out_dir);
        let ablation = run_ablation(&cfg, &stores, &out_dir).unwrap();
        Sweep {
            ablation,
            out_dir,
            stores,
        }
    })
}

#[test]
fn criterion_6_pretraining_reduces_loss() {
    let _g = serial();
    let s = sweep();
    let cfg = RunConfig::desk();
    assert_eq!(cfg.data.train_scans, 8);
    assert_eq!(cfg.data.trajectory.frames, 512);
    assert_eq!(cfg.data.image_size, 64);
    assert_eq!(cfg.pretrain.epochs, 20);

    let mut per_seed = Vec::new();
    let mut decreasing = 0;
    let mut joint_secs = 0.0;
    for run in &s.ablation.runs {
        let l = &run.pretrain_epoch_losses["joint"];
        assert_eq!(l.len(), cfg.pretrain.epochs);
        let (first, last) = (l[0], l[l.len() - 1]);
        if last < first {
            decreasing += 1;
        }
        joint_secs += run.pretrain_seconds["joint"];
        per_seed.push(format!("seed {}: {first:.4} -> {last:.4}", run.seed));
    }

    // Fixed-batch overfit at the constant peak learning rate.
    let mut oc = PretrainConfig {
        epochs: 1,
        warmup_epochs: 0,
        ..PretrainConfig::desk()
    };
    oc.lr_final = oc.lr_peak;
    oc.seed = 11;
    let mut rng = ChaCha8Rng::seed_from_u64(oc.seed);
    let batch = build_batch(&s.stores.train, &oc, &mut rng).unwrap();
    let items: Vec<JepaItem<'_>> = batch.iter().map(|b| JepaItem::from_sample(&s.stores.train, b)).collect();
    let mut trainer = Trainer::<f32>::new(&oc, 200).unwrap();
    let first = trainer.train_on(&items, 0).unwrap().loss;
    for step in 1..200 {
        trainer.train_on(&items, step).unwrap();
    }
    let targets = teacher_targets(&trainer.teacher, &items, oc.normalize_targets).unwrap();
    let after = jepa_pass(&mut trainer.model, &items, &targets, false).unwrap().loss;
    let drop = 1.0 - after / first;

    let pass_loss = decreasing == s.ablation.runs.len() && s.ablation.runs.len() == 3;
    let pass_overfit = drop >= 0.9;
    let pass_time = joint_secs < 1800.0;
    let pass = pass_loss && pass_overfit && pass_time;
    report(
        6,
        "pre-training sanity",
        pass,
        &format!(
            "final < first epoch loss on {decreasing}/3 seeds ({}); fixed-batch overfit at lr {:.0e} {first:.4} -> {after:.4} ({:.1}% drop, need >= 90%); joint pre-training wall time {:.1} min for 3 seeds (limit 30)",
            per_seed.join(", "),
            oc.lr_peak,
            100.0 * drop,
            joint_secs / 60.0
        ),
    );
    assert!(pass_loss && pass_overfit, "loss criteria failed");
    assert!(pass_time, "runtime {joint_secs:.0}s exceeds 30 min");
}

#[test]
fn criterion_7_joint_pretraining_transfers() {
    let _g = serial();
    let s = sweep();
    let ab = &s.ablation;
    let joint = ab.mean_over_seeds("joint", |r| r.aggregate).unwrap();
    let scratch = ab.mean_over_seeds(BASELINE, |r| r.aggregate).unwrap();
    let parts = |v: &str| {
        format!(
            "{v}: aggregate {:.4} (translation {:.4}, rotation {:.4})",
            ab.mean_over_seeds(v, |r| r.aggregate).unwrap(),
            ab.mean_over_seeds(v, |r| r.translation_normalized).unwrap(),
            ab.mean_over_seeds(v, |r| r.rotation_normalized).unwrap()
        )
    };
    let per_seed: Vec<String> = ab
        .runs
        .iter()
        .map(|r| format!("seed {}: {:.4} vs {:.4}", r.seed, r.reports["joint"].aggregate, r.reports[BASELINE].aggregate))
        .collect();
    let pass = joint < scratch;
    report(
        7,
        "transfer",
        pass,
        &format!(
            "seed-mean std-normalised MAE, {}; {}; {} [joint vs scratch]; summary in {}",
            parts("joint"),
            parts(BASELINE),
            per_seed.join(", "),
            s.out_dir.display()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_joint_rotation_error_not_worse_than_single_path() {
    let _g = serial();
    let s = sweep();
    let ab = &s.ablation;
    let rot = |v: &str| ab.mean_over_seeds(v, |r| r.rotation_deg).unwrap();
    let (joint, two, three) = (rot("joint"), rot("2d"), rot("3d"));
    let per_seed: Vec<String> = ["joint", "2d", "3d", BASELINE]
        .iter()
        .map(|v| {
            let vals: Vec<String> = ab.runs.iter().map(|r| format!("{:.4}", r.reports[*v].rotation_deg)).collect();
            format!("{v} [{}]", vals.join(", "))
        })
        .collect();
    let pass = joint <= 1.05 * two && joint <= 1.05 * three;
    report(
        8,
        "ablation direction",
        pass,
        &format!(
            "seed-mean rotation MAE joint {joint:.4} deg, 2d {two:.4}, 3d {three:.4} (5% slack); per seed {}",
            per_seed.join(", ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_runs_are_byte_reproducible() {
    let _g = serial();
    let store = tiny_store(90, 2, 48, 64);
    let cfg = short_config(9);
    let gcfg = GuidanceConfig {
        epochs: 1,
        batch_size: 16,
        ..GuidanceConfig::desk()
    };
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let out = run_pretrain(&cfg, &store, dir.path(), &RunOptions::default()).unwrap();
        let metrics = std::fs::read(dir.path().join(METRICS_FILE)).unwrap();
        let ft = finetune::<f32>(Some(&out.checkpoint), &store, &gcfg, &cfg.encoder, &cfg.predictor).unwrap();
        let eval = evaluate_mae(&ft.model, &store, &gcfg.planes, "joint").unwrap().to_csv();
        (metrics, eval)
    };
    let (m1, e1) = run();
    let (m2, e2) = run();
    let pass = m1 == m2 && e1 == e2 && !m1.is_empty();
    report(
        9,
        "determinism",
        pass,
        &format!(
            "pre-training metrics CSV ({} bytes) identical: {}; evaluation CSV ({} bytes) identical: {}",
            m1.len(),
            m1 == m2,
            e1.len(),
            e1 == e2
        ),
    );
    assert!(pass);
    assert_eq!(cfg.mode, Mode::Joint);
}
