//! Procedural "heart" phantom, oblique plane slicing and simulated scans.
//!
//! World coordinates are millimetres with the origin at voxel index
//! `size / 2` along every axis. A slice of `h x w` pixels uses the voxel
//! spacing as its pixel spacing; pixel `(row, col)` sits at plane
//! coordinates `((col - w/2) * s, (row - h/2) * s, 0)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pose::{euler_zyx_to_matrix, Mat3, Pose};

pub const MIN_VOLUME_SIZE: usize = 32;
/// Minimum mean absolute difference between the canonical slice and the
/// slice rotated 90 degrees about z.
pub const ASYMMETRY_THRESHOLD: f64 = 0.01;
/// Assumed clinical scan length used to scale the pair gap to short scans.
pub const REFERENCE_SCAN_FRAMES: usize = 3735;
pub const REFERENCE_MIN_GAP: usize = 150;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub size: usize,
    pub voxel_spacing_mm: f64,
    /// Seed that actually produced this volume (may be the requested seed
    /// plus a small offset, see [`generate_phantom`]).
    pub seed: u64,
    /// `size^3` intensities in `[0, 1]`, indexed `[z][y][x]`.
    pub data: Vec<f32>,
}

impl Volume {
    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[(z * self.size + y) * self.size + x]
    }

    /// Trilinear sample at fractional voxel coordinates; voxels outside the
    /// array read as 0.
    pub fn sample(&self, x: f64, y: f64, z: f64) -> f32 {
        let n = self.size as isize;
        let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
        let (fx, fy, fz) = (x - x0, y - y0, z - z0);
        let (ix, iy, iz) = (x0 as isize, y0 as isize, z0 as isize);
        if ix < -1 || iy < -1 || iz < -1 || ix >= n || iy >= n || iz >= n {
            return 0.0;
        }
        let get = |dx: isize, dy: isize, dz: isize| -> f64 {
            let (xi, yi, zi) = (ix + dx, iy + dy, iz + dz);
            if xi < 0 || yi < 0 || zi < 0 || xi >= n || yi >= n || zi >= n {
                0.0
            } else {
                self.at(xi as usize, yi as usize, zi as usize) as f64
            }
        };
        let mut acc = 0.0;
        for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
            if wz == 0.0 {
                continue;
            }
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                if wy == 0.0 {
                    continue;
                }
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    if wx == 0.0 {
                        continue;
                    }
                    acc += wz * wy * wx * get(dx, dy, dz);
                }
            }
        }
        acc as f32
    }

    pub fn extent_mm(&self) -> f64 {
        self.size as f64 * self.voxel_spacing_mm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceImage {
    pub height: usize,
    pub width: usize,
    /// Row-major pixels in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub pose: Pose,
    pub scan_id: usize,
    pub frame_index: usize,
}

impl SliceImage {
    pub fn pixel(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn mean_abs_diff(&self, other: &SliceImage) -> f64 {
        let n = self.pixels.len().max(1);
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / n as f64
    }
}

#[derive(Debug, Clone)]
pub struct Scan {
    pub scan_id: usize,
    pub volume_seed: u64,
    pub trajectory_seed: u64,
    pub frames: Vec<SliceImage>,
}

impl Scan {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Samples a (source, target) frame pair at least `min_gap` frames apart.
    pub fn sample_pair<R: Rng + ?Sized>(
        &self,
        min_gap: usize,
        rng: &mut R,
    ) -> Result<(&SliceImage, &SliceImage)> {
        let (s, t) = sample_pair_indices(self.len(), min_gap, rng)?;
        Ok((&self.frames[s], &self.frames[t]))
    }
}

/// One ellipsoidal structure of the phantom, in normalised coordinates
/// (the volume spans `[-1, 1]` on every axis).
#[derive(Debug, Clone, Copy)]
struct Structure {
    center: [f64; 3],
    radii: [f64; 3],
    /// Orientation as (rx, ry, rz) degrees.
    orient: [f64; 3],
    intensity: f64,
}

// Painted in order; later structures overwrite earlier ones, which nests
// them into shells (pericardium > myocardium > cavities > bright details).
const TEMPLATE: [Structure; 8] = [
    Structure { center: [0.02, -0.03, 0.00], radii: [0.80, 0.66, 0.74], orient: [0.0, 5.0, 15.0], intensity: 0.32 },
    Structure { center: [0.05, 0.00, 0.02], radii: [0.63, 0.50, 0.58], orient: [10.0, 0.0, 20.0], intensity: 0.72 },
    Structure { center: [0.20, 0.06, 0.00], radii: [0.30, 0.23, 0.38], orient: [0.0, 12.0, 30.0], intensity: 0.10 },
    Structure { center: [-0.24, -0.10, 0.06], radii: [0.18, 0.30, 0.27], orient: [-8.0, 0.0, -20.0], intensity: 0.20 },
    Structure { center: [0.08, 0.14, 0.50], radii: [0.26, 0.20, 0.18], orient: [0.0, 0.0, 40.0], intensity: 0.14 },
    Structure { center: [0.00, 0.31, -0.16], radii: [0.11, 0.07, 0.13], orient: [0.0, 0.0, 0.0], intensity: 0.95 },
    Structure { center: [0.27, -0.06, 0.12], radii: [0.06, 0.06, 0.11], orient: [0.0, 20.0, 0.0], intensity: 0.86 },
    Structure { center: [-0.38, 0.22, -0.30], radii: [0.12, 0.09, 0.09], orient: [0.0, 0.0, -35.0], intensity: 0.58 },
];

const BACKGROUND: f64 = 0.04;
const EDGE_SOFTNESS: f64 = 0.07;

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn transpose(m: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| m[j][i]))
}

fn build_volume(seed: u64, size: usize, voxel_spacing_mm: f64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |amp: f64| rng.random_range(-amp..=amp);

    // Individual variation around the shared template.
    let structures: Vec<(Structure, Mat3)> = TEMPLATE
        .iter()
        .map(|s| {
            let center = s.center.map(|c| c + jitter(0.04));
            let radii = s.radii.map(|r| r * (1.0 + jitter(0.08)));
            let orient = s.orient.map(|o| o + jitter(8.0));
            let intensity = (s.intensity + jitter(0.04)).clamp(0.0, 1.0);
            let inv_rot = transpose(&euler_zyx_to_matrix(orient));
            (
                Structure {
                    center,
                    radii,
                    orient,
                    intensity,
                },
                inv_rot,
            )
        })
        .collect();
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let k = [jitter(4.0), jitter(4.0), jitter(4.0)];
            (k, jitter(std::f64::consts::PI))
        })
        .collect();

    let half = (size / 2) as f64;
    let mut data = vec![0.0f32; size * size * size];
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let q = [
                    (x as f64 - half) / half,
                    (y as f64 - half) / half,
                    (z as f64 - half) / half,
                ];
                let mut v = BACKGROUND;
                for (s, inv_rot) in &structures {
                    let d = [q[0] - s.center[0], q[1] - s.center[1], q[2] - s.center[2]];
                    let mut rho2 = 0.0;
                    for i in 0..3 {
                        let local = inv_rot[i][0] * d[0] + inv_rot[i][1] * d[1] + inv_rot[i][2] * d[2];
                        rho2 += (local / s.radii[i]).powi(2);
                    }
                    let m = 1.0 - smoothstep(1.0 - EDGE_SOFTNESS, 1.0 + EDGE_SOFTNESS, rho2.sqrt());
                    v = v * (1.0 - m) + s.intensity * m;
                }
                let texture: f64 = waves
                    .iter()
                    .map(|(k, phase)| (k[0] * q[0] + k[1] * q[1] + k[2] * q[2] + phase).sin())
                    .sum::<f64>()
                    * 0.015;
                data[(z * size + y) * size + x] = (v + texture * (v > BACKGROUND + 0.02) as u8 as f64)
                    .clamp(0.0, 1.0) as f32;
            }
        }
    }
    Volume {
        size,
        voxel_spacing_mm,
        seed,
        data,
    }
}

/// Mean absolute difference between the canonical slice and the slice
/// rotated by 90 degrees about z.
pub fn asymmetry_score(vol: &Volume) -> f64 {
    let n = vol.size;
    let a = slice_plane(vol, &Pose::identity(), n, n).expect("finite pose");
    let b = slice_plane(vol, &Pose::new([0.0; 3], [0.0, 0.0, 90.0]), n, n).expect("finite pose");
    a.mean_abs_diff(&b)
}

/// Generates a deterministic phantom. If the volume for `seed` fails the
/// asymmetry check, `seed + 1`, `seed + 2`, ... are tried; the returned
/// volume records the seed that was used.
pub fn generate_phantom(seed: u64, size: usize) -> Result<Volume> {
    generate_phantom_with_spacing(seed, size, 1.0)
}

pub fn generate_phantom_with_spacing(seed: u64, size: usize, voxel_spacing_mm: f64) -> Result<Volume> {
    if size < MIN_VOLUME_SIZE {
        return Err(invalid!("volume size {size} < {MIN_VOLUME_SIZE}"));
    }
    if !(voxel_spacing_mm.is_finite() && voxel_spacing_mm > 0.0) {
        return Err(invalid!("voxel spacing must be positive, got {voxel_spacing_mm}"));
    }
    for offset in 0..64u64 {
        let vol = build_volume(seed.wrapping_add(offset), size, voxel_spacing_mm);
        if asymmetry_score(&vol) > ASYMMETRY_THRESHOLD {
            return Ok(vol);
        }
    }
    Err(invalid!("no asymmetric phantom found near seed {seed}"))
}

/// Samples an `out_h x out_w` plane through `vol` at `pose`.
pub fn slice_plane(vol: &Volume, pose: &Pose, out_h: usize, out_w: usize) -> Result<SliceImage> {
    if !pose.is_finite() {
        return Err(invalid!("non-finite pose {pose:?}"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("empty output size {out_h}x{out_w}"));
    }
    let rot = pose.rotation();
    let s = vol.voxel_spacing_mm;
    let center = (vol.size / 2) as f64;
    // Voxel coordinates of pixel (row, col):
    //   center + (R * (u, v, 0) + t) / s, with u, v already in voxel units.
    let origin = pose.t.map(|v| center + v / s);
    let (hw, hh) = ((out_w / 2) as f64, (out_h / 2) as f64);
    let mut pixels = Vec::with_capacity(out_h * out_w);
    for row in 0..out_h {
        let v = row as f64 - hh;
        for col in 0..out_w {
            let u = col as f64 - hw;
            let p: [f64; 3] = std::array::from_fn(|i| origin[i] + rot[i][0] * u + rot[i][1] * v);
            pixels.push(vol.sample(p[0], p[1], p[2]).clamp(0.0, 1.0));
        }
    }
    Ok(SliceImage {
        height: out_h,
        width: out_w,
        pixels,
        pose: *pose,
        scan_id: 0,
        frame_index: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub frames: usize,
    /// Per-axis translation bound (mm) around the volume centre.
    pub max_translation_mm: f64,
    /// Per-axis rotation bound (degrees).
    pub max_rotation_deg: f64,
    /// Per-frame, per-axis translation step cap (mm).
    pub step_translation_mm: f64,
    /// Per-frame, per-axis rotation step cap (degrees).
    pub step_rotation_deg: f64,
    /// Velocity persistence in `[0, 1)`; higher is smoother.
    pub smoothness: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            frames: 512,
            max_translation_mm: 10.0,
            max_rotation_deg: 25.0,
            step_translation_mm: 1.0,
            step_rotation_deg: 2.0,
            smoothness: 0.9,
        }
    }
}

pub const MAX_ROTATION_BOUND_DEG: f64 = 45.0;
pub const MAX_STEP_TRANSLATION_MM: f64 = 1.0;
pub const MAX_STEP_ROTATION_DEG: f64 = 2.0;

impl TrajectoryConfig {
    pub fn validate(&self, volume_extent_mm: f64) -> Result<()> {
        let t_cap = 0.25 * volume_extent_mm;
        if self.frames == 0 {
            return Err(invalid!("trajectory needs at least one frame"));
        }
        if !(0.0..=t_cap).contains(&self.max_translation_mm) {
            return Err(invalid!(
                "max_translation_mm {} outside [0, {t_cap}] (25% of volume extent)",
                self.max_translation_mm
            ));
        }
        if !(0.0..=MAX_ROTATION_BOUND_DEG).contains(&self.max_rotation_deg) {
            return Err(invalid!(
                "max_rotation_deg {} outside [0, {MAX_ROTATION_BOUND_DEG}]",
                self.max_rotation_deg
            ));
        }
        if !(0.0..=MAX_STEP_TRANSLATION_MM).contains(&self.step_translation_mm) {
            return Err(invalid!("step_translation_mm {} outside [0, 1]", self.step_translation_mm));
        }
        if !(0.0..=MAX_STEP_ROTATION_DEG).contains(&self.step_rotation_deg) {
            return Err(invalid!("step_rotation_deg {} outside [0, 2]", self.step_rotation_deg));
        }
        if !(0.0..1.0).contains(&self.smoothness) {
            return Err(invalid!("smoothness {} outside [0, 1)", self.smoothness));
        }
        Ok(())
    }
}

/// Smooth bounded random walk through pose space.
pub fn generate_trajectory(cfg: &TrajectoryConfig, volume_extent_mm: f64, seed: u64) -> Result<Vec<Pose>> {
    cfg.validate(volume_extent_mm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = [
        cfg.max_translation_mm,
        cfg.max_translation_mm,
        cfg.max_translation_mm,
        cfg.max_rotation_deg,
        cfg.max_rotation_deg,
        cfg.max_rotation_deg,
    ];
    let caps = [
        cfg.step_translation_mm,
        cfg.step_translation_mm,
        cfg.step_translation_mm,
        cfg.step_rotation_deg,
        cfg.step_rotation_deg,
        cfg.step_rotation_deg,
    ];
    let mut state: [f64; 6] = std::array::from_fn(|i| {
        let b = 0.5 * bounds[i];
        if b > 0.0 {
            rng.random_range(-b..=b)
        } else {
            0.0
        }
    });
    let mut vel = [0.0f64; 6];
    let mut poses = Vec::with_capacity(cfg.frames);
    for frame in 0..cfg.frames {
        if frame > 0 {
            for i in 0..6 {
                let noise = if caps[i] > 0.0 {
                    rng.random_range(-caps[i]..=caps[i])
                } else {
                    0.0
                };
                // Convex combination keeps |vel| <= cap.
                vel[i] = cfg.smoothness * vel[i] + (1.0 - cfg.smoothness) * noise;
                let next = state[i] + vel[i];
                if next.abs() > bounds[i] {
                    state[i] = next.clamp(-bounds[i], bounds[i]);
                    vel[i] = -vel[i];
                } else {
                    state[i] = next;
                }
            }
        }
        poses.push(Pose {
            t: [state[0], state[1], state[2]],
            r: [state[3], state[4], state[5]],
        });
    }
    Ok(poses)
}

/// Simulates one scan: walks the probe and slices a frame at every pose.
pub fn generate_scan(
    vol: &Volume,
    cfg: &TrajectoryConfig,
    seed: u64,
    image_size: (usize, usize),
    scan_id: usize,
) -> Result<Scan> {
    let poses = generate_trajectory(cfg, vol.extent_mm(), seed)?;
    let frames = poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let mut img = slice_plane(vol, pose, image_size.0, image_size.1)?;
            img.scan_id = scan_id;
            img.frame_index = i;
            Ok(img)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scan {
        scan_id,
        volume_seed: vol.seed,
        trajectory_seed: seed,
        frames,
    })
}

/// Uniformly samples an ordered pair of distinct frame indices whose
/// distance is at least `min_gap`.
pub fn sample_pair_indices<R: Rng + ?Sized>(len: usize, min_gap: usize, rng: &mut R) -> Result<(usize, usize)> {
    if len <= min_gap || len < 2 {
        return Err(Error::InsufficientFrames { frames: len, min_gap });
    }
    // Rejection from the uniform distribution over ordered pairs is exactly
    // uniform on the admissible set, which holds >= 2 / len^2 of the mass.
    loop {
        let s = rng.random_range(0..len);
        let t = rng.random_range(0..len);
        if s != t && s.abs_diff(t) >= min_gap {
            return Ok((s, t));
        }
    }
}

/// Pair gap for a scan of `frames` frames, scaled from the clinical setting.
pub fn scaled_min_gap(frames: usize) -> usize {
    let g = (REFERENCE_MIN_GAP as f64 * frames as f64 / REFERENCE_SCAN_FRAMES as f64).round() as usize;
    g.max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_volumes() {
        assert!(matches!(generate_phantom(1, 31), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn phantom_is_deterministic_and_seed_sensitive() {
        let a = generate_phantom(7, 64).unwrap();
        let b = generate_phantom(7, 64).unwrap();
        assert_eq!(a.data, b.data);
        let c = generate_phantom(8, 64).unwrap();
        assert_ne!(a.data, c.data);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn phantom_passes_asymmetry_and_has_structure() {
        let v = generate_phantom(7, 64).unwrap();
        assert!(asymmetry_score(&v) > ASYMMETRY_THRESHOLD);
        // Several distinct intensity plateaus (background, shells, cavities, details).
        let mut hist = [0usize; 10];
        for &x in &v.data {
            hist[((x * 9.999) as usize).min(9)] += 1;
        }
        assert!(hist.iter().filter(|&&c| c > 500).count() >= 4, "{hist:?}");
    }

    #[test]
    fn identity_slice_is_central_axial_plane() {
        let v = generate_phantom(3, 32).unwrap();
        let img = slice_plane(&v, &Pose::identity(), 32, 32).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                assert!((img.pixel(r, c) - v.at(c, r, 16)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn full_turn_matches_no_turn() {
        let v = generate_phantom(3, 32).unwrap();
        let base = Pose::new([1.5, -2.0, 0.5], [10.0, -5.0, 0.0]);
        let turned = Pose {
            r: [10.0, -5.0, 360.0],
            ..base
        };
        let a = slice_plane(&v, &base, 32, 32).unwrap();
        let b = slice_plane(&v, &turned, 32, 32).unwrap();
        for (x, y) in a.pixels.iter().zip(&b.pixels) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn in_plane_translation_shifts_columns() {
        let v = generate_phantom(3, 32).unwrap();
        let p = Pose::new([0.7, -1.3, 2.1], [12.0, -7.0, 23.0]);
        let rot = p.rotation();
        let s = v.voxel_spacing_mm;
        let shifted = Pose {
            t: std::array::from_fn(|i| p.t[i] + rot[i][0] * s),
            ..p
        };
        let a = slice_plane(&v, &p, 24, 24).unwrap();
        let b = slice_plane(&v, &shifted, 24, 24).unwrap();
        for r in 1..23 {
            for c in 1..22 {
                assert!((b.pixel(r, c) - a.pixel(r, c + 1)).abs() < 1e-5, "r={r} c={c}");
            }
        }
    }

    #[test]
    fn slicing_rejects_non_finite_pose() {
        let v = generate_phantom(3, 32).unwrap();
        let p = Pose {
            t: [0.0, f64::INFINITY, 0.0],
            r: [0.0; 3],
        };
        assert!(matches!(slice_plane(&v, &p, 8, 8), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn scan_respects_step_caps() {
        let v = generate_phantom(5, 32).unwrap();
        let cfg = TrajectoryConfig {
            frames: 512,
            max_translation_mm: 6.0,
            ..Default::default()
        };
        let scan = generate_scan(&v, &cfg, 11, (16, 16), 0).unwrap();
        assert_eq!(scan.len(), 512);
        for (i, w) in scan.frames.windows(2).enumerate() {
            assert_eq!(w[0].frame_index, i);
            for k in 0..3 {
                assert!((w[1].pose.t[k] - w[0].pose.t[k]).abs() <= 1.0 + 1e-12);
                assert!((w[1].pose.r[k] - w[0].pose.r[k]).abs() <= 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn zero_step_caps_freeze_the_probe() {
        let v = generate_phantom(5, 32).unwrap();
        let cfg = TrajectoryConfig {
            frames: 20,
            max_translation_mm: 6.0,
            step_translation_mm: 0.0,
            step_rotation_deg: 0.0,
            ..Default::default()
        };
        let scan = generate_scan(&v, &cfg, 2, (16, 16), 0).unwrap();
        for f in &scan.frames[1..] {
            assert_eq!(f.pixels, scan.frames[0].pixels);
            assert_eq!(f.pose, scan.frames[0].pose);
        }
    }

    #[test]
    fn trajectory_bounds_are_validated() {
        let bad_t = TrajectoryConfig {
            max_translation_mm: 9.0,
            ..Default::default()
        };
        assert!(bad_t.validate(32.0).is_err());
        let bad_r = TrajectoryConfig {
            max_rotation_deg: 50.0,
            ..Default::default()
        };
        assert!(bad_r.validate(64.0).is_err());
        let bad_step = TrajectoryConfig {
            step_translation_mm: 1.5,
            ..Default::default()
        };
        assert!(bad_step.validate(64.0).is_err());
    }

    #[test]
    fn pair_sampling_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_pair_indices(100, 150, &mut rng),
            Err(Error::InsufficientFrames { .. })
        ));
        for _ in 0..1000 {
            let (s, t) = sample_pair_indices(5, 0, &mut rng).unwrap();
            assert_ne!(s, t);
        }
    }

    #[test]
    fn min_gap_scaling() {
        assert_eq!(scaled_min_gap(REFERENCE_SCAN_FRAMES), 150);
        assert_eq!(scaled_min_gap(512), 21);
        assert_eq!(scaled_min_gap(3), 1);
    }
}
