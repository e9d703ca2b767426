//! On-disk (image, pose) datasets.
//!
//! ```text
//! <root>/manifest.json
//! <root>/scan_<k>/poses.jsonl      one record per frame
//! <root>/scan_<k>/frame_<i>.png    8-bit grayscale, or .f32 when lossless
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::phantom::{Scan, SliceImage};
use crate::pose::Pose;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const POSES_FILE: &str = "poses.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub name: String,
    pub scan_id: usize,
    pub split: Split,
    pub volume_seed: u64,
    pub trajectory_seed: u64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub image_height: usize,
    pub image_width: usize,
    pub volume_size: usize,
    pub voxel_spacing_mm: f64,
    pub lossless: bool,
    pub total_frames: usize,
    pub scans: Vec<ScanEntry>,
}

impl Manifest {
    pub fn split_scans(&self, split: Split) -> impl Iterator<Item = &ScanEntry> {
        self.scans.iter().filter(move |s| s.split == split)
    }

    pub fn frames_in(&self, split: Split) -> usize {
        self.split_scans(split).map(|s| s.frames).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub frame_index: usize,
    pub t: [f64; 3],
    pub r: [f64; 3],
    pub image: String,
}

#[derive(Debug, Clone, Copy)]
pub struct WriteOptions {
    pub volume_size: usize,
    pub voxel_spacing_mm: f64,
    pub lossless: bool,
}

/// Writes `scans` under `root`, which must be absent or empty.
pub fn write_dataset(root: &Path, scans: &[(&Scan, Split)], opts: &WriteOptions) -> Result<Manifest> {
    if scans.is_empty() {
        return Err(invalid!("no scans to write"));
    }
    if root.exists() {
        let mut entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        if entries.next().is_some() {
            return Err(invalid!("dataset root {} is not empty", root.display()));
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;

    let (h, w) = {
        let f = scans[0]
            .0
            .frames
            .first()
            .ok_or_else(|| invalid!("scan {} has no frames", scans[0].0.scan_id))?;
        (f.height, f.width)
    };
    let mut entries = Vec::with_capacity(scans.len());
    for (k, (scan, split)) in scans.iter().enumerate() {
        let name = format!("scan_{k}");
        let dir = root.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let poses_path = dir.join(POSES_FILE);
        let mut poses = std::io::BufWriter::new(fs::File::create(&poses_path).map_err(|e| Error::io(&poses_path, e))?);
        for frame in &scan.frames {
            if frame.height != h || frame.width != w {
                return Err(invalid!("mixed image sizes in dataset"));
            }
            let ext = if opts.lossless { "f32" } else { "png" };
            let file = format!("frame_{:05}.{ext}", frame.frame_index);
            let img_path = dir.join(&file);
            write_image(&img_path, frame, opts.lossless)?;
            let rec = PoseRecord {
                frame_index: frame.frame_index,
                t: frame.pose.t,
                r: frame.pose.r,
                image: file,
            };
            let line = serde_json::to_string(&rec).expect("pose record serializes");
            writeln!(poses, "{line}").map_err(|e| Error::io(&poses_path, e))?;
        }
        poses.flush().map_err(|e| Error::io(&poses_path, e))?;
        entries.push(ScanEntry {
            name,
            scan_id: scan.scan_id,
            split: *split,
            volume_seed: scan.volume_seed,
            trajectory_seed: scan.trajectory_seed,
            frames: scan.len(),
        });
    }
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        image_height: h,
        image_width: w,
        volume_size: opts.volume_size,
        voxel_spacing_mm: opts.voxel_spacing_mm,
        lossless: opts.lossless,
        total_frames: entries.iter().map(|e| e.frames).sum(),
        scans: entries,
    };
    let path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn write_image(path: &Path, frame: &SliceImage, lossless: bool) -> Result<()> {
    if lossless {
        let mut bytes = Vec::with_capacity(frame.pixels.len() * 4);
        for v in &frame.pixels {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    } else {
        let raw: Vec<u8> = frame
            .pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(frame.width as u32, frame.height as u32, raw)
            .ok_or_else(|| invalid!("image buffer size mismatch"))?;
        img.save(path).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// A dataset opened for reading. Poses are loaded eagerly (they are small);
/// images are read from disk on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    poses: Vec<Vec<PoseRecord>>,
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    Dataset::open(root)
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::format(&mpath, format!("cannot read manifest: {e}")))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(
                &mpath,
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        let mut poses = Vec::with_capacity(manifest.scans.len());
        for entry in &manifest.scans {
            let ppath = root.join(&entry.name).join(POSES_FILE);
            let file = fs::File::open(&ppath).map_err(|e| Error::format(&ppath, format!("cannot open: {e}")))?;
            let mut recs = Vec::with_capacity(entry.frames);
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::format(&ppath, e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: PoseRecord =
                    serde_json::from_str(&line).map_err(|e| Error::format(&ppath, format!("line {}: {e}", i + 1)))?;
                if rec.frame_index != recs.len() {
                    return Err(Error::format(&ppath, format!("line {}: frame_index out of order", i + 1)));
                }
                recs.push(rec);
            }
            if recs.len() != entry.frames {
                return Err(Error::format(
                    &ppath,
                    format!("manifest lists {} frames, found {}", entry.frames, recs.len()),
                ));
            }
            poses.push(recs);
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            poses,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn num_scans(&self) -> usize {
        self.manifest.scans.len()
    }

    pub fn scan_entry(&self, k: usize) -> &ScanEntry {
        &self.manifest.scans[k]
    }

    pub fn pose(&self, scan: usize, frame: usize) -> Pose {
        let r = &self.poses[scan][frame];
        Pose { t: r.t, r: r.r }
    }

    /// Reads a single frame from disk.
    pub fn frame(&self, scan: usize, frame: usize) -> Result<SliceImage> {
        let entry = self
            .manifest
            .scans
            .get(scan)
            .ok_or_else(|| invalid!("scan index {scan} out of range"))?;
        let rec = self.poses[scan]
            .get(frame)
            .ok_or_else(|| invalid!("frame {frame} out of range for {}", entry.name))?;
        let path = self.root.join(&entry.name).join(&rec.image);
        let (h, w) = (self.manifest.image_height, self.manifest.image_width);
        let pixels = if self.manifest.lossless {
            let bytes = fs::read(&path).map_err(|e| Error::format(&path, e.to_string()))?;
            if bytes.len() != h * w * 4 {
                return Err(Error::format(&path, format!("expected {} bytes, got {}", h * w * 4, bytes.len())));
            }
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        } else {
            let img = image::open(&path).map_err(|e| Error::format(&path, e.to_string()))?.to_luma8();
            if img.width() as usize != w || img.height() as usize != h {
                return Err(Error::format(&path, "image size disagrees with manifest"));
            }
            img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect()
        };
        Ok(SliceImage {
            height: h,
            width: w,
            pixels,
            pose: Pose { t: rec.t, r: rec.r },
            scan_id: entry.scan_id,
            frame_index: rec.frame_index,
        })
    }

    pub fn load_scan(&self, k: usize) -> Result<Scan> {
        let entry = self.scan_entry(k);
        let frames = (0..entry.frames).map(|i| self.frame(k, i)).collect::<Result<Vec<_>>>()?;
        Ok(Scan {
            scan_id: entry.scan_id,
            volume_seed: entry.volume_seed,
            trajectory_seed: entry.trajectory_seed,
            frames,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Scan>> {
        (0..self.num_scans())
            .filter(|&k| self.scan_entry(k).split == split)
            .map(|k| self.load_scan(k))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, generate_scan, TrajectoryConfig};

    fn scans(n: usize, frames: usize) -> Vec<Scan> {
        (0..n)
            .map(|k| {
                let v = generate_phantom(100 + k as u64, 32).unwrap();
                let cfg = TrajectoryConfig {
                    frames,
                    max_translation_mm: 6.0,
                    ..Default::default()
                };
                generate_scan(&v, &cfg, 7 + k as u64, (16, 16), k).unwrap()
            })
            .collect()
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scans = scans(2, 16);
        let refs: Vec<_> = scans.iter().map(|s| (s, Split::Train)).collect();
        let opts = WriteOptions {
            volume_size: 32,
            voxel_spacing_mm: 1.0,
            lossless: false,
        };
        let m = write_dataset(dir.path(), &refs, &opts).unwrap();
        assert_eq!(m.total_frames, 32);
        let ds = read_dataset(dir.path()).unwrap();
        for (k, scan) in scans.iter().enumerate() {
            let back = ds.load_scan(k).unwrap();
            for (a, b) in scan.frames.iter().zip(&back.frames) {
                assert_eq!(a.pose, b.pose);
                for (x, y) in a.pixels.iter().zip(&b.pixels) {
                    assert!((x - y).abs() <= 1.0 / 255.0);
                }
            }
        }
    }

    #[test]
    fn lossless_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let scans = scans(1, 8);
        let opts = WriteOptions {
            volume_size: 32,
            voxel_spacing_mm: 1.0,
            lossless: true,
        };
        write_dataset(dir.path(), &[(&scans[0], Split::Test)], &opts).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.load_scan(0).unwrap().frames, scans[0].frames);
    }

    #[test]
    fn empty_directory_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        match err {
            Error::Format { path, .. } => assert!(path.ends_with(MANIFEST_FILE)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_poses_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let scans = scans(1, 4);
        let opts = WriteOptions {
            volume_size: 32,
            voxel_spacing_mm: 1.0,
            lossless: false,
        };
        write_dataset(dir.path(), &[(&scans[0], Split::Train)], &opts).unwrap();
        let p = dir.path().join("scan_0").join(POSES_FILE);
        fs::write(&p, "{not json}\n").unwrap();
        match read_dataset(dir.path()).unwrap_err() {
            Error::Format { path, .. } => assert_eq!(path, p),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn refuses_non_empty_root() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("junk"), "x").unwrap();
        let scans = scans(1, 2);
        let opts = WriteOptions {
            volume_size: 32,
            voxel_spacing_mm: 1.0,
            lossless: false,
        };
        assert!(write_dataset(dir.path(), &[(&scans[0], Split::Train)], &opts).is_err());
    }
}
