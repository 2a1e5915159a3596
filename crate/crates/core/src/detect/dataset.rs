//! Scene dataset on disk: per scene a binary point cloud (`<name>.cloud`),
//! a ground-truth box file (`<name>.boxes`, one box per line:
//! `cx cy cz length width height yaw class`), and for generated data a
//! `<name>.manifest` recording the seed and a config hash. Detection output
//! uses the same box line format with a trailing score column.

use super::{Detection, GtObject, SceneSample};
use crate::geometry::{Box3D, Vec3};
use crate::sparse::{read_cloud_binary, write_cloud_binary};
use crate::synth::SyntheticScene;
use crate::{Error, Result};
use std::path::{Path, PathBuf};

pub fn write_gt_boxes(path: &Path, objects: &[GtObject]) -> Result<()> {
    let mut out = String::new();
    for o in objects {
        let b = &o.box3d;
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            b.center.x,
            b.center.y,
            b.center.z,
            b.size.x,
            b.size.y,
            b.size.z,
            b.rotation.yaw(),
            o.class_id
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_gt_boxes(path: &Path) -> Result<Vec<GtObject>> {
    let display = path.display().to_string();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::format(
                &display,
                format!("line {}: expected 8 fields, got {}", lineno + 1, fields.len()),
            ));
        }
        let nums: Vec<f64> = fields[..7]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(&display, format!("line {}: bad number", lineno + 1)))?;
        let class_id: usize = fields[7]
            .parse()
            .map_err(|_| Error::format(&display, format!("line {}: bad class id", lineno + 1)))?;
        out.push(GtObject {
            box3d: Box3D::with_yaw(
                Vec3::new(nums[0], nums[1], nums[2]),
                Vec3::new(nums[3], nums[4], nums[5]),
                nums[6],
            ),
            class_id,
        });
    }
    Ok(out)
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    let mut out = String::new();
    for d in detections {
        let b = &d.box3d;
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {}\n",
            b.center.x,
            b.center.y,
            b.center.z,
            b.size.x,
            b.size.y,
            b.size.z,
            b.rotation.yaw(),
            d.class_id,
            d.score
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(Error::format(
                &display,
                format!("line {}: expected 9 fields, got {}", lineno + 1, fields.len()),
            ));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::format(&display, format!("line {}: bad number", lineno + 1)))
        };
        out.push(Detection {
            box3d: Box3D::with_yaw(
                Vec3::new(f(0)?, f(1)?, f(2)?),
                Vec3::new(f(3)?, f(4)?, f(5)?),
                f(6)?,
            ),
            class_id: fields[7].parse().map_err(|_| {
                Error::format(&display, format!("line {}: bad class id", lineno + 1))
            })?,
            score: f(8)?,
            point_index: 0,
        });
    }
    Ok(out)
}

/// Writes one generated scene (cloud + ground truth + manifest).
pub fn write_scene(dir: &Path, name: &str, scene: &SyntheticScene, config_hash: u64) -> Result<()> {
    write_cloud_binary(&dir.join(format!("{name}.cloud")), &scene.cloud)?;
    let objects: Vec<GtObject> = scene
        .objects
        .iter()
        .map(|o| GtObject {
            box3d: o.gt_box,
            class_id: o.class_id,
        })
        .collect();
    write_gt_boxes(&dir.join(format!("{name}.boxes")), &objects)?;
    let manifest = format!("seed = {}\nconfig_hash = {:016x}\n", scene.seed, config_hash);
    let manifest_path = dir.join(format!("{name}.manifest"));
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))
}

/// Loads every `<name>.cloud` in a directory together with its `.boxes`
/// file (which may be absent for inference-only data), sorted by name.
pub fn read_scene_dir(dir: &Path) -> Result<Vec<(String, SceneSample)>> {
    let display = dir.display().to_string();
    let mut cloud_paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(&display, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "cloud"))
        .collect();
    cloud_paths.sort();
    if cloud_paths.is_empty() {
        return Err(Error::format(&display, "no .cloud files found"));
    }
    let mut out = Vec::with_capacity(cloud_paths.len());
    for cloud_path in cloud_paths {
        let name = cloud_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::format(&display, "unreadable file name"))?
            .to_string();
        let cloud = read_cloud_binary(&cloud_path)?;
        let boxes_path = cloud_path.with_extension("boxes");
        let gt = if boxes_path.exists() {
            read_gt_boxes(&boxes_path)?
        } else {
            Vec::new()
        };
        out.push((
            name,
            SceneSample {
                positions: cloud.positions,
                gt,
            },
        ));
    }
    Ok(out)
}

/// FNV-1a over a config's canonical text, recorded in scene manifests.
pub fn config_hash(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
