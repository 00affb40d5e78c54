//! On-disk dataset layout:
//!
//! ```text
//! manifest.json            spec version, config echo, scene count, rng algorithm, seed
//! scene_<k>/image.png      8-bit RGB
//! scene_<k>/inst_<i>.png   8-bit full (amodal) mask, 0 or 255
//! scene_<k>/panoptic.png   16-bit segment ids (0 = void)
//! scene_<k>/stuff.png      8-bit stuff class under every pixel
//! scene_<k>/annot.json     classes, boxes, shapes, z-order, segment table
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DatasetConfig, InstanceAnnotation, SceneAnnotation, ShapeInstance};
use crate::mask::{BinaryMask, BoxXyxy};
use crate::numerics::FeatureMap;
use crate::panoptic::{PanopticMap, Segment};

pub const SPEC_VERSION: &str = "1.0";
pub const RNG_ALGORITHM: &str =
    "ChaCha8 (rand_chacha 0.9): ChaCha8Rng::seed_from_u64(seed), set_stream(scene_index)";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("scene {scene}, file {file}: {reason}")]
    Scene {
        scene: usize,
        file: String,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec_version: String,
    pub config: DatasetConfig,
    pub scene_count: usize,
    pub scene_indices: Vec<usize>,
    pub rng_algorithm: String,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceRecord {
    index: usize,
    class_id: u32,
    z_order: i32,
    bbox: BoxXyxy,
    segment_id: u16,
    mask_file: String,
    shape: ShapeInstance,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotRecord {
    scene: usize,
    width: usize,
    height: usize,
    instances: Vec<InstanceRecord>,
    segments: Vec<Segment>,
    identical_pairs: Vec<(usize, usize)>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn scene_err(scene: usize, file: &str, reason: impl ToString) -> DatasetError {
    DatasetError::Scene {
        scene,
        file: file.to_string(),
        reason: reason.to_string(),
    }
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index}"))
}

fn write_scene(dir: &Path, scene: &SceneAnnotation) -> Result<(), DatasetError> {
    let k = scene.index;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (w, h) = (scene.width(), scene.height());

    let mut rgb = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2]
                .map(|c| (scene.image.at(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    rgb.save(dir.join("image.png"))
        .map_err(|e| scene_err(k, "image.png", e))?;

    let mut records = Vec::new();
    for (i, inst) in scene.instances.iter().enumerate() {
        let name = format!("inst_{i}.png");
        save_mask(&inst.mask, &dir.join(&name)).map_err(|e| scene_err(k, &name, e))?;
        let segment_id = scene
            .panoptic
            .segments()
            .iter()
            .find(|s| s.instance == Some(i))
            .map(|s| s.id)
            .ok_or_else(|| scene_err(k, "annot.json", format!("instance {i} has no segment")))?;
        records.push(InstanceRecord {
            index: i,
            class_id: inst.class_id(),
            z_order: inst.shape.z_order,
            bbox: inst.bbox,
            segment_id,
            mask_file: name,
            shape: inst.shape.clone(),
        });
    }

    let pano: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, scene.panoptic.ids().to_vec())
            .expect("id map size");
    pano.save(dir.join("panoptic.png"))
        .map_err(|e| scene_err(k, "panoptic.png", e))?;
    let stuff = GrayImage::from_raw(w as u32, h as u32, scene.stuff_labels.clone())
        .expect("stuff map size");
    stuff
        .save(dir.join("stuff.png"))
        .map_err(|e| scene_err(k, "stuff.png", e))?;

    let annot = AnnotRecord {
        scene: k,
        width: w,
        height: h,
        instances: records,
        segments: scene.panoptic.segments().to_vec(),
        identical_pairs: scene.identical_pairs.clone(),
    };
    let path = dir.join("annot.json");
    let text = serde_json::to_string_pretty(&annot).map_err(|e| scene_err(k, "annot.json", e))?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(())
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<(), image::ImageError> {
    let data = mask
        .data()
        .iter()
        .map(|&v| if v { 255 } else { 0 })
        .collect();
    GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data)
        .expect("mask size")
        .save(path)
}

/// Writes every scene, then `manifest.json` last.
pub fn write_dataset(
    config: &DatasetConfig,
    scenes: &[SceneAnnotation],
    root: &Path,
) -> Result<Manifest, DatasetError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    for scene in scenes {
        write_scene(&scene_dir(root, scene.index), scene)?;
    }
    let manifest = Manifest {
        spec_version: SPEC_VERSION.to_string(),
        config: config.clone(),
        scene_count: scenes.len(),
        scene_indices: scenes.iter().map(|s| s.index).collect(),
        rng_algorithm: RNG_ALGORITHM.to_string(),
        seed: config.rng_seed,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

fn load_gray(
    dir: &Path,
    scene: usize,
    file: &str,
    w: usize,
    h: usize,
) -> Result<Vec<u8>, DatasetError> {
    let img = image::open(dir.join(file)).map_err(|e| scene_err(scene, file, e))?;
    if img.width() as usize != w || img.height() as usize != h {
        return Err(scene_err(
            scene,
            file,
            format!("size {}x{}, expected {w}x{h}", img.width(), img.height()),
        ));
    }
    Ok(img.into_luma8().into_raw())
}

fn read_scene(dir: &Path, expected_index: usize) -> Result<SceneAnnotation, DatasetError> {
    let k = expected_index;
    let annot_path = dir.join("annot.json");
    let text = fs::read_to_string(&annot_path).map_err(|e| scene_err(k, "annot.json", e))?;
    let annot: AnnotRecord =
        serde_json::from_str(&text).map_err(|e| scene_err(k, "annot.json", e))?;
    if annot.scene != k {
        return Err(scene_err(
            k,
            "annot.json",
            format!("records scene {}", annot.scene),
        ));
    }
    let (w, h) = (annot.width, annot.height);

    let img = image::open(dir.join("image.png")).map_err(|e| scene_err(k, "image.png", e))?;
    if img.width() as usize != w || img.height() as usize != h {
        return Err(scene_err(k, "image.png", "size does not match annot.json"));
    }
    let rgb = img.into_rgb8();
    let mut data = vec![0.0; 3 * w * h];
    for (i, p) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = p.0[c] as f64 / 255.0;
        }
    }
    let image = FeatureMap::new(3, h, w, 1, data).map_err(|e| scene_err(k, "image.png", e))?;

    let pano =
        image::open(dir.join("panoptic.png")).map_err(|e| scene_err(k, "panoptic.png", e))?;
    if pano.width() as usize != w || pano.height() as usize != h {
        return Err(scene_err(
            k,
            "panoptic.png",
            "size does not match annot.json",
        ));
    }
    let ids = pano.into_luma16().into_raw();
    let panoptic =
        PanopticMap::new(w, h, ids, annot.segments).map_err(|e| scene_err(k, "panoptic.png", e))?;
    let stuff_labels = load_gray(dir, k, "stuff.png", w, h)?;

    let mut instances = Vec::with_capacity(annot.instances.len());
    for rec in annot.instances {
        let raw = load_gray(dir, k, &rec.mask_file, w, h)?;
        let mask = BinaryMask::from_vec(w, h, raw.iter().map(|&v| v >= 128).collect());
        let visible = panoptic.segment_mask(rec.segment_id);
        instances.push(InstanceAnnotation {
            shape: rec.shape,
            mask,
            bbox: rec.bbox,
            visible,
        });
    }
    Ok(SceneAnnotation {
        index: k,
        image,
        instances,
        panoptic,
        stuff_labels,
        identical_pairs: annot.identical_pairs,
    })
}

pub fn read_manifest(root: &Path) -> Result<Manifest, DatasetError> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.scene_count != manifest.scene_indices.len() {
        return Err(DatasetError::Manifest {
            path,
            reason: "scene_count disagrees with scene_indices".into(),
        });
    }
    Ok(manifest)
}

pub fn read_dataset(root: &Path) -> Result<(Manifest, Vec<SceneAnnotation>), DatasetError> {
    let manifest = read_manifest(root)?;
    let scenes = manifest
        .scene_indices
        .iter()
        .map(|&k| read_scene(&scene_dir(root, k), k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((manifest, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_scene;

    #[test]
    fn empty_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            num_scenes: 0,
            ..DatasetConfig::default()
        };
        let m = write_dataset(&cfg, &[], dir.path()).unwrap();
        assert_eq!(m.scene_count, 0);
        let (m2, scenes) = read_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert!(scenes.is_empty());
    }

    #[test]
    fn three_scene_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            num_scenes: 3,
            identical_pair_prob: 0.7,
            ..DatasetConfig::default()
        };
        let scenes: Vec<_> = (0..3).map(|k| generate_scene(&cfg, k)).collect();
        write_dataset(&cfg, &scenes, dir.path()).unwrap();
        let (m, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(m.rng_algorithm, RNG_ALGORITHM);
        assert_eq!(back, scenes);
    }

    #[test]
    fn truncated_mask_names_scene_and_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            num_scenes: 2,
            ..DatasetConfig::default()
        };
        let scenes: Vec<_> = (0..2).map(|k| generate_scene(&cfg, k)).collect();
        write_dataset(&cfg, &scenes, dir.path()).unwrap();
        let victim = scene_dir(dir.path(), 1).join("inst_0.png");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
        match read_dataset(dir.path()) {
            Err(DatasetError::Scene { scene, file, .. }) => {
                assert_eq!(scene, 1);
                assert_eq!(file, "inst_0.png");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_manifest_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(DatasetError::Io { .. })
        ));
    }
}
