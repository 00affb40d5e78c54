//! Per-image result files and the run-length mask encoding.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;

use super::{InferenceError, InferenceOutput};

pub const RLE_FORMAT: &str =
    "row-major run lengths over the width x height grid, alternating background/foreground, first run is background (may be 0)";

/// Run lengths of `mask` in row-major order, starting with a background run.
pub fn rle_encode(mask: &BinaryMask) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &v in mask.data() {
        if v != current {
            counts.push(run);
            run = 0;
            current = v;
        }
        run += 1;
    }
    counts.push(run);
    counts
}

pub fn rle_decode(counts: &[u32], width: usize, height: usize) -> Result<BinaryMask, String> {
    let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
    if total != (width * height) as u64 {
        return Err(format!(
            "runs cover {total} pixels, expected {}",
            width * height
        ));
    }
    let mut data = Vec::with_capacity(width * height);
    for (i, &c) in counts.iter().enumerate() {
        data.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
    }
    Ok(BinaryMask::from_vec(width, height, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub class_id: u32,
    pub score: f64,
    /// `[x1, y1, x2, y2]`; absent for an empty mask on the mask-NMS path.
    pub bbox: Option<[f64; 4]>,
    pub area: usize,
    pub empty: bool,
    pub level: String,
    pub x: usize,
    pub y: usize,
    pub rle: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceFile {
    pub rle_format: String,
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub candidates: usize,
    pub detections: Vec<DetectionRecord>,
    pub panoptic_png: Option<String>,
    pub segments_json: Option<String>,
}

/// Writes `<name>.json`, plus `<name>_panoptic.png` and `<name>_segments.json`
/// when a panoptic map is present. Returns the JSON path.
pub fn write_inference(
    dir: &Path,
    name: &str,
    output: &InferenceOutput,
) -> Result<PathBuf, InferenceError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| InferenceError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (width, height) = match (output.instances.first(), &output.panoptic) {
        (_, Some(p)) => (p.width(), p.height()),
        (Some(i), None) => (i.mask.width(), i.mask.height()),
        (None, None) => (0, 0),
    };
    let detections = output
        .instances
        .iter()
        .map(|r| DetectionRecord {
            class_id: r.class_id,
            score: r.score,
            bbox: r.bbox.map(|b| [b.x1, b.y1, b.x2, b.y2]),
            area: r.area,
            empty: r.empty,
            level: r.level.name(),
            x: r.x,
            y: r.y,
            rle: rle_encode(&r.mask),
        })
        .collect();

    let mut file = InferenceFile {
        rle_format: RLE_FORMAT.into(),
        image: name.into(),
        width,
        height,
        candidates: output.candidates,
        detections,
        panoptic_png: None,
        segments_json: None,
    };
    if let Some(pano) = &output.panoptic {
        let png = format!("{name}_panoptic.png");
        let path = dir.join(&png);
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
            pano.width() as u32,
            pano.height() as u32,
            pano.ids().to_vec(),
        )
        .expect("id map size");
        buf.save(&path).map_err(|e| InferenceError::Write {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let seg = format!("{name}_segments.json");
        let path = dir.join(&seg);
        let json = serde_json::to_string_pretty(pano.segments()).expect("segments serialize");
        fs::write(&path, json).map_err(io_err(&path))?;
        file.panoptic_png = Some(png);
        file.segments_json = Some(seg);
    }
    let path = dir.join(format!("{name}.json"));
    let json = serde_json::to_string_pretty(&file).expect("inference file serializes");
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(path)
}
