//! Per-pixel panoptic labelling: every pixel carries one segment id.
//!
//! Category ids: things are `1..=C`, stuff classes follow as `C+1..=C+S`.
//! Segment id 0 is void.

use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;

pub const VOID: u16 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u16,
    pub category: u32,
    pub is_thing: bool,
    /// Index of the instance that produced this segment, for thing segments.
    pub instance: Option<usize>,
    pub area: usize,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanopticMap {
    width: usize,
    height: usize,
    ids: Vec<u16>,
    segments: Vec<Segment>,
}

impl PanopticMap {
    /// Builds a map and recomputes every segment's area from `ids`.
    pub fn new(
        width: usize,
        height: usize,
        ids: Vec<u16>,
        mut segments: Vec<Segment>,
    ) -> Result<Self, String> {
        if ids.len() != width * height {
            return Err(format!(
                "id map has {} pixels, expected {}",
                ids.len(),
                width * height
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &segments {
            if s.id == VOID {
                return Err("segment id 0 is reserved for void".into());
            }
            if !seen.insert(s.id) {
                return Err(format!("duplicate segment id {}", s.id));
            }
        }
        let mut areas = std::collections::HashMap::<u16, usize>::new();
        for &id in &ids {
            if id != VOID {
                *areas.entry(id).or_default() += 1;
            }
        }
        for id in areas.keys() {
            if !seen.contains(id) {
                return Err(format!("pixel carries unknown segment id {id}"));
            }
        }
        for s in &mut segments {
            s.area = areas.get(&s.id).copied().unwrap_or(0);
        }
        Ok(Self {
            width,
            height,
            ids,
            segments,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn id_at(&self, x: usize, y: usize) -> u16 {
        self.ids[y * self.width + x]
    }

    pub fn segment(&self, id: u16) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }

    /// Category at a pixel, 0 for void.
    pub fn category_at(&self, x: usize, y: usize) -> u32 {
        let id = self.id_at(x, y);
        self.segment(id).map_or(0, |s| s.category)
    }

    pub fn void_count(&self) -> usize {
        self.ids.iter().filter(|&&id| id == VOID).count()
    }

    pub fn segment_mask(&self, id: u16) -> BinaryMask {
        BinaryMask::from_vec(
            self.width,
            self.height,
            self.ids.iter().map(|&v| v == id).collect(),
        )
    }

    /// Sum of segment areas plus void pixels equals the pixel count.
    pub fn check_bookkeeping(&self) -> bool {
        let covered: usize = self.segments.iter().map(|s| s.area).sum();
        covered + self.void_count() == self.width * self.height
    }
}
