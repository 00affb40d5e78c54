//! Binary masks and axis-aligned boxes in input-pixel coordinates.

use serde::{Deserialize, Serialize};

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "mask data length");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    pub fn same_size(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        assert!(self.same_size(other));
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    pub fn union_count(&self, other: &BinaryMask) -> usize {
        assert!(self.same_size(other));
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a || **b)
            .count()
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        assert!(self.same_size(other));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a && *b)
            .collect();
        BinaryMask::from_vec(self.width, self.height, data)
    }

    pub fn or(&self, other: &BinaryMask) -> BinaryMask {
        assert!(self.same_size(other));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a || *b)
            .collect();
        BinaryMask::from_vec(self.width, self.height, data)
    }

    /// `self` minus `other`.
    pub fn and_not(&self, other: &BinaryMask) -> BinaryMask {
        assert!(self.same_size(other));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a && !*b)
            .collect();
        BinaryMask::from_vec(self.width, self.height, data)
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    /// Tight box with pixels treated as unit squares: `[min_x, max_x + 1)`.
    pub fn tight_box(&self) -> Option<BoxXyxy> {
        let mut it = self.foreground();
        let (x0, y0) = it.next()?;
        let (mut x1, mut y1, mut x2, mut y2) = (x0, y0, x0, y0);
        for (x, y) in it {
            x1 = x1.min(x);
            x2 = x2.max(x);
            y1 = y1.min(y);
            y2 = y2.max(y);
        }
        Some(BoxXyxy::new(
            x1 as f64,
            y1 as f64,
            (x2 + 1) as f64,
            (y2 + 1) as f64,
        ))
    }

    /// Mean of the integer coordinates of foreground pixels.
    pub fn mass_center(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (x, y) in self.foreground() {
            sx += x as f64;
            sy += y as f64;
            n += 1;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }
}

/// Axis-aligned box `(x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXyxy {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_well_formed(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn intersection(&self, other: &BoxXyxy) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BoxXyxy) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}
