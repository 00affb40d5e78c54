use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

/// One analytic shape. Coordinates are continuous input pixels; pixel `(x, y)`
/// covers `[x, x+1) x [y, y+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub class_id: u32,
    pub kind: ShapeKind,
    pub center: (f64, f64),
    /// Semi-axes for ellipses, half-extents for rectangles, circumradius scale for triangles.
    pub radii: (f64, f64),
    /// Radians, counter-clockwise in image coordinates.
    pub rotation: f64,
    /// Higher is in front.
    pub z_order: i32,
    pub fill: [u8; 3],
}

impl ShapeInstance {
    fn to_local(&self, px: f64, py: f64) -> (f64, f64) {
        let (dx, dy) = (px - self.center.0, py - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    fn triangle_vertices(&self) -> [(f64, f64); 3] {
        let (s, c) = self.rotation.sin_cos();
        let mut v = [(0.0, 0.0); 3];
        for (k, out) in v.iter_mut().enumerate() {
            let a = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::TAU / 3.0;
            let (lx, ly) = (self.radii.0 * a.cos(), self.radii.1 * a.sin());
            *out = (
                self.center.0 + c * lx - s * ly,
                self.center.1 + s * lx + c * ly,
            );
        }
        v
    }

    /// Point-in-shape test, boundary inclusive.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (rx, ry) = self.radii;
        match self.kind {
            ShapeKind::Ellipse => {
                let (lx, ly) = self.to_local(px, py);
                (lx / rx).powi(2) + (ly / ry).powi(2) <= 1.0
            }
            ShapeKind::Rectangle => {
                let (lx, ly) = self.to_local(px, py);
                lx.abs() <= rx && ly.abs() <= ry
            }
            ShapeKind::Triangle => {
                let v = self.triangle_vertices();
                let edge = |a: (f64, f64), b: (f64, f64)| {
                    (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0)
                };
                let d0 = edge(v[0], v[1]);
                let d1 = edge(v[1], v[2]);
                let d2 = edge(v[2], v[0]);
                let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }

    pub fn is_degenerate(&self) -> bool {
        let (rx, ry) = self.radii;
        !(rx > 0.0 && ry > 0.0 && rx.is_finite() && ry.is_finite())
            || !self.center.0.is_finite()
            || !self.center.1.is_finite()
            || !self.rotation.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub mask: BinaryMask,
    /// Set when the shape has a non-positive or non-finite extent.
    pub degenerate: bool,
}

/// Foreground iff the pixel center lies inside the shape.
pub fn rasterize(shape: &ShapeInstance, width: usize, height: usize) -> Raster {
    let mut mask = BinaryMask::new(width, height);
    if shape.is_degenerate() {
        return Raster {
            mask,
            degenerate: true,
        };
    }
    let reach = shape.radii.0.hypot(shape.radii.1) + 1.0;
    let x0 = (shape.center.0 - reach).floor().max(0.0) as usize;
    let y0 = (shape.center.1 - reach).floor().max(0.0) as usize;
    let x1 = ((shape.center.0 + reach).ceil().max(0.0) as usize).min(width);
    let y1 = ((shape.center.1 + reach).ceil().max(0.0) as usize).min(height);
    for y in y0..y1 {
        for x in x0..x1 {
            if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                mask.set(x, y, true);
            }
        }
    }
    Raster {
        mask,
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(
        kind: ShapeKind,
        center: (f64, f64),
        radii: (f64, f64),
        rotation: f64,
    ) -> ShapeInstance {
        ShapeInstance {
            class_id: 1,
            kind,
            center,
            radii,
            rotation,
            z_order: 1,
            fill: [200, 200, 200],
        }
    }

    /// Scans every pixel center without the bounding-window shortcut.
    fn oracle(s: &ShapeInstance, w: usize, h: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| s.contains(x as f64 + 0.5, y as f64 + 0.5))
    }

    #[test]
    fn rectangle_two_to_five() {
        let s = shape(ShapeKind::Rectangle, (4.0, 4.0), (2.0, 2.0), 0.0);
        let r = rasterize(&s, 8, 8);
        assert!(!r.degenerate);
        assert_eq!(r.mask.count(), 16);
        assert_eq!(r.mask, oracle(&s, 8, 8));
        assert!(r.mask.get(2, 2) && r.mask.get(5, 5) && !r.mask.get(6, 5) && !r.mask.get(1, 3));
    }

    #[test]
    fn zero_radius_is_degenerate() {
        let s = shape(ShapeKind::Ellipse, (4.0, 4.0), (0.0, 3.0), 0.0);
        let r = rasterize(&s, 8, 8);
        assert!(r.degenerate);
        assert!(r.mask.is_empty());
    }

    #[test]
    fn full_image_rectangle() {
        let s = shape(ShapeKind::Rectangle, (8.0, 6.0), (8.0, 6.0), 0.0);
        assert_eq!(rasterize(&s, 16, 12).mask.count(), 16 * 12);
    }

    #[test]
    fn window_matches_full_scan() {
        for (i, kind) in [
            ShapeKind::Ellipse,
            ShapeKind::Rectangle,
            ShapeKind::Triangle,
        ]
        .into_iter()
        .enumerate()
        {
            for k in 0..20 {
                let t = k as f64;
                let s = shape(
                    kind,
                    (3.0 + 2.7 * t, 30.0 - 1.3 * t),
                    (4.0 + 0.4 * t, 3.0 + 0.3 * t),
                    0.37 * t + i as f64,
                );
                assert_eq!(rasterize(&s, 48, 40).mask, oracle(&s, 48, 40));
            }
        }
    }

    #[test]
    fn triangle_is_roughly_its_analytic_area() {
        let s = shape(ShapeKind::Triangle, (32.0, 32.0), (12.0, 12.0), 0.0);
        let area = 3.0 * 3f64.sqrt() / 4.0 * 144.0;
        let got = rasterize(&s, 64, 64).mask.count() as f64;
        assert!((got - area).abs() / area < 0.1, "{got} vs {area}");
    }
}
