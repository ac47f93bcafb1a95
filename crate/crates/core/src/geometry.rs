//! Static map geometry.
//!
//! The static map is a union of axis-aligned rectangles. Membership in the
//! map dilated by a disk of radius `g` is decided by point-to-rectangle
//! distance, which is exact for the Minkowski sum with a disk (corners are
//! rounded).

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid rectangle [{x_min}, {y_min}, {x_max}, {y_max}]: need finite x_min < x_max and y_min < y_max")]
    InvalidRect {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("map rectangle #{index} does not intersect the sensing bounds")]
    RectOutsideBounds { index: usize },
    #[error("dilation margin must be finite and non-negative, got {0}")]
    NegativeMargin(f64),
}

/// A point in the world frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        libm::hypot(self.x - other.x, self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Axis-aligned rectangle, `x_min < x_max`, `y_min < y_max`.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rect {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl TryFrom<[f64; 4]> for Rect {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [f64; 4] {
    fn from(r: Rect) -> Self {
        [r.x_min, r.y_min, r.x_max, r.y_max]
    }
}

impl Rect {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::InvalidRect {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn perimeter(&self) -> f64 {
        2.0 * (self.width() + self.height())
    }

    pub fn center(&self) -> Point {
        Point::new(
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Closed containment.
    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x_min >= self.x_min
            && other.x_max <= self.x_max
            && other.y_min >= self.y_min
            && other.y_max <= self.y_max
    }

    /// Euclidean distance to the closest point of the closed rectangle.
    pub fn distance_to(&self, p: &Point) -> f64 {
        let dx = (self.x_min - p.x).max(p.x - self.x_max).max(0.0);
        let dy = (self.y_min - p.y).max(p.y - self.y_max).max(0.0);
        libm::hypot(dx, dy)
    }

    /// Overlap with positive area.
    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        Rect::new(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        )
        .ok()
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.intersection(other).is_some()
    }

    /// `self \ other` as up to four disjoint rectangles.
    pub fn subtract(&self, other: &Rect) -> Vec<Rect> {
        let Some(cut) = self.intersection(other) else {
            return alloc::vec![*self];
        };
        let mut out = Vec::with_capacity(4);
        // Full-height slabs left and right of the cut, then the pieces above
        // and below it.
        out.extend(Rect::new(self.x_min, self.y_min, cut.x_min, self.y_max).ok());
        out.extend(Rect::new(cut.x_max, self.y_min, self.x_max, self.y_max).ok());
        out.extend(Rect::new(cut.x_min, self.y_min, cut.x_max, cut.y_min).ok());
        out.extend(Rect::new(cut.x_min, cut.y_max, cut.x_max, self.y_max).ok());
        out
    }

    /// The four boundary segments, counter-clockwise from the bottom edge.
    pub fn edges(&self) -> [(Point, Point); 4] {
        let a = Point::new(self.x_min, self.y_min);
        let b = Point::new(self.x_max, self.y_min);
        let c = Point::new(self.x_max, self.y_max);
        let d = Point::new(self.x_min, self.y_max);
        [(a, b), (b, c), (c, d), (d, a)]
    }

    /// Nearest point of the rectangle to `p`.
    pub fn clamp(&self, p: &Point) -> Point {
        Point::new(
            p.x.clamp(self.x_min, self.x_max),
            p.y.clamp(self.y_min, self.y_max),
        )
    }
}

/// Distance from `p` to the closed rectangle `r`; zero inside or on the boundary.
pub fn rect_distance(p: &Point, r: &Rect) -> f64 {
    r.distance_to(p)
}

/// Static structures plus the sensing area they live in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticMap {
    bounds: Rect,
    rects: Vec<Rect>,
}

impl StaticMap {
    pub fn new(bounds: Rect, rects: Vec<Rect>) -> Result<Self, GeometryError> {
        if let Some(index) = rects.iter().position(|r| !r.intersects(&bounds)) {
            return Err(GeometryError::RectOutsideBounds { index });
        }
        Ok(Self { bounds, rects })
    }

    /// The no-map baseline.
    pub fn empty(bounds: Rect) -> Self {
        Self {
            bounds,
            rects: Vec::new(),
        }
    }

    pub fn bounds(&self) -> &Rect {
        &self.bounds
    }

    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    /// Distance from `p` to the nearest structure, `None` for an empty map.
    pub fn distance(&self, p: &Point) -> Option<f64> {
        self.rects
            .iter()
            .map(|r| r.distance_to(p))
            .min_by(f64::total_cmp)
    }

    /// Union of two maps over the union of their structures; the bounds are
    /// taken from `self`. Structures falling outside those bounds are dropped.
    pub fn merged(&self, other: &StaticMap) -> StaticMap {
        let mut rects = self.rects.clone();
        for r in &other.rects {
            if r.intersects(&self.bounds) && !rects.contains(r) {
                rects.push(*r);
            }
        }
        StaticMap {
            bounds: self.bounds,
            rects,
        }
    }
}

/// Membership in the static map dilated by a disk of radius `g`.
///
/// Points at distance exactly `g` are inside.
pub fn in_dilated_map(p: &Point, map: &StaticMap, g: f64) -> Result<bool, GeometryError> {
    if !(g >= 0.0) || !g.is_finite() {
        return Err(GeometryError::NegativeMargin(g));
    }
    Ok(map.distance(p).is_some_and(|d| d <= g))
}
