use serde::{Deserialize, Serialize};

use super::TypesError;

/// Axis-aligned box in normalized center format `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvertDirection {
    CenterToCorner,
    CornerToCenter,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, TypesError> {
        let ok_center = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        let ok_extent = |v: f64| v.is_finite() && v > 0.0 && v <= 1.0;
        if !(ok_center(cx) && ok_center(cy) && ok_extent(w) && ok_extent(h)) {
            return Err(TypesError::InvalidBox(format!("({cx}, {cy}, {w}, {h})")));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, TypesError> {
        if !(x1 < x2 && y1 < y2) {
            return Err(TypesError::InvalidBox(format!(
                "degenerate corners ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let [ax1, ay1, ax2, ay2] = self.corners();
        let [bx1, by1, bx2, by2] = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        inter / (self.area() + other.area() - inter)
    }

    /// Generalized IoU: `IoU − (|C| − |A∪B|) / |C|` with `C` the enclosing box.
    pub fn giou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        let [ax1, ay1, ax2, ay2] = self.corners();
        let [bx1, by1, bx2, by2] = other.corners();
        let enclosure = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
        inter / union - (enclosure - union) / enclosure
    }

    /// True when `self` lies within `outer` (boundaries may touch).
    pub fn inside(&self, outer: &BBox) -> bool {
        let [ax1, ay1, ax2, ay2] = self.corners();
        let [bx1, by1, bx2, by2] = outer.corners();
        ax1 >= bx1 && ay1 >= by1 && ax2 <= bx2 && ay2 <= by2
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = TypesError;
    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Converts a raw 4-vector between center and corner form, validating the box.
pub fn box_convert(values: [f64; 4], direction: ConvertDirection) -> Result<[f64; 4], TypesError> {
    match direction {
        ConvertDirection::CenterToCorner => Ok(BBox::try_from(values)?.corners()),
        ConvertDirection::CornerToCenter => {
            let [x1, y1, x2, y2] = values;
            Ok(BBox::from_corners(x1, y1, x2, y2)?.to_array())
        }
    }
}

/// Generalized IoU of two boxes.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    a.giou(b)
}
