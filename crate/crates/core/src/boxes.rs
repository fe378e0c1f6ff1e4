//! Box representations and overlap measures on plain values.

use serde::{Deserialize, Serialize};

/// Corner form `(x1, y1, x2, y2)`, absolute pixels or normalized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Normalized center form `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCXCYWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxXYXY { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxXYXY::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn is_ordered(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    /// Divides by the image extent, giving unit-square coordinates.
    pub fn normalized(&self, width: f64, height: f64) -> BoxXYXY {
        BoxXYXY::new(self.x1 / width, self.y1 / height, self.x2 / width, self.y2 / height)
    }

    pub fn scaled(&self, width: f64, height: f64) -> BoxXYXY {
        BoxXYXY::new(self.x1 * width, self.y1 * height, self.x2 * width, self.y2 * height)
    }

    pub fn to_cxcywh(&self) -> BoxCXCYWH {
        BoxCXCYWH {
            cx: (self.x1 + self.x2) / 2.0,
            cy: (self.y1 + self.y2) / 2.0,
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    fn intersection(&self, other: &BoxXYXY) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    fn enclosing(&self, other: &BoxXYXY) -> BoxXYXY {
        BoxXYXY::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }
}

impl BoxCXCYWH {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxCXCYWH { cx, cy, w, h }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxCXCYWH::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn to_xyxy(&self) -> BoxXYXY {
        BoxXYXY::new(
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

/// Intersection over union; 0 when the union has zero area.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `1 − GIoU(pred, gt)`, in `[0, 2]`.
pub fn giou_loss_term(pred: &BoxXYXY, gt: &BoxXYXY) -> f64 {
    let inter = pred.intersection(gt);
    let union = pred.area() + gt.area() - inter;
    let hull = pred.enclosing(gt).area();
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let slack = if hull > 0.0 { (hull - union) / hull } else { 0.0 };
    1.0 - (iou - slack)
}
