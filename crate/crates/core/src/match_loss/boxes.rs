use serde::{Deserialize, Serialize};

use crate::detector::PriorBox;
use crate::error::{Error, Result};

/// Axis-aligned box in corner form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    /// Rejects boxes that are non-finite or have zero or negative extent.
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = Self { xmin, ymin, xmax, ymax };
        b.check()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { xmin: cx - w / 2.0, ymin: cy - h / 2.0, xmax: cx + w / 2.0, ymax: cy + h / 2.0 }
    }

    pub fn check(&self) -> Result<()> {
        let finite = [self.xmin, self.ymin, self.xmax, self.ymax].iter().all(|v| v.is_finite());
        if !finite || self.xmin >= self.xmax || self.ymin >= self.ymax {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)
    }

    pub fn clipped(&self) -> Self {
        Self {
            xmin: self.xmin.clamp(0.0, 1.0),
            ymin: self.ymin.clamp(0.0, 1.0),
            xmax: self.xmax.clamp(0.0, 1.0),
            ymax: self.ymax.clamp(0.0, 1.0),
        }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self { xmin: self.xmin * sx, ymin: self.ymin * sy, xmax: self.xmax * sx, ymax: self.ymax * sy }
    }

    /// IoU without validation; zero for empty unions.
    pub(crate) fn iou_unchecked(&self, o: &BBox) -> f64 {
        let iw = (self.xmax.min(o.xmax) - self.xmin.max(o.xmin)).max(0.0);
        let ih = (self.ymax.min(o.ymax) - self.ymin.max(o.ymin)).max(0.0);
        let inter = iw * ih;
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + o.area() - inter)
    }
}

impl From<&PriorBox> for BBox {
    fn from(p: &PriorBox) -> Self {
        Self::from_center(p.cx, p.cy, p.w, p.h)
    }
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.check()?;
    b.check()?;
    Ok(a.iou_unchecked(b))
}

/// Scaling of the center (`center`) and log-size (`size`) offsets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variances {
    pub center: f64,
    pub size: f64,
}

impl Default for Variances {
    fn default() -> Self {
        Self { center: 0.1, size: 0.2 }
    }
}

/// Center-size offsets of `b` relative to `prior`.
pub fn encode(b: &BBox, prior: &PriorBox, v: Variances) -> Result<[f64; 4]> {
    if !(b.width() > 0.0 && b.height() > 0.0) {
        return Err(Error::InvalidBox(format!("non-positive target size: {b:?}")));
    }
    if !(prior.w > 0.0 && prior.h > 0.0) {
        return Err(Error::InvalidBox(format!("non-positive prior size: {prior:?}")));
    }
    let (cx, cy) = b.center();
    Ok([
        (cx - prior.cx) / (prior.w * v.center),
        (cy - prior.cy) / (prior.h * v.center),
        (b.width() / prior.w).ln() / v.size,
        (b.height() / prior.h).ln() / v.size,
    ])
}

/// Inverse of [`encode`].
pub fn decode(offsets: &[f64; 4], prior: &PriorBox, v: Variances) -> BBox {
    let cx = prior.cx + offsets[0] * v.center * prior.w;
    let cy = prior.cy + offsets[1] * v.center * prior.h;
    let w = prior.w * (offsets[2] * v.size).exp();
    let h = prior.h * (offsets[3] * v.size).exp();
    BBox::from_center(cx, cy, w, h)
}
