//! Axis-aligned boxes in normalized or pixel coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corner-form box `(xmin, ymin, xmax, ymax)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

/// Center-form box `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Validated constructor: requires `xmin < xmax` and `ymin < ymax`.
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = Self {
            xmin,
            ymin,
            xmax,
            ymax,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.xmin, self.ymin, self.xmax, self.ymax]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.xmin < self.xmax) || !(self.ymin < self.ymax) {
            return Err(Error::invalid(format!("degenerate box {self:?}")));
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
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn to_center(&self) -> CenterBox {
        CenterBox {
            cx: (self.xmin + self.xmax) / 2.0,
            cy: (self.ymin + self.ymax) / 2.0,
            w: self.width(),
            h: self.height(),
        }
    }

    pub fn clip_unit(&self) -> Self {
        Self {
            xmin: self.xmin.clamp(0.0, 1.0),
            ymin: self.ymin.clamp(0.0, 1.0),
            xmax: self.xmax.clamp(0.0, 1.0),
            ymax: self.ymax.clamp(0.0, 1.0),
        }
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        Self {
            xmin: self.xmin * sx,
            ymin: self.ymin * sy,
            xmax: self.xmax * sx,
            ymax: self.ymax * sy,
        }
    }
}

impl CenterBox {
    pub fn to_corners(&self) -> BBox {
        BBox {
            xmin: self.cx - self.w / 2.0,
            ymin: self.cy - self.h / 2.0,
            xmax: self.cx + self.w / 2.0,
            ymax: self.cy + self.h / 2.0,
        }
    }
}

/// Intersection over union; zero when the boxes do not overlap.
///
/// Both boxes must have positive area.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// IoU without validation; returns 0 when the union is empty.
pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
