//! Default (prior) boxes tiled over every detection feature map.

use serde::{Deserialize, Serialize};

use crate::boxes::CenterBox;
use crate::error::{Error, Result};

/// Layout of the prior boxes over the detection pyramid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Side length f_k of each square feature map, finest first.
    pub feature_sizes: Vec<usize>,
    /// Priors per cell n_k; 4 or 6.
    pub priors_per_cell: Vec<usize>,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Aspect ratios r > 1 per level; each contributes r and 1/r next to the
    /// two square priors. Derived from `priors_per_cell` by [`PriorConfig::new`].
    pub aspect_ratios: Vec<Vec<f64>>,
}

fn ratios_for(count: usize) -> Result<Vec<f64>> {
    match count {
        4 => Ok(vec![2.0]),
        6 => Ok(vec![2.0, 3.0]),
        n => Err(Error::invalid(format!(
            "priors per cell must be 4 or 6, got {n}"
        ))),
    }
}

impl PriorConfig {
    pub fn new(
        feature_sizes: Vec<usize>,
        priors_per_cell: Vec<usize>,
        min_scale: f64,
        max_scale: f64,
    ) -> Result<Self> {
        let aspect_ratios = priors_per_cell
            .iter()
            .map(|&n| ratios_for(n))
            .collect::<Result<Vec<_>>>()?;
        let cfg = Self {
            feature_sizes,
            priors_per_cell,
            min_scale,
            max_scale,
            aspect_ratios,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The 300×300 single-shot grid (38, 19, 10, 5, 3, 1) with the given counts.
    pub fn ssd300(priors_per_cell: Vec<usize>) -> Result<Self> {
        Self::new(vec![38, 19, 10, 5, 3, 1], priors_per_cell, 0.2, 0.9)
    }

    /// Desk-scale layout for 96×96 inputs: 24², 12², 6², 3² with six priors on
    /// the finest level.
    pub fn toy() -> Self {
        Self::new(vec![24, 12, 6, 3], vec![6, 4, 4, 4], 0.1, 0.55).expect("valid toy layout")
    }

    pub fn levels(&self) -> usize {
        self.feature_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.feature_sizes.len();
        if m == 0 {
            return Err(Error::invalid("prior config needs at least one level"));
        }
        if self.priors_per_cell.len() != m || self.aspect_ratios.len() != m {
            return Err(Error::invalid(format!(
                "{m} feature sizes but {} prior counts and {} ratio sets",
                self.priors_per_cell.len(),
                self.aspect_ratios.len()
            )));
        }
        if self.feature_sizes.contains(&0) {
            return Err(Error::invalid("feature map sizes must be positive"));
        }
        for (k, (&n, ratios)) in self
            .priors_per_cell
            .iter()
            .zip(&self.aspect_ratios)
            .enumerate()
        {
            ratios_for(n)?;
            if n != 2 + 2 * ratios.len() || ratios.iter().any(|&r| !(r > 0.0)) {
                return Err(Error::invalid(format!(
                    "level {k}: {n} priors per cell inconsistent with aspect ratios {ratios:?}"
                )));
            }
        }
        let ok = |s: f64| s > 0.0 && s <= 1.0;
        if !ok(self.min_scale) || !ok(self.max_scale) || self.min_scale > self.max_scale {
            return Err(Error::invalid(format!(
                "scales must satisfy 0 < min <= max <= 1, got ({}, {})",
                self.min_scale, self.max_scale
            )));
        }
        Ok(())
    }

    /// Σ f_k² · n_k
    pub fn total(&self) -> usize {
        self.feature_sizes
            .iter()
            .zip(&self.priors_per_cell)
            .map(|(&f, &n)| f * f * n)
            .sum()
    }

    /// Scale s_k of level k (0-based), linearly spaced from min to max.
    pub fn scale(&self, k: usize) -> f64 {
        let m = self.levels();
        if m == 1 {
            return self.min_scale;
        }
        self.min_scale + (self.max_scale - self.min_scale) * k as f64 / (m - 1) as f64
    }

    /// Scale one step past level k; past the last level the linear spacing is
    /// continued and capped at 1 (a single level uses `max_scale`).
    fn next_scale(&self, k: usize) -> f64 {
        let m = self.levels();
        if k + 1 < m {
            self.scale(k + 1)
        } else if m == 1 {
            self.max_scale
        } else {
            let step = (self.max_scale - self.min_scale) / (m - 1) as f64;
            (self.max_scale + step).min(1.0)
        }
    }
}

/// Ordered prior boxes: level, then row-major cell, then aspect ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorBoxSet {
    pub boxes: Vec<CenterBox>,
    /// Index of the first prior of each level.
    pub level_offsets: Vec<usize>,
}

impl PriorBoxSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Tiles priors over every level. Within a cell the order is: square at s_k,
/// square at sqrt(s_k·s_{k+1}), then r, 1/r for each configured ratio.
pub fn generate_priors(config: &PriorConfig) -> Result<PriorBoxSet> {
    config.validate()?;
    let mut boxes = Vec::with_capacity(config.total());
    let mut level_offsets = Vec::with_capacity(config.levels());
    for (k, &f) in config.feature_sizes.iter().enumerate() {
        level_offsets.push(boxes.len());
        let s = config.scale(k);
        let extra = (s * config.next_scale(k)).sqrt();
        let mut shapes = vec![(s, s), (extra, extra)];
        for &r in &config.aspect_ratios[k] {
            let q = r.sqrt();
            shapes.push((s * q, s / q));
            shapes.push((s / q, s * q));
        }
        for i in 0..f {
            for j in 0..f {
                let cx = (j as f64 + 0.5) / f as f64;
                let cy = (i as f64 + 0.5) / f as f64;
                boxes.extend(shapes.iter().map(|&(w, h)| CenterBox { cx, cy, w, h }));
            }
        }
    }
    Ok(PriorBoxSet {
        boxes,
        level_offsets,
    })
}
