//! The discretized 4-D bounding-box space: center x, center y, scale and aspect.
//!
//! Position bins are uniform over `[0, 1]`; scale and aspect bins are uniform
//! in log space over their configured ranges. Continuous "bin coordinates" put
//! bin `i`'s center at `i`, which is where the soft-target Gaussians live.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite() || !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidBox(format!("coordinates outside [0,1]: {coords:?}")));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::InvalidBox(format!("empty extent: {coords:?}")));
        }
        Ok(())
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

    pub fn params(&self) -> BoxParams {
        let (w, h) = (self.width(), self.height());
        BoxParams {
            cx: (self.x_min + self.x_max) / 2.0,
            cy: (self.y_min + self.y_max) / 2.0,
            scale: (w * h).sqrt(),
            aspect: w / h,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;
    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Center, scale `sqrt(w*h)` and aspect `w/h` of a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxParams {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub aspect: f64,
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// The discretized box space and its soft-target widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBoxGrid {
    pub nx: usize,
    pub ny: usize,
    pub ns: usize,
    pub na: usize,
    pub scale_range: (f64, f64),
    pub aspect_range: (f64, f64),
    /// Gaussian widths in bin units, ordered (x, y, scale, aspect).
    pub sigma: [f64; 4],
}

impl Default for BBoxGrid {
    fn default() -> Self {
        BBoxGrid {
            nx: 8,
            ny: 8,
            ns: 4,
            na: 3,
            scale_range: (0.1, 1.0),
            aspect_range: (1.0 / 3.0, 3.0),
            sigma: [0.5; 4],
        }
    }
}

/// Integer bin coordinates of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub ix: usize,
    pub iy: usize,
    pub is: usize,
    pub ia: usize,
}

/// Result of encoding a box, with whether scale/aspect had to be clamped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoded {
    pub index: usize,
    pub cell: Cell,
    pub clamped: bool,
}

impl BBoxGrid {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.nx == 0 || self.ny == 0 || self.ns == 0 || self.na == 0 {
            return bad("grid bin counts must all be >= 1".into());
        }
        let (smin, smax) = self.scale_range;
        if !(smin > 0.0 && smin < smax && smax <= 1.0) {
            return bad(format!("scale_range must satisfy 0 < min < max <= 1, got {smin}..{smax}"));
        }
        let (amin, amax) = self.aspect_range;
        if !(amin > 0.0 && amin < amax && amax.is_finite()) {
            return bad(format!("aspect_range must satisfy 0 < min < max, got {amin}..{amax}"));
        }
        if self.sigma.iter().any(|s| s.is_nan() || *s <= 0.0 || s.is_infinite()) {
            return bad(format!("all sigma must be > 0, got {:?}", self.sigma));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny * self.ns * self.na
    }

    fn counts(&self) -> [usize; 4] {
        [self.nx, self.ny, self.ns, self.na]
    }

    pub fn flat_index(&self, c: Cell) -> usize {
        ((c.ix * self.ny + c.iy) * self.ns + c.is) * self.na + c.ia
    }

    pub fn cell(&self, index: usize) -> Result<Cell> {
        if index >= self.num_cells() {
            return Err(Error::CellOutOfRange {
                index,
                cells: self.num_cells(),
            });
        }
        let ia = index % self.na;
        let rest = index / self.na;
        let is = rest % self.ns;
        let rest = rest / self.ns;
        Ok(Cell {
            ix: rest / self.ny,
            iy: rest % self.ny,
            is,
            ia,
        })
    }

    /// Fractional position of `v` along a log-uniform axis, in units of bins,
    /// measured from the lower range edge.
    fn log_position(v: f64, (lo, hi): (f64, f64), bins: usize) -> f64 {
        (v.ln() - lo.ln()) / (hi.ln() - lo.ln()) * bins as f64
    }

    /// Continuous bin coordinates (bin `i` centered at `i`), unclamped.
    pub fn bin_coords(&self, b: &BBox) -> [f64; 4] {
        let p = b.params();
        [
            p.cx * self.nx as f64 - 0.5,
            p.cy * self.ny as f64 - 0.5,
            Self::log_position(p.scale, self.scale_range, self.ns) - 0.5,
            Self::log_position(p.aspect, self.aspect_range, self.na) - 0.5,
        ]
    }

    pub fn encode_detailed(&self, b: &BBox) -> Encoded {
        let coords = self.bin_coords(b);
        let counts = self.counts();
        let mut bins = [0usize; 4];
        let mut clamped = false;
        for d in 0..4 {
            let raw = (coords[d] + 0.5).floor();
            let max = (counts[d] - 1) as f64;
            if d >= 2 && !(0.0..=max).contains(&raw) {
                clamped = true;
            }
            bins[d] = raw.clamp(0.0, max) as usize;
        }
        let cell = Cell {
            ix: bins[0],
            iy: bins[1],
            is: bins[2],
            ia: bins[3],
        };
        Encoded {
            index: self.flat_index(cell),
            cell,
            clamped,
        }
    }

    /// Flat cell index of a box; out-of-range scale/aspect land in boundary bins.
    pub fn encode(&self, b: &BBox) -> usize {
        self.encode_detailed(b).index
    }

    /// Bin-center parameters of a cell.
    pub fn cell_params(&self, c: Cell) -> BoxParams {
        let geo = |i: usize, (lo, hi): (f64, f64), n: usize| {
            lo * (hi / lo).powf((i as f64 + 0.5) / n as f64)
        };
        BoxParams {
            cx: (c.ix as f64 + 0.5) / self.nx as f64,
            cy: (c.iy as f64 + 0.5) / self.ny as f64,
            scale: geo(c.is, self.scale_range, self.ns),
            aspect: geo(c.ia, self.aspect_range, self.na),
        }
    }

    /// Representative box of a cell.
    ///
    /// This is the bin-center box whenever it lies inside the image. Otherwise
    /// it is the box nearest the bin center (in log scale and log aspect) that
    /// lies inside the image while keeping all four parameters in the cell, so
    /// decoding never moves a box into a neighboring cell. Cells that no
    /// in-image box can reach fall back to the clipped bin-center box.
    pub fn decode(&self, index: usize) -> Result<BBox> {
        let cell = self.cell(index)?;
        let p = self.cell_params(cell);
        let (w, h) = (p.scale * p.aspect.sqrt(), p.scale / p.aspect.sqrt());
        let fits = |c: f64, half: f64| c - half >= 0.0 && c + half <= 1.0;
        if fits(p.cx, w / 2.0) && fits(p.cy, h / 2.0) {
            return BBox::new(p.cx - w / 2.0, p.cy - h / 2.0, p.cx + w / 2.0, p.cy + h / 2.0);
        }
        if let Some(b) = self.fit_inside_cell(cell) {
            return Ok(b);
        }
        BBox::new(
            (p.cx - w / 2.0).max(0.0),
            (p.cy - h / 2.0).max(0.0),
            (p.cx + w / 2.0).min(1.0),
            (p.cy + h / 2.0).min(1.0),
        )
    }

    fn fit_inside_cell(&self, c: Cell) -> Option<BBox> {
        // keeps every parameter strictly inside its bin
        const MARGIN: f64 = 1e-6;
        const STEPS: usize = 200;
        let toward_middle = |i: usize, n: usize| {
            let lo = (i as f64 + MARGIN) / n as f64;
            let hi = (i as f64 + 1.0 - MARGIN) / n as f64;
            0.5f64.clamp(lo, hi)
        };
        let cx = toward_middle(c.ix, self.nx);
        let cy = toward_middle(c.iy, self.ny);
        let log_w_max = (2.0 * cx.min(1.0 - cx)).ln();
        let log_h_max = (2.0 * cy.min(1.0 - cy)).ln();
        let log_bin = |i: usize, (lo, hi): (f64, f64), n: usize| {
            let step = (hi.ln() - lo.ln()) / n as f64;
            let start = lo.ln() + i as f64 * step;
            (start + MARGIN * step, start + (1.0 - MARGIN) * step, start + 0.5 * step, step)
        };
        let (u0, u1, uc, du) = log_bin(c.is, self.scale_range, self.ns);
        let (v0, v1, vc, dv) = log_bin(c.ia, self.aspect_range, self.na);
        // log w = u + v/2 and log h = u - v/2 must stay below the room available
        let mut best: Option<(f64, f64, f64)> = None;
        for k in 0..=STEPS {
            let v = v0 + (v1 - v0) * k as f64 / STEPS as f64;
            let u_max = u1.min(log_w_max - v / 2.0).min(log_h_max + v / 2.0);
            if u_max < u0 {
                continue;
            }
            let u = uc.clamp(u0, u_max);
            let d = ((u - uc) / du).powi(2) + ((v - vc) / dv).powi(2);
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, u, v));
            }
        }
        let (_, u, v) = best?;
        let w = (u + v / 2.0).exp();
        let h = (u - v / 2.0).exp();
        BBox::new(
            (cx - w / 2.0).max(0.0),
            (cy - h / 2.0).max(0.0),
            (cx + w / 2.0).min(1.0),
            (cy + h / 2.0).min(1.0),
        )
        .ok()
    }

    /// Decoded boxes for every cell, in flat-index order.
    pub fn cell_boxes(&self) -> Vec<BBox> {
        (0..self.num_cells())
            .map(|i| self.decode(i).expect("index within grid"))
            .collect()
    }

    /// Gaussian soft target: one truncated, normalized, separable Gaussian per
    /// box in bin coordinates, summed and renormalized.
    pub fn target_distribution(&self, boxes: &[BBox]) -> Result<CellDistribution> {
        if boxes.is_empty() {
            return Err(Error::Data(
                "target distribution needs at least one box".into(),
            ));
        }
        let counts = self.counts();
        let mut total = vec![0.0f64; self.num_cells()];
        for b in boxes {
            b.validate()?;
            let coords = self.bin_coords(b);
            let axes: Vec<Vec<f64>> = (0..4)
                .map(|d| axis_weights(coords[d], counts[d], self.sigma[d]))
                .collect();
            for (ix, &wx) in axes[0].iter().enumerate() {
                if wx == 0.0 {
                    continue;
                }
                for (iy, &wy) in axes[1].iter().enumerate() {
                    if wy == 0.0 {
                        continue;
                    }
                    for (is, &ws) in axes[2].iter().enumerate() {
                        if ws == 0.0 {
                            continue;
                        }
                        for (ia, &wa) in axes[3].iter().enumerate() {
                            let idx = self.flat_index(Cell { ix, iy, is, ia });
                            total[idx] += wx * wy * ws * wa;
                        }
                    }
                }
            }
        }
        let sum: f64 = total.iter().sum();
        for v in total.iter_mut() {
            *v /= sum;
        }
        CellDistribution::new(total)
    }
}

/// Normalized 1-D Gaussian weights over integer bins `0..n`, centered at
/// `center` (clamped to the axis extent) and truncated at 3 sigma. The bin
/// nearest the center always survives truncation, so a vanishing sigma
/// degenerates to a one-hot on the encoded bin.
fn axis_weights(center: f64, n: usize, sigma: f64) -> Vec<f64> {
    let max = (n - 1) as f64;
    let center = center.clamp(-0.5, max + 0.5);
    let nearest = (center + 0.5).floor().clamp(0.0, max) as usize;
    let z = |i: usize| (i as f64 - center) / sigma;
    let peak = -0.5 * z(nearest) * z(nearest);
    let mut w: Vec<f64> = (0..n)
        .map(|i| {
            if i != nearest && (i as f64 - center).abs() > 3.0 * sigma {
                0.0
            } else {
                (-0.5 * z(i) * z(i) - peak).exp()
            }
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Probability vector over all cells of a grid (or over classes).
#[derive(Debug, Clone, PartialEq)]
pub struct CellDistribution {
    probs: Vec<f64>,
}

impl CellDistribution {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Distribution("empty distribution".into()));
        }
        if let Some(v) = probs.iter().find(|v| v.is_nan() || **v < 0.0 || v.is_infinite()) {
            return Err(Error::Distribution(format!("entry {v} is not a probability")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::Distribution(format!("entries sum to {sum}, not 1")));
        }
        Ok(CellDistribution { probs })
    }

    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::CellOutOfRange { index, cells: len });
        }
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Ok(CellDistribution { probs })
    }

    pub fn uniform(len: usize) -> Self {
        CellDistribution {
            probs: vec![1.0 / len as f64; len],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn box_params_examples() {
        let p = bx(0.0, 0.0, 1.0, 1.0).params();
        assert_eq!((p.cx, p.cy, p.scale, p.aspect), (0.5, 0.5, 1.0, 1.0));
        let p = bx(0.25, 0.25, 0.75, 0.75).params();
        assert_eq!((p.cx, p.cy, p.scale, p.aspect), (0.5, 0.5, 0.5, 1.0));
        let p = bx(0.0, 0.0, 0.8, 0.2).params();
        assert!(close(p.cx, 0.4) && close(p.cy, 0.1) && close(p.scale, 0.4) && close(p.aspect, 4.0));
    }

    #[test]
    fn box_validation() {
        assert!(BBox::new(0.5, 0.0, 0.5, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.1, 1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    fn position_grid() -> BBoxGrid {
        BBoxGrid {
            nx: 4,
            ny: 4,
            ns: 1,
            na: 1,
            ..BBoxGrid::default()
        }
    }

    #[test]
    fn encode_first_and_last_cells() {
        let g = position_grid();
        assert_eq!(g.encode(&bx(0.0, 0.0, 0.25, 0.25)), 0);
        let e = g.encode_detailed(&bx(0.75, 0.75, 1.0, 1.0));
        assert_eq!((e.cell.ix, e.cell.iy, e.cell.is, e.cell.ia), (3, 3, 0, 0));
        assert_eq!(e.index, 15);
    }

    #[test]
    fn encode_log_scale_bins() {
        let g = BBoxGrid {
            nx: 1,
            ny: 1,
            ns: 2,
            na: 1,
            scale_range: (0.1, 0.9),
            ..BBoxGrid::default()
        };
        // the bin edge sits at the geometric midpoint 0.1 * sqrt(9) = 0.3
        assert_eq!(g.encode(&bx(0.25, 0.25, 0.75, 0.75)), 1);
        assert_eq!(g.encode(&bx(0.4, 0.4, 0.6, 0.6)), 0);
    }

    #[test]
    fn encode_clamps_out_of_range() {
        let g = BBoxGrid::default();
        let tiny = bx(0.5, 0.5, 0.51, 0.51); // scale 0.01 < 0.1
        let e = g.encode_detailed(&tiny);
        assert!(e.clamped);
        assert_eq!(e.cell.is, 0);
        let wide = bx(0.0, 0.45, 1.0, 0.55); // aspect 10 > 3
        let e = g.encode_detailed(&wide);
        assert!(e.clamped);
        assert_eq!(e.cell.ia, g.na - 1);
        assert!(!g.encode_detailed(&bx(0.3, 0.3, 0.6, 0.6)).clamped);
    }

    #[test]
    fn decode_inverts_position_example() {
        // a scale small enough that the bin-center box is not clipped
        let g = BBoxGrid {
            scale_range: (0.1, 0.2),
            ..position_grid()
        };
        let b = g.decode(0).unwrap();
        let p = b.params();
        assert!(close(p.cx, 0.125) && close(p.cy, 0.125));
        assert!(matches!(g.decode(16), Err(Error::CellOutOfRange { .. })));
    }

    #[test]
    fn decoded_boxes_stay_in_their_cell() {
        let g = BBoxGrid::default();
        let drift: Vec<usize> = (0..g.num_cells())
            .filter(|&i| g.encode(&g.decode(i).unwrap()) != i)
            .collect();
        // only cells no in-image box can reach may drift, e.g. the largest,
        // widest boxes centered in the leftmost column
        for &i in &drift {
            let c = g.cell(i).unwrap();
            assert!(g.fit_inside_cell(c).is_none(), "cell {i} drifts but is reachable");
        }
        assert!(drift.len() < g.num_cells() / 4, "{} cells drift", drift.len());
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.1, 0.2, 0.5, 0.7);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 0.4, 0.4), &bx(0.5, 0.5, 1.0, 1.0)), 0.0);
        let v = iou(&bx(0.0, 0.0, 0.5, 0.5), &bx(0.25, 0.25, 0.75, 0.75));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn target_rejects_empty() {
        assert!(BBoxGrid::default().target_distribution(&[]).is_err());
    }

    #[test]
    fn target_delta_limit_is_one_hot() {
        let g = BBoxGrid {
            sigma: [1e-3; 4],
            ..BBoxGrid::default()
        };
        let b = bx(0.13, 0.4, 0.52, 0.71);
        let t = g.target_distribution(&[b]).unwrap();
        let hot = g.encode(&b);
        assert_eq!(t.probs()[hot], 1.0);
        assert_eq!(t.probs().iter().filter(|&&p| p > 0.0).count(), 1);
    }

    #[test]
    fn target_duplicate_boxes() {
        let g = BBoxGrid::default();
        let b = bx(0.2, 0.3, 0.5, 0.45);
        let one = g.target_distribution(&[b]).unwrap();
        let two = g.target_distribution(&[b, b]).unwrap();
        for (x, y) in one.probs().iter().zip(two.probs()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn distribution_validation() {
        assert!(CellDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(CellDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(CellDistribution::new(vec![0.25; 4]).is_ok());
        assert_eq!(CellDistribution::new(vec![0.3, 0.4, 0.3]).unwrap().argmax(), 1);
        assert_eq!(CellDistribution::uniform(5).argmax(), 0);
    }
}
