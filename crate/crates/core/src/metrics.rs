//! Overlap and boundary quality measures on binary masks.

use std::fmt::Write as _;

use crate::geometry::BinaryMask;

/// Dilation radii (in pixels, Chebyshev metric) averaged by [`boundf`].
pub const BOUNDARY_THRESHOLDS: [usize; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("cannot report on an empty mask list")]
    Empty,
    #[error("prediction and ground-truth lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectMetrics {
    pub iou: f64,
    pub dice: f64,
    pub boundf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub miou: f64,
    pub mdice: f64,
    pub mboundf: f64,
    pub per_object: Vec<ObjectMetrics>,
}

impl MetricReport {
    pub fn from_objects(per_object: Vec<ObjectMetrics>) -> Result<Self, MetricError> {
        if per_object.is_empty() {
            return Err(MetricError::Empty);
        }
        let n = per_object.len() as f64;
        let mean = |f: fn(&ObjectMetrics) -> f64| per_object.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            miou: mean(|m| m.iou),
            mdice: mean(|m| m.dice),
            mboundf: mean(|m| m.boundf),
            per_object,
        })
    }

    /// One row per object plus a trailing `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("object_id,iou,dice,boundf\n");
        for (i, m) in self.per_object.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{}", m.iou, m.dice, m.boundf);
        }
        let _ = writeln!(out, "mean,{},{},{}", self.miou, self.mdice, self.mboundf);
        out
    }
}

fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<(), MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::DimensionMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

fn counts(a: &BinaryMask, b: &BinaryMask) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    (inter, na, nb)
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricError> {
    check_dims(pred, gt)?;
    let (inter, na, nb) = counts(pred, gt);
    let union = na + nb - inter;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricError> {
    check_dims(pred, gt)?;
    let (inter, na, nb) = counts(pred, gt);
    Ok(dice_from_counts(inter, na, nb))
}

fn dice_from_counts(inter: usize, na: usize, nb: usize) -> f64 {
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Inner boundary: set pixels with an unset 8-neighbour or touching the grid edge.
pub fn boundary_pixels(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = mask.dims();
    let mut out = BinaryMask::new(w, h).expect("same dims as a valid mask");
    for r in 0..h {
        for c in 0..w {
            if !mask.get(c, r) {
                continue;
            }
            let edge = c == 0 || r == 0 || c + 1 == w || r + 1 == h;
            let exposed = edge
                || (r - 1..=r + 1).any(|rr| (c - 1..=c + 1).any(|cc| !mask.get(cc, rr)));
            if exposed {
                out.set(c, r, true);
            }
        }
    }
    out
}

/// Square (Chebyshev) dilation, done as two separable running-max passes.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (w, h) = mask.dims();
    if radius == 0 {
        return mask.clone();
    }
    let mut rows = BinaryMask::new(w, h).expect("valid dims");
    for r in 0..h {
        // distance since the last set pixel, scanning both ways
        let mut last: Option<usize> = None;
        for c in 0..w {
            if mask.get(c, r) {
                last = Some(c);
            }
            if last.is_some_and(|l| c - l <= radius) {
                rows.set(c, r, true);
            }
        }
        last = None;
        for c in (0..w).rev() {
            if mask.get(c, r) {
                last = Some(c);
            }
            if last.is_some_and(|l| l - c <= radius) {
                rows.set(c, r, true);
            }
        }
    }
    let mut out = BinaryMask::new(w, h).expect("valid dims");
    for c in 0..w {
        let mut last: Option<usize> = None;
        for r in 0..h {
            if rows.get(c, r) {
                last = Some(r);
            }
            if last.is_some_and(|l| r - l <= radius) {
                out.set(c, r, true);
            }
        }
        last = None;
        for r in (0..h).rev() {
            if rows.get(c, r) {
                last = Some(r);
            }
            if last.is_some_and(|l| l - r <= radius) {
                out.set(c, r, true);
            }
        }
    }
    out
}

/// Boundary F-score: Dice between the dilated boundary maps, averaged over
/// [`BOUNDARY_THRESHOLDS`].
pub fn boundf(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricError> {
    check_dims(pred, gt)?;
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    let total: f64 = BOUNDARY_THRESHOLDS
        .iter()
        .map(|&n| {
            let (inter, na, nb) = counts(&dilate(&bp, n), &dilate(&bg, n));
            dice_from_counts(inter, na, nb)
        })
        .sum();
    Ok(total / BOUNDARY_THRESHOLDS.len() as f64)
}

pub fn object_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<ObjectMetrics, MetricError> {
    Ok(ObjectMetrics {
        iou: iou(pred, gt)?,
        dice: dice(pred, gt)?,
        boundf: boundf(pred, gt)?,
    })
}

pub fn report(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<MetricReport, MetricError> {
    if preds.len() != gts.len() {
        return Err(MetricError::LengthMismatch(preds.len(), gts.len()));
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let per_object = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| object_metrics(p, g))
        .collect::<Result<Vec<_>, _>>()?;
    MetricReport::from_objects(per_object)
}

#[cfg(test)]
pub(crate) mod oracle {
    use super::*;

    /// Brute-force boundary F: explicit neighbourhood search per pixel.
    pub fn boundf_brute(a: &BinaryMask, b: &BinaryMask) -> f64 {
        let (w, h) = a.dims();
        let boundary = |m: &BinaryMask| -> Vec<(i64, i64)> {
            let mut out = Vec::new();
            for r in 0..h as i64 {
                for c in 0..w as i64 {
                    if !m.get(c as usize, r as usize) {
                        continue;
                    }
                    let mut exposed = false;
                    for dr in -1..=1i64 {
                        for dc in -1..=1i64 {
                            let (cc, rr) = (c + dc, r + dr);
                            if cc < 0 || rr < 0 || cc >= w as i64 || rr >= h as i64 {
                                exposed = true;
                            } else if !m.get(cc as usize, rr as usize) {
                                exposed = true;
                            }
                        }
                    }
                    if exposed {
                        out.push((c, r));
                    }
                }
            }
            out
        };
        let ba = boundary(a);
        let bb = boundary(b);
        let mut total = 0.0;
        for n in 1..=5i64 {
            let near = |pts: &[(i64, i64)], c: i64, r: i64| {
                pts.iter().any(|&(x, y)| (x - c).abs() <= n && (y - r).abs() <= n)
            };
            let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
            for r in 0..h as i64 {
                for c in 0..w as i64 {
                    let ia = near(&ba, c, r);
                    let ib = near(&bb, c, r);
                    na += ia as usize;
                    nb += ib as usize;
                    inter += (ia && ib) as usize;
                }
            }
            total += if na + nb == 0 {
                1.0
            } else {
                2.0 * inter as f64 / (na + nb) as f64
            };
        }
        total / 5.0
    }
}
