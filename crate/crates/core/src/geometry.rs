//! Planar geometry for contour agents: polygon measures, scanline
//! rasterization, discrete curvature, and contour construction.
//!
//! Coordinates are continuous pixel units with `x` to the right and `y`
//! down. Pixel `(c, r)` covers `[c, c+1) x [r, r+1)` and its center sits
//! at `(c + 0.5, r + 0.5)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("a contour needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("contour point {index} is not finite: ({x}, {y})")]
    NonFinite { index: usize, x: f64, y: f64 },
    #[error("invalid bounding box ({x_min}, {y_min}, {x_max}, {y_max})")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),
    #[error("mask dimensions must be at least 1x1, got {width}x{height}")]
    EmptyGrid { width: usize, height: usize },
    #[error("mask data has {got} cells, expected {expected}")]
    MaskSize { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn dist_sq(self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Closed polygon of agent positions. Point `N-1` connects back to point 0.
///
/// Construction normalizes the winding so the signed shoelace area is
/// non-negative; reversal keeps the first vertex in place.
#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    points: Vec<Point>,
}

impl Contour {
    pub fn new(points: Vec<Point>) -> Result<Self, GeometryError> {
        let mut c = Self::from_ordered(points)?;
        if c.signed_area() < 0.0 {
            c.points[1..].reverse();
        }
        Ok(c)
    }

    /// Like [`Contour::new`] but keeps the given vertex order, so point `i`
    /// stays agent `i` even if the winding flips.
    pub fn from_ordered(points: Vec<Point>) -> Result<Self, GeometryError> {
        if points.len() < 3 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        if let Some((index, p)) = points.iter().enumerate().find(|(_, p)| !p.is_finite()) {
            return Err(GeometryError::NonFinite {
                index,
                x: p.x,
                y: p.y,
            });
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn signed_area(&self) -> f64 {
        signed_area(&self.points)
    }

    pub fn perimeter(&self) -> f64 {
        edge_lengths(&self.points).iter().sum()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Contour {
        Contour {
            points: self
                .points
                .iter()
                .map(|p| Point::new(p.x + dx, p.y + dy))
                .collect(),
        }
    }
}

fn signed_area(points: &[Point]) -> f64 {
    let n = points.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    acc / 2.0
}

/// Lengths of the `N` edges, including the closing edge `N-1 -> 0`.
pub fn edge_lengths(points: &[Point]) -> Vec<f64> {
    let n = points.len();
    (0..n).map(|i| points[i].dist(points[(i + 1) % n])).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyGrid { width, height });
        }
        Ok(Self {
            width,
            height,
            bits: vec![false; width * height],
        })
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyGrid { width, height });
        }
        if bits.len() != width * height {
            return Err(GeometryError::MaskSize {
                got: bits.len(),
                expected: width * height,
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, GeometryError> {
        let mut mask = Self::new(width, height)?;
        for r in 0..height {
            for c in 0..width {
                mask.bits[r * width + c] = f(c, r);
            }
        }
        Ok(mask)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize) -> bool {
        self.bits[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, c: usize, r: usize, value: bool) {
        self.bits[r * self.width + c] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tight box around the set pixels, in pixel-edge coordinates.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(c, r) {
                    bounds = Some(match bounds {
                        None => (c, r, c, r),
                        Some((c0, r0, c1, r1)) => (c0.min(c), r0.min(r), c1.max(c), r1.max(r)),
                    });
                }
            }
        }
        bounds.map(|(c0, r0, c1, r1)| BoundingBox {
            x_min: c0 as f64,
            y_min: r0 as f64,
            x_max: (c1 + 1) as f64,
            y_max: (r1 + 1) as f64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::InvalidBox {
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

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> Point {
        Point::new(
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_contour(&self) -> Contour {
        Contour::new(vec![
            Point::new(self.x_min, self.y_min),
            Point::new(self.x_max, self.y_min),
            Point::new(self.x_max, self.y_max),
            Point::new(self.x_min, self.y_max),
        ])
        .expect("a valid box is a valid contour")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for ConsistencyWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.5,
        }
    }
}

pub fn shoelace_area(contour: &Contour) -> f64 {
    contour.signed_area().abs()
}

/// Even-odd scanline fill sampled at pixel centers, clipped to the grid.
///
/// An edge crosses scanline `y` when `y` lies in `[min(y0, y1), max(y0, y1))`,
/// which keeps vertex hits counted exactly once.
pub fn rasterize(contour: &Contour, width: usize, height: usize) -> Result<BinaryMask, GeometryError> {
    let mut mask = BinaryMask::new(width, height)?;
    let pts = contour.points();
    let n = pts.len();
    let mut xs: Vec<f64> = Vec::with_capacity(n);
    for r in 0..height {
        let y = r as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let a = pts[i];
            let b = pts[(i + n - 1) % n];
            if (a.y > y) != (b.y > y) {
                xs.push((b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x);
            }
        }
        xs.sort_by(|p, q| p.total_cmp(q));
        for span in xs.chunks_exact(2) {
            // pixel c is set iff span[0] <= c + 0.5 < span[1]
            let (lo, hi) = (span[0], span[1]);
            if hi <= 0.5 || lo > width as f64 - 0.5 {
                continue;
            }
            let mut c = (lo - 0.5).ceil().max(0.0) as usize;
            while c > 0 && (c as f64 - 0.5) >= lo {
                c -= 1;
            }
            while c < width && (c as f64 + 0.5) < lo {
                c += 1;
            }
            while c < width && (c as f64 + 0.5) < hi {
                mask.set(c, r, true);
                c += 1;
            }
        }
    }
    Ok(mask)
}

/// Menger curvature at vertex `i`: the inverse circumradius of the triangle
/// formed with its cyclic neighbours. Zero for coincident or collinear points.
pub fn curvature(contour: &Contour, i: usize) -> f64 {
    let pts = contour.points();
    let n = pts.len();
    let i = i % n;
    menger(pts[(i + n - 1) % n], pts[i], pts[(i + 1) % n])
}

pub(crate) fn menger(a: Point, b: Point, c: Point) -> f64 {
    let ab = a.dist(b);
    let bc = b.dist(c);
    let ac = a.dist(c);
    let denom = ab * bc * ac;
    if denom == 0.0 {
        return 0.0;
    }
    let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    2.0 * cross.abs() / denom
}

pub fn curvatures(contour: &Contour) -> Vec<f64> {
    (0..contour.len()).map(|i| curvature(contour, i)).collect()
}

pub(crate) fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Weighted sum of the population variances of edge lengths (closing edge
/// included) and vertex curvatures.
pub fn consistency_index(contour: &Contour, w: ConsistencyWeights) -> f64 {
    let dists = edge_lengths(contour.points());
    let kappas = curvatures(contour);
    w.lambda1 * population_variance(&dists) + w.lambda2 * population_variance(&kappas)
}

/// Octagon through the 1/4 and 3/4 points of each box edge, counter-clockwise
/// starting on the top edge.
pub fn octagon_from_bbox(b: &BoundingBox) -> Contour {
    let (x0, y0, x1, y1) = (b.x_min, b.y_min, b.x_max, b.y_max);
    let qw = b.width() / 4.0;
    let qh = b.height() / 4.0;
    Contour::new(vec![
        Point::new(x0 + qw, y0),
        Point::new(x1 - qw, y0),
        Point::new(x1, y0 + qh),
        Point::new(x1, y1 - qh),
        Point::new(x1 - qw, y1),
        Point::new(x0 + qw, y1),
        Point::new(x0, y1 - qh),
        Point::new(x0, y0 + qh),
    ])
    .expect("octagon of a valid box is a valid contour")
}

/// `n` points at equal arc-length spacing along the closed polyline, the
/// first at the input's first vertex.
pub fn uniform_resample(contour: &Contour, n: usize) -> Result<Contour, GeometryError> {
    if n < 3 {
        return Err(GeometryError::TooFewPoints(n));
    }
    let pts = contour.points();
    let m = pts.len();
    let lens = edge_lengths(pts);
    let mut cum = Vec::with_capacity(m + 1);
    cum.push(0.0);
    for l in &lens {
        cum.push(cum.last().unwrap() + l);
    }
    let perimeter = cum[m];
    if perimeter == 0.0 {
        return Contour::new(vec![pts[0]; n]);
    }
    let step = perimeter / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut edge = 0;
    for k in 0..n {
        let s = step * k as f64;
        while edge + 1 < m && cum[edge + 1] <= s {
            edge += 1;
        }
        let a = pts[edge];
        let b = pts[(edge + 1) % m];
        let t = if lens[edge] > 0.0 {
            (s - cum[edge]) / lens[edge]
        } else {
            0.0
        };
        out.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
    }
    Contour::new(out)
}

/// Jitter a box for initialization-sensitivity studies: the center moves by
/// up to `shift_frac` of each extent and each extent scales by up to
/// `1 +/- scale_frac`, independently per axis.
pub fn perturb_bbox(
    b: &BoundingBox,
    shift_frac: f64,
    scale_frac: f64,
    seed: u64,
) -> Result<BoundingBox, GeometryError> {
    if !shift_frac.is_finite() || shift_frac.abs() > 0.5 {
        return Err(GeometryError::InvalidPerturbation(format!(
            "shift_frac {shift_frac} outside [-0.5, 0.5]"
        )));
    }
    if !scale_frac.is_finite() || scale_frac <= -0.5 || scale_frac >= 0.5 {
        return Err(GeometryError::InvalidPerturbation(format!(
            "scale_frac {scale_frac} outside (-0.5, 0.5)"
        )));
    }
    let shift = shift_frac.abs();
    let scale = scale_frac.abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |half: f64| -> f64 {
        if half == 0.0 {
            0.0
        } else {
            rng.random_range(-half..=half)
        }
    };
    let (w, h) = (b.width(), b.height());
    let c = b.center();
    let cx = c.x + draw(shift) * w;
    let cy = c.y + draw(shift) * h;
    let nw = w * (1.0 + draw(scale));
    let nh = h * (1.0 + draw(scale));
    if nw <= 0.0 || nh <= 0.0 {
        return Err(GeometryError::InvalidPerturbation(format!(
            "non-positive extent {nw} x {nh}"
        )));
    }
    BoundingBox::new(cx - nw / 2.0, cy - nh / 2.0, cx + nw / 2.0, cy + nh / 2.0)
}

/// Even-odd point-in-polygon test by ray casting.
pub fn contains(contour: &Contour, p: Point) -> bool {
    let pts = contour.points();
    let n = pts.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (pts[i], pts[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use std::f64::consts::PI;

    fn pts(raw: &[(f64, f64)]) -> Contour {
        Contour::new(raw.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap()
    }

    fn circle(n: usize, r: f64, cx: f64, cy: f64) -> Contour {
        Contour::new(
            (0..n)
                .map(|k| {
                    let t = 2.0 * PI * k as f64 / n as f64;
                    Point::new(cx + r * t.cos(), cy + r * t.sin())
                })
                .collect(),
        )
        .unwrap()
    }

    // Star-shaped random polygon: sorted angles with random radii.
    fn random_polygon(rng: &mut ChaCha8Rng, n: usize, cx: f64, cy: f64, rmax: f64) -> Contour {
        let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        angles.sort_by(|a, b| a.total_cmp(b));
        Contour::new(
            angles
                .iter()
                .map(|t| {
                    let r = rng.random_range(0.2 * rmax..rmax);
                    Point::new(cx + r * t.cos(), cy + r * t.sin())
                })
                .collect(),
        )
        .unwrap()
    }

    fn ray_cast_mask(contour: &Contour, w: usize, h: usize) -> BinaryMask {
        // Independent of the scanline path: per-pixel PNPOLY.
        BinaryMask::from_fn(w, h, |c, r| {
            let p = Point::new(c as f64 + 0.5, r as f64 + 0.5);
            let v = contour.points();
            let mut inside = false;
            let mut j = v.len() - 1;
            for i in 0..v.len() {
                if (v[i].y > p.y) != (v[j].y > p.y)
                    && p.x < (v[j].x - v[i].x) * (p.y - v[i].y) / (v[j].y - v[i].y) + v[i].x
                {
                    inside = !inside;
                }
                j = i;
            }
            inside
        })
        .unwrap()
    }

    #[test]
    fn contour_rejects_bad_input() {
        assert_eq!(
            Contour::new(vec![Point::new(0.0, 0.0); 2]).unwrap_err(),
            GeometryError::TooFewPoints(2)
        );
        assert!(matches!(
            Contour::new(vec![
                Point::new(0.0, 0.0),
                Point::new(f64::NAN, 0.0),
                Point::new(1.0, 1.0)
            ]),
            Err(GeometryError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn orientation_normalized_and_idempotent() {
        let cw = pts(&[(0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 0.0)]);
        assert!(cw.signed_area() > 0.0);
        assert_eq!(cw.points()[0], Point::new(0.0, 0.0));
        let again = Contour::new(cw.points().to_vec()).unwrap();
        assert_eq!(again, cw);
    }

    #[test]
    fn shoelace_examples() {
        let sq = pts(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
        assert_eq!(shoelace_area(&sq), 1.0);
        let line = pts(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)]);
        assert_eq!(shoelace_area(&line), 0.0);
    }

    #[test]
    fn shoelace_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let poly = random_polygon(&mut rng, 12, 0.0, 0.0, 10.0);
        let samples = 1_000_000;
        let mut hits = 0usize;
        for _ in 0..samples {
            let p = Point::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            if contains(&poly, p) {
                hits += 1;
            }
        }
        let mc = 400.0 * hits as f64 / samples as f64;
        let exact = shoelace_area(&poly);
        assert!((mc - exact).abs() / exact < 0.01, "mc {mc} vs {exact}");
    }

    #[test]
    fn rasterize_square() {
        let sq = pts(&[(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)]);
        let m = rasterize(&sq, 8, 8).unwrap();
        assert_eq!(m.count(), 16);
        assert!(m.get(3, 3) && !m.get(4, 4));
    }

    #[test]
    fn rasterize_triangle_matches_ray_cast() {
        let tri = pts(&[(3.3, 2.1), (29.7, 11.4), (8.2, 30.9)]);
        assert_eq!(rasterize(&tri, 32, 32).unwrap(), ray_cast_mask(&tri, 32, 32));
    }

    #[test]
    fn rasterize_outside_is_empty() {
        let sq = pts(&[(-10.0, -10.0), (-5.0, -10.0), (-5.0, -5.0), (-10.0, -5.0)]);
        assert_eq!(rasterize(&sq, 16, 16).unwrap().count(), 0);
        let right = pts(&[(20.0, 2.0), (30.0, 2.0), (30.0, 8.0)]);
        assert_eq!(rasterize(&right, 16, 16).unwrap().count(), 0);
    }

    #[test]
    fn rasterize_agrees_with_ray_cast_on_random_polygons() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let w = rng.random_range(8..=64);
            let h = rng.random_range(8..=64);
            let n = rng.random_range(3..40);
            // some polygons straddle the grid edges
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let rmax = rng.random_range(2.0..40.0);
            let poly = random_polygon(&mut rng, n, cx, cy, rmax);
            assert_eq!(rasterize(&poly, w, h).unwrap(), ray_cast_mask(&poly, w, h));
        }
    }

    #[test]
    fn rasterize_vertices_on_pixel_centers() {
        // vertices and edges exactly on sample points
        let poly = pts(&[(0.5, 0.5), (6.5, 0.5), (6.5, 6.5), (3.5, 3.5), (0.5, 6.5)]);
        assert_eq!(rasterize(&poly, 8, 8).unwrap(), ray_cast_mask(&poly, 8, 8));
    }

    #[test]
    fn curvature_examples() {
        let line = pts(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (0.0, 5.0)]);
        assert_eq!(curvature(&line, 1), 0.0);
        let c = circle(64, 10.0, 3.0, -2.0);
        for i in 0..64 {
            assert!((curvature(&c, i) - 0.1).abs() < 1e-9);
        }
        assert_eq!(menger(Point::new(1.0, 1.0), Point::new(1.0, 1.0), Point::new(2.0, 0.0)), 0.0);
    }

    #[test]
    fn curvature_matches_circumradius() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p: Vec<Point> = (0..3)
                .map(|_| Point::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
                .collect();
            // circumcenter from perpendicular bisectors
            let (a, b, c) = (p[0], p[1], p[2]);
            let d = 2.0 * (a.x * (b.y - c.y) + b.x * (c.y - a.y) + c.x * (a.y - b.y));
            let a2 = a.x * a.x + a.y * a.y;
            let b2 = b.x * b.x + b.y * b.y;
            let c2 = c.x * c.x + c.y * c.y;
            let ux = (a2 * (b.y - c.y) + b2 * (c.y - a.y) + c2 * (a.y - b.y)) / d;
            let uy = (a2 * (c.x - b.x) + b2 * (a.x - c.x) + c2 * (b.x - a.x)) / d;
            let r = Point::new(ux, uy).dist(a);
            let k = menger(a, b, c);
            assert!((k - 1.0 / r).abs() <= 1e-9 * (1.0 / r).max(1.0), "{k} vs {}", 1.0 / r);
        }
    }

    #[test]
    fn circle_curvature_for_many_sizes() {
        for n in [32, 50, 64, 128, 256] {
            for r in [3.0, 10.0, 41.5] {
                let c = circle(n, r, 0.0, 0.0);
                for k in curvatures(&c) {
                    assert!((k - 1.0 / r).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn consistency_examples() {
        let hex = circle(6, 5.0, 1.0, 1.0);
        assert!(consistency_index(&hex, ConsistencyWeights::default()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let poly = random_polygon(&mut rng, 20, 0.0, 0.0, 10.0);
        let zero = ConsistencyWeights {
            lambda1: 0.0,
            lambda2: 0.0,
        };
        assert_eq!(consistency_index(&poly, zero), 0.0);
    }

    #[test]
    fn consistency_matches_direct_evaluation_on_ellipse() {
        let n = 128;
        let ell = Contour::new(
            (0..n)
                .map(|k| {
                    let t = 2.0 * PI * k as f64 / n as f64;
                    Point::new(20.0 * t.cos(), 10.0 * t.sin())
                })
                .collect(),
        )
        .unwrap();
        // second implementation: two-pass sums of squares
        let p = ell.points();
        let mut d = Vec::new();
        let mut k = Vec::new();
        for i in 0..n {
            let (a, b, c) = (p[(i + n - 1) % n], p[i], p[(i + 1) % n]);
            d.push(((c.x - b.x).powi(2) + (c.y - b.y).powi(2)).sqrt());
            let area2 = ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)).abs();
            let (la, lb, lc) = (
                ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt(),
                ((c.x - b.x).powi(2) + (c.y - b.y).powi(2)).sqrt(),
                ((c.x - a.x).powi(2) + (c.y - a.y).powi(2)).sqrt(),
            );
            k.push(2.0 * area2 / (la * lb * lc));
        }
        let var = |v: &[f64]| {
            let s: f64 = v.iter().sum();
            let s2: f64 = v.iter().map(|x| x * x).sum();
            let m = v.len() as f64;
            s2 / m - (s / m) * (s / m)
        };
        let expected = 0.1 * var(&d) + 0.5 * var(&k);
        let got = consistency_index(&ell, ConsistencyWeights::default());
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!(got > 0.0);
    }

    #[test]
    fn octagon_examples() {
        let o = octagon_from_bbox(&BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap());
        let expected = [
            (1.0, 0.0),
            (3.0, 0.0),
            (4.0, 1.0),
            (4.0, 3.0),
            (3.0, 4.0),
            (1.0, 4.0),
            (0.0, 3.0),
            (0.0, 1.0),
        ];
        for (p, e) in o.points().iter().zip(expected) {
            assert_eq!((p.x, p.y), e);
        }
        let o = octagon_from_bbox(&BoundingBox::new(0.0, 0.0, 8.0, 4.0).unwrap());
        let xs: Vec<f64> = o.points().iter().filter(|p| p.y == 0.0).map(|p| p.x).collect();
        let ys: Vec<f64> = o.points().iter().filter(|p| p.x == 8.0).map(|p| p.y).collect();
        assert_eq!(xs, vec![2.0, 6.0]);
        assert_eq!(ys, vec![1.0, 3.0]);
        let o = octagon_from_bbox(&BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap());
        assert!((shoelace_area(&o) - 7.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn resample_square() {
        let sq = pts(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
        let r4 = uniform_resample(&sq, 4).unwrap();
        assert_eq!(r4.points(), sq.points());
        let r8 = uniform_resample(&sq, 8).unwrap();
        let expected = [
            (0.0, 0.0),
            (0.5, 0.0),
            (1.0, 0.0),
            (1.0, 0.5),
            (1.0, 1.0),
            (0.5, 1.0),
            (0.0, 1.0),
            (0.0, 0.5),
        ];
        for (p, e) in r8.points().iter().zip(expected) {
            assert!((p.x - e.0).abs() < 1e-15 && (p.y - e.1).abs() < 1e-15);
        }
    }

    #[test]
    fn resample_random_polygon_gaps_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let poly = random_polygon(&mut rng, 15, 30.0, 30.0, 20.0);
        let out = uniform_resample(&poly, 128).unwrap();
        assert_eq!(out.points()[0], poly.points()[0]);
        // arc-length table oracle: locate each output point on the input
        // polyline and measure its arc-length coordinate
        let p = poly.points();
        let m = p.len();
        let arc_of = |q: Point| -> f64 {
            let mut acc = 0.0;
            let mut best = (f64::INFINITY, 0.0);
            for i in 0..m {
                let (a, b) = (p[i], p[(i + 1) % m]);
                let len = a.dist(b);
                let t = (((q.x - a.x) * (b.x - a.x) + (q.y - a.y) * (b.y - a.y)) / (len * len))
                    .clamp(0.0, 1.0);
                let proj = Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
                let d = proj.dist(q);
                if d < best.0 {
                    best = (d, acc + t * len);
                }
                acc += len;
            }
            best.1
        };
        let perim = poly.perimeter();
        let arcs: Vec<f64> = out.points().iter().map(|&q| arc_of(q)).collect();
        for k in 0..128 {
            let next = if k + 1 < 128 { arcs[k + 1] } else { perim };
            assert!((next - arcs[k] - perim / 128.0).abs() < 1e-9);
        }
    }

    #[test]
    fn perturb_examples() {
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(perturb_bbox(&b, 0.0, 0.0, 5).unwrap(), b);
        for seed in 0..50 {
            let p = perturb_bbox(&b, 0.0, 0.1, seed).unwrap();
            let ratio = p.area() / b.area();
            assert!((0.81..=1.21).contains(&ratio));
            let p = perturb_bbox(&b, 0.2, 0.0, seed).unwrap();
            let c = p.center();
            assert!((3.0..=7.0).contains(&c.x) && (3.0..=7.0).contains(&c.y));
        }
        assert_eq!(perturb_bbox(&b, 0.1, 0.1, 3), perturb_bbox(&b, 0.1, 0.1, 3));
        assert!(perturb_bbox(&b, 0.6, 0.0, 1).is_err());
        assert!(perturb_bbox(&b, 0.0, 0.5, 1).is_err());
    }

    proptest! {
        #[test]
        fn consistency_invariant_under_rotation_and_translation(
            seed in 0u64..1000, shift in 0usize..30, dx in -50.0f64..50.0, dy in -50.0f64..50.0
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let poly = random_polygon(&mut rng, 30, 0.0, 0.0, 10.0);
            let w = ConsistencyWeights::default();
            let base = consistency_index(&poly, w);
            let mut rotated = poly.points().to_vec();
            rotated.rotate_left(shift);
            let rot = Contour::new(rotated).unwrap();
            prop_assert!((consistency_index(&rot, w) - base).abs() <= 1e-9 * base.max(1.0));
            let moved = poly.translated(dx, dy);
            prop_assert!((consistency_index(&moved, w) - base).abs() <= 1e-9 * base.max(1.0));
        }

        #[test]
        fn octagon_convex_and_inside_box(
            x in -50.0f64..50.0, y in -50.0f64..50.0, w in 0.01f64..80.0, h in 0.01f64..80.0
        ) {
            let b = BoundingBox::new(x, y, x + w, y + h).unwrap();
            let o = octagon_from_bbox(&b);
            let p = o.points();
            for i in 0..8 {
                let (a, q, c) = (p[i], p[(i + 1) % 8], p[(i + 2) % 8]);
                let cross = (q.x - a.x) * (c.y - q.y) - (q.y - a.y) * (c.x - q.x);
                prop_assert!(cross >= -1e-9);
                prop_assert!(a.x >= b.x_min && a.x <= b.x_max && a.y >= b.y_min && a.y <= b.y_max);
            }
        }

        #[test]
        fn orientation_idempotent_preserves_points(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut raw: Vec<Point> = random_polygon(&mut rng, 10, 0.0, 0.0, 5.0).into_points();
            raw.reverse();
            let once = Contour::new(raw.clone()).unwrap();
            let twice = Contour::new(once.points().to_vec()).unwrap();
            prop_assert_eq!(&once, &twice);
            let mut a: Vec<(f64, f64)> = raw.iter().map(|p| (p.x, p.y)).collect();
            let mut b: Vec<(f64, f64)> = once.points().iter().map(|p| (p.x, p.y)).collect();
            a.sort_by(|p, q| p.partial_cmp(q).unwrap());
            b.sort_by(|p, q| p.partial_cmp(q).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
