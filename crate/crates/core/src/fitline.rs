//! Line-fitting pose model.
//!
//! A text line is described by a middle-line polynomial `y = sum a_k x^k`
//! and `L` short segments `y = b1 x + b0`, each carrying two endpoints at
//! distance `r` on either side of the point where it crosses the middle line.
//! The `2L` endpoints are the control points a thin-plate spline maps the
//! fixed base points onto.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagebuf::Point;

pub const DEFAULT_SEGMENTS: usize = 20;
pub const DEFAULT_ORDER: usize = 4;

/// One line segment: `y = slope * x + intercept`, endpoints `half_len` away
/// from the middle line on both sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Segment {
    pub slope: f64,
    pub intercept: f64,
    pub half_len: f64,
}

impl From<[f64; 3]> for Segment {
    fn from([slope, intercept, half_len]: [f64; 3]) -> Self {
        Segment {
            slope,
            intercept,
            half_len,
        }
    }
}

impl From<Segment> for [f64; 3] {
    fn from(s: Segment) -> Self {
        [s.slope, s.intercept, s.half_len]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct FitLineParams {
    poly: Vec<f64>,
    segments: Vec<Segment>,
}

// Wire layout; field order is part of the file format.
#[derive(Serialize, Deserialize)]
struct RawParams {
    #[serde(rename = "K")]
    order: usize,
    #[serde(rename = "L")]
    segment_count: usize,
    poly: Vec<f64>,
    segments: Vec<Segment>,
}

impl TryFrom<RawParams> for FitLineParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        if raw.poly.len() != raw.order + 1 {
            return Err(Error::arg(format!(
                "K = {} needs {} coefficients, found {}",
                raw.order,
                raw.order + 1,
                raw.poly.len()
            )));
        }
        if raw.segments.len() != raw.segment_count {
            return Err(Error::arg(format!(
                "L = {} but {} segments listed",
                raw.segment_count,
                raw.segments.len()
            )));
        }
        FitLineParams::new(raw.poly, raw.segments)
    }
}

impl From<FitLineParams> for RawParams {
    fn from(p: FitLineParams) -> Self {
        RawParams {
            order: p.order(),
            segment_count: p.segment_count(),
            poly: p.poly,
            segments: p.segments,
        }
    }
}

impl FitLineParams {
    /// `poly` holds `a_0..a_K` (K >= 1); at least two segments, all with
    /// non-negative half-lengths.
    pub fn new(poly: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        if poly.len() < 2 {
            return Err(Error::arg("middle-line polynomial needs order K >= 1"));
        }
        if segments.len() < 2 {
            return Err(Error::arg("at least two segments are required"));
        }
        if poly.iter().any(|a| !a.is_finite()) {
            return Err(Error::arg("non-finite polynomial coefficient"));
        }
        for (l, s) in segments.iter().enumerate() {
            if !(s.slope.is_finite() && s.intercept.is_finite() && s.half_len.is_finite()) {
                return Err(Error::arg(format!("segment {l} has a non-finite value")));
            }
            if s.half_len < 0.0 {
                return Err(Error::arg(format!("segment {l} has negative half-length")));
            }
        }
        Ok(FitLineParams { poly, segments })
    }

    pub fn poly(&self) -> &[f64] {
        &self.poly
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Polynomial order `K`.
    pub fn order(&self) -> usize {
        self.poly.len() - 1
    }

    /// Segment count `L`.
    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    /// `3L + K + 1`.
    pub fn param_count(&self) -> usize {
        3 * self.segment_count() + self.order() + 1
    }

    pub fn middle_line(&self, x: f64) -> f64 {
        eval_middle_line(&self.poly, x)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Horner evaluation of `sum a_k x^k`; `poly[k]` is `a_k`.
pub fn eval_middle_line(poly: &[f64], x: f64) -> f64 {
    poly.iter().rev().fold(0.0, |acc, &a| acc * x + a)
}

fn eval_derivative(poly: &[f64], x: f64) -> f64 {
    poly.iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (k, &a)| acc * x + k as f64 * a)
}

/// Nominal x position of segment `l` (0-based): evenly spaced over `[-0.5, 0.5]`.
pub fn nominal_x(l: usize, segment_count: usize) -> f64 {
    -0.5 + l as f64 / (segment_count - 1) as f64
}

const ROOT_SCAN_STEPS: usize = 400;

/// Where segment `l` (0-based) crosses the middle line.
///
/// Takes the root of `middle(x) - (b1 x + b0)` on `[-1, 1]` nearest the
/// segment's nominal x. Falls back to the middle line at the nominal x when
/// there is no sign change (parallel or coincident lines).
pub fn segment_center(params: &FitLineParams, l: usize) -> Point {
    let seg = params.segments[l];
    let x_nominal = nominal_x(l, params.segment_count());
    let poly = &params.poly;
    let f = |x: f64| eval_middle_line(poly, x) - (seg.slope * x + seg.intercept);
    let df = |x: f64| eval_derivative(poly, x) - seg.slope;

    let nodes: Vec<f64> = (0..=ROOT_SCAN_STEPS)
        .map(|i| -1.0 + 2.0 * i as f64 / ROOT_SCAN_STEPS as f64)
        .collect();
    let values: Vec<f64> = nodes.iter().map(|&x| f(x)).collect();

    let mut roots = Vec::new();
    if values.iter().any(|&v| v != 0.0) {
        for i in 0..ROOT_SCAN_STEPS {
            let (a, b) = (nodes[i], nodes[i + 1]);
            let (fa, fb) = (values[i], values[i + 1]);
            if fa == 0.0 {
                roots.push(a);
            } else if fa * fb < 0.0 {
                roots.push(refine_root(&f, &df, a, b, fa));
            }
        }
        if values[ROOT_SCAN_STEPS] == 0.0 {
            roots.push(nodes[ROOT_SCAN_STEPS]);
        }
    }

    match roots
        .into_iter()
        .min_by(|a, b| (a - x_nominal).abs().total_cmp(&(b - x_nominal).abs()))
    {
        Some(x) => Point::new(x, eval_middle_line(poly, x)),
        None => Point::new(x_nominal, eval_middle_line(poly, x_nominal)),
    }
}

fn refine_root(f: &impl Fn(f64) -> f64, df: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, mut fa: f64) -> f64 {
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 || (b - a) < 1e-15 {
            a = m;
            b = m;
            break;
        }
        if fa * fm < 0.0 {
            b = m;
        } else {
            a = m;
            fa = fm;
        }
    }
    let (lo, hi) = (a, b);
    let mut x = 0.5 * (lo + hi);
    for _ in 0..50 {
        let fx = f(x);
        if fx.abs() < 1e-12 {
            break;
        }
        let d = df(x);
        if d == 0.0 || !d.is_finite() {
            break;
        }
        x -= fx / d;
    }
    x
}

/// Ordered control points: slots `0..L` are the top row left to right,
/// slots `L..2L` the bottom row left to right.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPoints {
    points: Vec<Point>,
}

impl ControlPoints {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() < 4 || !points.len().is_multiple_of(2) {
            return Err(Error::arg(format!(
                "control point count must be even and >= 4, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::arg("non-finite control point"));
        }
        Ok(ControlPoints { points })
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

    pub fn segment_count(&self) -> usize {
        self.points.len() / 2
    }

    pub fn top(&self) -> &[Point] {
        &self.points[..self.segment_count()]
    }

    pub fn bottom(&self) -> &[Point] {
        &self.points[self.segment_count()..]
    }

    /// Elementwise `self + offsets`.
    pub fn offset(&self, offsets: &[Point]) -> Result<ControlPoints> {
        if offsets.len() != self.points.len() {
            return Err(Error::arg(format!(
                "{} offsets for {} control points",
                offsets.len(),
                self.points.len()
            )));
        }
        ControlPoints::new(self.points.iter().zip(offsets).map(|(&p, &d)| p + d).collect())
    }

    /// Elementwise `self - other`.
    pub fn minus(&self, other: &ControlPoints) -> Vec<Point> {
        self.points.iter().zip(&other.points).map(|(&a, &b)| a - b).collect()
    }

    /// True when the set cannot carry a unique interpolating TPS: two
    /// coincident points, or three consecutive points of one row collinear
    /// with every point of the other row.
    pub fn is_degenerate(&self) -> bool {
        let pts = &self.points;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                if pts[i].dist_sq(pts[j]) < 1e-24 {
                    return true;
                }
            }
        }
        if collinear(pts) {
            return true;
        }
        let (top, bottom) = (self.top(), self.bottom());
        for (row, other) in [(top, bottom), (bottom, top)] {
            for window in row.windows(3) {
                let set: Vec<Point> = window.iter().chain(other).copied().collect();
                if collinear(&set) {
                    return true;
                }
            }
        }
        false
    }
}

fn collinear(points: &[Point]) -> bool {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let my = points.iter().map(|p| p.y).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p.x - mx, p.y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    // smallest eigenvalue of the 2x2 scatter matrix relative to the largest
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    let big = 0.5 * tr + disc;
    let small = 0.5 * tr - disc;
    big == 0.0 || small <= 1e-20 * big
}

/// Endpoints of every segment, top endpoint first.
///
/// The segment direction is `(1, b1)` normalized and flipped so that its y
/// component is non-positive; the top endpoint is `center + r d`.
pub fn control_points(params: &FitLineParams) -> ControlPoints {
    let l_count = params.segment_count();
    let mut top = Vec::with_capacity(l_count);
    let mut bottom = Vec::with_capacity(l_count);
    for (l, seg) in params.segments.iter().enumerate() {
        let center = segment_center(params, l);
        let norm = (1.0 + seg.slope * seg.slope).sqrt();
        let mut d = Point::new(1.0 / norm, seg.slope / norm);
        if d.y > 0.0 {
            d = d * -1.0;
        }
        top.push(center + d * seg.half_len);
        bottom.push(center - d * seg.half_len);
    }
    top.extend(bottom);
    ControlPoints { points: top }
}

/// The fixed layout of the rectified frame: top row at `y = -0.5`, bottom
/// row at `y = +0.5`, both spanning `x` in `[-0.5, 0.5]` evenly.
pub fn base_points(segment_count: usize) -> Result<ControlPoints> {
    if segment_count < 2 {
        return Err(Error::arg(format!("need at least 2 segments, got {segment_count}")));
    }
    let row = |y: f64| (0..segment_count).map(move |j| Point::new(nominal_x(j, segment_count), y));
    Ok(ControlPoints {
        points: row(-0.5).chain(row(0.5)).collect(),
    })
}
