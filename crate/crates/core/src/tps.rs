//! Thin-plate-spline fitting and evaluation.
//!
//! The spline is centered on the base points of the rectified frame and
//! maps them onto target points in the distorted frame:
//!
//! ```text
//! t = A^T [1, x, y] + sum_j w_j U(|p - t'_j|),   U(r) = r^2 ln r^2
//! ```
//!
//! Coefficients come from the bordered system
//! `[[S + lambda I, 1, B], [1^T, 0, 0], [B^T, 0, 0]] C = [targets; 0; 0]`
//! with `S_ij = U(|t'_i - t'_j|)`. Because the system matrix only depends on
//! the base points, one factorization serves every target set, and the
//! mapped grid is linear in the targets (see [`GridBasis`]).

use nalgebra::{DMatrix, Dyn, LU};

use crate::error::{Error, Result};
use crate::fitline::ControlPoints;
use crate::imagebuf::{pixel_center, Point};
use crate::sampler::Grid;

/// Regularization applied automatically when the unregularized system is
/// numerically singular.
pub const FALLBACK_LAMBDA: f64 = 1e-8;

/// Pivot ratio below which a factorization counts as singular.
const PIVOT_RATIO_TOL: f64 = 1e-13;

/// `r^2 ln(r^2)`, continuously extended with `U(0) = 0`.
#[inline]
pub fn kernel_u(r: f64) -> f64 {
    kernel_u_sq(r * r)
}

/// The TPS kernel evaluated from a squared distance.
#[inline]
pub fn kernel_u_sq(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpsCoeffs {
    /// One weight vector per base point.
    pub kernel_weights: Vec<Point>,
    /// Rows for the constant, x and y terms.
    pub affine: [Point; 3],
    /// Kernel centers (the base points).
    pub source_base: Vec<Point>,
    pub lambda: f64,
}

impl TpsCoeffs {
    pub fn map_point(&self, p: Point) -> Point {
        let [c, ax, ay] = self.affine;
        let mut out = c + ax * p.x + ay * p.y;
        for (w, &b) in self.kernel_weights.iter().zip(&self.source_base) {
            out = out + *w * kernel_u_sq(p.dist_sq(b));
        }
        out
    }

    /// Root-mean-square distance between mapped base points and their targets.
    pub fn rms_residual(&self, targets: &ControlPoints) -> f64 {
        let sum: f64 = self
            .source_base
            .iter()
            .zip(targets.points())
            .map(|(&b, &t)| self.map_point(b).dist_sq(t))
            .sum();
        (sum / self.source_base.len() as f64).sqrt()
    }

    /// Largest distance between a mapped base point and its target.
    pub fn max_residual(&self, targets: &ControlPoints) -> f64 {
        self.source_base
            .iter()
            .zip(targets.points())
            .map(|(&b, &t)| self.map_point(b).dist_sq(t).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Maps the center of every output pixel through the spline.
pub fn map_grid(coeffs: &TpsCoeffs, out_w: usize, out_h: usize) -> Grid {
    let coords = (0..out_h)
        .flat_map(|r| (0..out_w).map(move |c| (c, r)))
        .map(|(c, r)| coeffs.map_point(pixel_center(c, r, out_w, out_h)))
        .collect();
    Grid::new(out_w, out_h, coords).expect("grid dimensions are consistent")
}

/// Fits the spline taking `base` onto `targets`.
pub fn solve(base: &ControlPoints, targets: &ControlPoints, lambda: f64) -> Result<TpsCoeffs> {
    TpsSystem::new(base, lambda)?.solve(targets)
}

/// A factorized bordered system for a fixed set of base points.
#[derive(Debug, Clone)]
pub struct TpsSystem {
    base: Vec<Point>,
    lambda: f64,
    matrix: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
}

impl TpsSystem {
    /// Assembles and factorizes the system. With `lambda == 0` a near-singular
    /// factorization is retried once with [`FALLBACK_LAMBDA`].
    pub fn new(base: &ControlPoints, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::arg(format!(
                "regularization must be finite and >= 0, got {lambda}"
            )));
        }
        let sys = Self::factorize(base.points(), lambda);
        if !sys.is_singular() {
            return Ok(sys);
        }
        if lambda == 0.0 {
            let retry = Self::factorize(base.points(), FALLBACK_LAMBDA);
            if !retry.is_singular() {
                return Ok(retry);
            }
        }
        Err(Error::Numerical {
            message: format!("base points do not determine a spline (lambda = {lambda})"),
            condition: sys.condition_estimate(),
        })
    }

    fn factorize(base: &[Point], lambda: f64) -> Self {
        let n = base.len();
        let size = n + 3;
        let mut m = DMatrix::<f64>::zeros(size, size);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = kernel_u_sq(base[i].dist_sq(base[j]));
            }
            m[(i, i)] += lambda;
            let row = [1.0, base[i].x, base[i].y];
            for (k, v) in row.into_iter().enumerate() {
                m[(i, n + k)] = v;
                m[(n + k, i)] = v;
            }
        }
        let lu = m.clone().lu();
        TpsSystem {
            base: base.to_vec(),
            lambda,
            matrix: m,
            lu,
        }
    }

    fn is_singular(&self) -> bool {
        let u = self.lu.u();
        let diag: Vec<f64> = (0..u.nrows()).map(|i| u[(i, i)].abs()).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        !(max > 0.0 && min.is_finite() && min / max > PIVOT_RATIO_TOL)
    }

    /// Regularization actually in effect (may be the fallback value).
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn base(&self) -> &[Point] {
        &self.base
    }

    /// 2-norm condition number of the bordered matrix.
    pub fn condition_estimate(&self) -> f64 {
        let sv = self.matrix.clone().singular_values();
        let max = sv.iter().cloned().fold(0.0, f64::max);
        let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    pub fn solve(&self, targets: &ControlPoints) -> Result<TpsCoeffs> {
        let n = self.base.len();
        if targets.len() != n {
            return Err(Error::arg(format!("{} targets for {n} base points", targets.len())));
        }
        let mut rhs = DMatrix::<f64>::zeros(n + 3, 2);
        for (i, t) in targets.points().iter().enumerate() {
            rhs[(i, 0)] = t.x;
            rhs[(i, 1)] = t.y;
        }
        let c = self.lu.solve(&rhs).ok_or_else(|| Error::Numerical {
            message: "factorization could not be applied".into(),
            condition: self.condition_estimate(),
        })?;
        let row = |i: usize| Point::new(c[(i, 0)], c[(i, 1)]);
        Ok(TpsCoeffs {
            kernel_weights: (0..n).map(row).collect(),
            affine: [row(n), row(n + 1), row(n + 2)],
            source_base: self.base.clone(),
            lambda: self.lambda,
        })
    }

    /// Precomputes the linear map from targets to the `out_w x out_h` grid.
    pub fn grid_basis(&self, out_w: usize, out_h: usize) -> GridBasis {
        let n = self.base.len();
        let npix = out_w * out_h;
        let mut phi = DMatrix::<f64>::zeros(n + 3, npix);
        for r in 0..out_h {
            for c in 0..out_w {
                let q = pixel_center(c, r, out_w, out_h);
                let col = r * out_w + c;
                for (j, &b) in self.base.iter().enumerate() {
                    phi[(j, col)] = kernel_u_sq(q.dist_sq(b));
                }
                phi[(n, col)] = 1.0;
                phi[(n + 1, col)] = q.x;
                phi[(n + 2, col)] = q.y;
            }
        }
        // the system is symmetric, so A^-1 phi gives the per-pixel target weights
        let sol = self.lu.solve(&phi).expect("factorization checked at construction");
        let mut weights = Vec::with_capacity(npix * n);
        for col in 0..npix {
            weights.extend((0..n).map(|j| sol[(j, col)]));
        }
        GridBasis {
            width: out_w,
            height: out_h,
            points: n,
            weights,
        }
    }
}

/// Row `p` holds `d grid(p) / d target_j` for every target `j`; the same
/// weights apply to the x and y components.
#[derive(Debug, Clone)]
pub struct GridBasis {
    width: usize,
    height: usize,
    points: usize,
    weights: Vec<f64>,
}

impl GridBasis {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn weights(&self, pixel: usize) -> &[f64] {
        &self.weights[pixel * self.points..(pixel + 1) * self.points]
    }

    pub fn map(&self, targets: &[Point]) -> Grid {
        assert_eq!(targets.len(), self.points, "target count mismatch");
        let coords = self
            .weights
            .chunks_exact(self.points)
            .map(|row| {
                row.iter().zip(targets).fold(Point::ZERO, |acc, (&w, &t)| {
                    Point::new(acc.x + w * t.x, acc.y + w * t.y)
                })
            })
            .collect();
        Grid::new(self.width, self.height, coords).expect("basis dimensions are consistent")
    }

    /// `sum_p w_p w_p^T` over all pixels: the metric that measures a change
    /// of targets by the grid displacement it causes.
    pub fn gram(&self) -> DMatrix<f64> {
        let w = DMatrix::from_row_slice(self.width * self.height, self.points, &self.weights);
        w.transpose() * w
    }

    /// Chain rule through the grid: given `d f / d grid` per pixel, returns
    /// `d f / d target_j` per target.
    pub fn pullback(&self, d_grid: &[Point]) -> Vec<Point> {
        let mut out = vec![Point::ZERO; self.points];
        for (row, g) in self.weights.chunks_exact(self.points).zip(d_grid) {
            if g.x == 0.0 && g.y == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                o.x += w * g.x;
                o.y += w * g.y;
            }
        }
        out
    }
}
