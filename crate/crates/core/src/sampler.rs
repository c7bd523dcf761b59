//! Grid-driven bilinear sampling with analytic derivatives.
//!
//! Each output pixel reads the source at a normalized coordinate taken from
//! a [`Grid`]. Taps that fall outside the source raster read a constant pad
//! value. Derivatives are taken with respect to the grid coordinates only.

use crate::error::{Error, Result};
use crate::imagebuf::{pixel_center, to_pixel, Image, Point};

/// Offset added before choosing the source cell for derivatives, so taps
/// exactly on a cell boundary use the cell to their lower-right.
pub const BOUNDARY_NUDGE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    coords: Vec<Point>,
}

impl Grid {
    pub fn new(width: usize, height: usize, coords: Vec<Point>) -> Result<Self> {
        if coords.len() != width * height {
            return Err(Error::arg(format!(
                "{} grid coordinates for {width}x{height}",
                coords.len()
            )));
        }
        Ok(Grid { width, height, coords })
    }

    /// The lattice of pixel centers, i.e. the grid of an identity warp.
    pub fn identity(width: usize, height: usize) -> Self {
        let coords = (0..height)
            .flat_map(|r| (0..width).map(move |c| pixel_center(c, r, width, height)))
            .collect();
        Grid { width, height, coords }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn at(&self, col: usize, row: usize) -> Point {
        self.coords[row * self.width + col]
    }

    /// Fraction of coordinates outside the `[-0.5, 0.5]^2` source frame.
    pub fn out_of_bounds_fraction(&self) -> f64 {
        let outside = self
            .coords
            .iter()
            .filter(|p| !(p.x.abs() <= 0.5 && p.y.abs() <= 0.5))
            .count();
        outside as f64 / self.coords.len() as f64
    }
}

/// Output image plus `d out / d grid` in normalized units, laid out like the
/// image data (one entry per pixel and channel).
#[derive(Debug, Clone)]
pub struct SampleJacobian {
    pub image: Image,
    pub d_dx: Vec<f64>,
    pub d_dy: Vec<f64>,
}

struct Cell {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

/// Rounds coordinates within this many pixels of an integer onto it, so
/// taps at pixel centers return stored values exactly.
const SNAP: f64 = 1e-10;

#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

impl Cell {
    fn locate_snapped(px: f64, py: f64) -> Cell {
        Cell::locate(snap(px), snap(py))
    }

    fn locate(px: f64, py: f64) -> Cell {
        let xf = px.floor();
        let yf = py.floor();
        Cell {
            x0: xf as isize,
            y0: yf as isize,
            fx: px - xf,
            fy: py - yf,
        }
    }

    #[inline]
    fn taps(&self, src: &Image, ch: usize, pad: f64) -> [f64; 4] {
        [
            src.get_or(self.x0, self.y0, ch, pad),
            src.get_or(self.x0 + 1, self.y0, ch, pad),
            src.get_or(self.x0, self.y0 + 1, ch, pad),
            src.get_or(self.x0 + 1, self.y0 + 1, ch, pad),
        ]
    }

    #[inline]
    fn blend(&self, [v00, v10, v01, v11]: [f64; 4]) -> f64 {
        let top = v00 + (v10 - v00) * self.fx;
        let bot = v01 + (v11 - v01) * self.fx;
        top + (bot - top) * self.fy
    }
}

/// Bilinear sampling of `src` at every grid coordinate; out-of-raster taps read `pad`.
pub fn sample(src: &Image, grid: &Grid, pad: f64) -> Image {
    let c = src.channels();
    let mut data = Vec::with_capacity(grid.coords.len() * c);
    for &g in &grid.coords {
        if !g.is_finite() {
            data.extend(std::iter::repeat_n(pad, c));
            continue;
        }
        let (px, py) = to_pixel(g, src.width(), src.height());
        let cell = Cell::locate_snapped(px, py);
        for ch in 0..c {
            data.push(cell.blend(cell.taps(src, ch, pad)));
        }
    }
    Image::from_clamped(grid.width, grid.height, c, data)
}

/// [`sample`] plus the analytic piecewise-bilinear partials with respect to
/// the grid coordinates.
pub fn sample_with_jacobian(src: &Image, grid: &Grid, pad: f64) -> SampleJacobian {
    let c = src.channels();
    let n = grid.coords.len() * c;
    let mut data = Vec::with_capacity(n);
    let mut d_dx = Vec::with_capacity(n);
    let mut d_dy = Vec::with_capacity(n);
    let (sw, sh) = (src.width() as f64, src.height() as f64);
    for &g in &grid.coords {
        if !g.is_finite() {
            for _ in 0..c {
                data.push(pad);
                d_dx.push(0.0);
                d_dy.push(0.0);
            }
            continue;
        }
        let (px, py) = to_pixel(g, src.width(), src.height());
        let cell = Cell::locate_snapped(px, py);
        let dcell = Cell::locate(px + BOUNDARY_NUDGE, py + BOUNDARY_NUDGE);
        let same = cell.x0 == dcell.x0 && cell.y0 == dcell.y0;
        for ch in 0..c {
            let taps = cell.taps(src, ch, pad);
            data.push(cell.blend(taps));
            let [v00, v10, v01, v11] = if same { taps } else { dcell.taps(src, ch, pad) };
            let fx = dcell.fx.clamp(0.0, 1.0);
            let fy = dcell.fy.clamp(0.0, 1.0);
            let dpx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01);
            let dpy = (1.0 - fx) * (v01 - v00) + fx * (v11 - v10);
            d_dx.push(dpx * sw);
            d_dy.push(dpy * sh);
        }
    }
    SampleJacobian {
        image: Image::from_clamped(grid.width, grid.height, c, data),
        d_dx,
        d_dy,
    }
}
