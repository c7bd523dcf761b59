//! Synthetic text-line cases with known distortion.
//!
//! A template is rasterized from axis-aligned glyph primitives, then bent by
//! the spline that takes sampled fitting-line control points onto the base
//! layout. The same control points, read as offsets from the base layout,
//! are the ground truth for rectification.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitline::{
    base_points, control_points, eval_middle_line, nominal_x, segment_center, ControlPoints, FitLineParams, Segment,
    DEFAULT_SEGMENTS,
};
use crate::imagebuf::{psnr, write_ppm, Image, Point};
use crate::rectifier::{rectify_once, ParamState, RectifyConfig};
use crate::sampler::sample;
use crate::tps::{map_grid, solve};

pub const SRC_W: usize = 200;
pub const SRC_H: usize = 64;
pub const TEMPLATE_W: usize = 100;
pub const TEMPLATE_H: usize = 32;
/// Oracle rectification quality every generated case must reach.
pub const MIN_ORACLE_PSNR: f64 = 25.0;
pub const MAX_ATTEMPTS: usize = 10;
const TEMPLATE_BLUR: f64 = 1.3;
/// Largest displacement, in template pixels, that bending the base layout
/// onto the control points and back may leave behind.
const MAX_ROUND_TRIP: f64 = 1.0;
/// Control points must stay inside this half-width of the source frame.
const BOUND: f64 = 0.47;
const MIN_TILT: f64 = 0.02;

/// Axis-aligned glyph building blocks in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Glyph {
    /// Filled rectangle.
    Bar {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        intensity: f64,
    },
    /// Rectangle outline with the given stroke.
    Frame {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        stroke: usize,
        intensity: f64,
    },
}

impl Glyph {
    fn rect(&self) -> (usize, usize, usize, usize) {
        match *self {
            Glyph::Bar { x, y, w, h, .. } | Glyph::Frame { x, y, w, h, .. } => (x, y, w, h),
        }
    }
}

/// Rasterizes `glyphs` on a white canvas; overlapping glyphs keep the darker value.
pub fn render_template(glyphs: &[Glyph], w: usize, h: usize) -> Result<Image> {
    let mut data = vec![1.0f64; w * h];
    for (i, g) in glyphs.iter().enumerate() {
        let (x, y, gw, gh) = g.rect();
        if x + gw > w || y + gh > h {
            return Err(Error::arg(format!(
                "glyph {i} at ({x},{y}) size {gw}x{gh} leaves the {w}x{h} canvas"
            )));
        }
        let (intensity, stroke) = match *g {
            Glyph::Bar { intensity, .. } => (intensity, usize::MAX),
            Glyph::Frame { intensity, stroke, .. } => (intensity, stroke),
        };
        if !(0.0..=1.0).contains(&intensity) {
            return Err(Error::arg(format!("glyph {i} intensity {intensity} outside [0, 1]")));
        }
        for r in y..y + gh {
            for c in x..x + gw {
                let edge = r - y < stroke || y + gh - 1 - r < stroke || c - x < stroke || x + gw - 1 - c < stroke;
                if edge {
                    let v = &mut data[r * w + c];
                    *v = v.min(intensity);
                }
            }
        }
    }
    Image::new(w, h, 1, data)
}

/// A seeded line of letter-like shapes: stems, bowls, crossbars, ascenders
/// and descenders laid out on a common x-height band.
pub fn banner_glyphs(seed: u64, w: usize, h: usize) -> Vec<Glyph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sy = |v: f64| ((v * h as f64 / 32.0).round() as usize).min(h.saturating_sub(1));
    let sx = w as f64 / 100.0;
    let (asc, xtop, base, desc) = (sy(4.0), sy(10.0), sy(25.0), sy(29.0));
    let margin = (4.0 * sx).round() as usize;
    let mut glyphs = Vec::new();
    let mut x = margin;
    loop {
        let stroke = rng.gen_range(2..=3);
        let gw = rng.gen_range(6..=9).max(2 * stroke + 2);
        if x + gw + margin > w {
            break;
        }
        let ink = rng.gen_range(0.0..0.25);
        let bar = |x: usize, y: usize, w: usize, h: usize| Glyph::Bar {
            x,
            y,
            w,
            h,
            intensity: ink,
        };
        let bowl = |x: usize, y: usize, w: usize, h: usize| Glyph::Frame {
            x,
            y,
            w,
            h,
            stroke,
            intensity: ink,
        };
        match rng.gen_range(0..7) {
            0 => glyphs.push(bar(x, asc, stroke, base - asc)),
            1 => {
                glyphs.push(bar(x, xtop, stroke, base - xtop));
                glyphs.push(bar(x + gw - stroke, xtop, stroke, base - xtop));
                glyphs.push(bar(x, xtop, gw, stroke));
            }
            2 => glyphs.push(bowl(x, xtop, gw, base - xtop)),
            3 => {
                glyphs.push(bowl(x, xtop, gw, base - xtop));
                glyphs.push(bar(x, desc.min(h) - (desc - xtop), stroke, desc - xtop));
            }
            4 => {
                glyphs.push(bowl(x, xtop, gw, base - xtop));
                glyphs.push(bar(x, (xtop + base) / 2, gw, stroke));
            }
            5 => {
                glyphs.push(bar(x, xtop + stroke + 1, stroke, base - xtop - stroke - 1));
                glyphs.push(bar(x, xtop - stroke.min(xtop), stroke, stroke));
            }
            _ => {
                glyphs.push(bar(x + gw / 2 - stroke / 2, asc + 2, stroke, base - asc - 2));
                glyphs.push(bar(x, xtop, gw, stroke));
            }
        }
        x += gw + rng.gen_range(2..=4);
    }
    glyphs
}

/// Bends `template` into a `src_w x src_h` source image whose text follows
/// the fitting lines of `params`. Exposed background reads white.
pub fn warp_with_params(template: &Image, params: &FitLineParams, src_w: usize, src_h: usize) -> Result<Image> {
    let control = control_points(params);
    warp_with_control(template, &control, src_w, src_h)
}

/// [`warp_with_params`] for control points given directly.
pub fn warp_with_control(template: &Image, control: &ControlPoints, src_w: usize, src_h: usize) -> Result<Image> {
    if control.is_degenerate() {
        return Err(Error::Numerical {
            message: "control points are coincident or collinear".into(),
            condition: f64::INFINITY,
        });
    }
    if src_w == 0 || src_h == 0 {
        return Err(Error::arg("source dimensions must be positive"));
    }
    let base = base_points(control.segment_count())?;
    let coeffs = solve(control, &base, 0.0)?;
    Ok(sample(template, &map_grid(&coeffs, src_w, src_h), 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Mild,
    Perspective,
    Curved,
    Severe,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [
        Difficulty::Mild,
        Difficulty::Perspective,
        Difficulty::Curved,
        Difficulty::Severe,
    ];

    fn ranges(self) -> Ranges {
        let mild = Ranges {
            a0: 0.03,
            a1: 0.05,
            a2: 0.1,
            a34: 0.0,
            scale: (0.9, 0.96),
            shear: 0.05,
            persp: 0.0,
            r0: (0.3, 0.45),
        };
        match self {
            Difficulty::Mild => mild,
            Difficulty::Perspective => Ranges {
                a0: 0.04,
                a1: 0.15,
                scale: (0.82, 0.95),
                shear: 0.3,
                persp: 0.35,
                r0: (0.2, 0.45),
                ..mild
            },
            Difficulty::Curved => Ranges {
                a2: 0.4,
                a34: 0.2,
                scale: (0.85, 0.95),
                r0: (0.2, 0.45),
                ..mild
            },
            Difficulty::Severe => Ranges {
                a0: 0.04,
                a1: 0.15,
                a2: 0.4,
                a34: 0.2,
                scale: (0.8, 0.95),
                shear: 0.3,
                persp: 0.35,
                r0: (0.2, 0.45),
            },
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Mild => "mild",
            Difficulty::Perspective => "perspective",
            Difficulty::Curved => "curved",
            Difficulty::Severe => "severe",
        })
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Difficulty::ALL
            .into_iter()
            .find(|d| d.to_string() == s)
            .ok_or_else(|| Error::arg(format!("unknown difficulty {s:?}")))
    }
}

#[derive(Debug, Clone, Copy)]
struct Ranges {
    a0: f64,
    a1: f64,
    a2: f64,
    a34: f64,
    scale: (f64, f64),
    shear: f64,
    persp: f64,
    r0: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCase {
    pub template: Image,
    pub distorted: Image,
    pub true_params: FitLineParams,
    /// Control points of `true_params` minus the base layout.
    pub true_offsets: Vec<Point>,
    pub seed: u64,
    pub difficulty: Difficulty,
    /// PSNR of the ground-truth rectification against the template.
    pub oracle_psnr: f64,
    pub attempts: usize,
}

impl SynthCase {
    pub fn true_state(&self) -> ParamState {
        ParamState::from_delta(self.true_offsets.clone()).expect("offsets are finite")
    }
}

fn symmetric(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half == 0.0 {
        0.0
    } else {
        rng.gen_range(-half..=half)
    }
}

/// Draws parameters and the x positions where each segment is meant to
/// cross the middle line.
fn sample_params(rng: &mut ChaCha8Rng, r: &Ranges) -> (FitLineParams, Vec<f64>) {
    let poly = vec![
        symmetric(rng, r.a0),
        symmetric(rng, r.a1),
        symmetric(rng, r.a2),
        symmetric(rng, r.a34),
        symmetric(rng, r.a34),
    ];
    let scale = rng.gen_range(r.scale.0..=r.scale.1);
    let room = 0.5 * (1.0 - scale) - 0.03;
    let shift = symmetric(rng, room.max(0.0));
    let shear = symmetric(rng, r.shear);
    let persp = symmetric(rng, r.persp);
    let r0 = rng.gen_range(r.r0.0..=r.r0.1);
    let l_count = DEFAULT_SEGMENTS;
    let slope_at = |x: f64| {
        poly.iter()
            .enumerate()
            .skip(1)
            .map(|(k, a)| k as f64 * a * x.powi(k as i32 - 1))
            .sum::<f64>()
    };
    let centers: Vec<f64> = (0..l_count).map(|l| scale * nominal_x(l, l_count) + shift).collect();
    let segments = (0..l_count)
        .map(|l| {
            let xn = nominal_x(l, l_count);
            let xc = centers[l];
            let yc = eval_middle_line(&poly, xc);
            let mut tilt = slope_at(xc).atan() + shear;
            if tilt.abs() < MIN_TILT {
                tilt = MIN_TILT.copysign(tilt);
            }
            let slope = -1.0 / tilt.tan();
            let jitter = symmetric(rng, 0.01);
            let half_len = (r0 * (1.0 + persp * xn) + jitter).clamp(0.2, 0.45);
            Segment {
                slope,
                intercept: yc - slope * xc,
                half_len,
            }
        })
        .collect();
    (
        FitLineParams::new(poly, segments).expect("sampled parameters are finite"),
        centers,
    )
}

/// Rejects layouts that leave the source frame, fold over, fail to
/// intersect the middle line where intended, or bend too far for the
/// reverse spline to undo.
fn acceptable(params: &FitLineParams, control: &ControlPoints, centers: &[f64]) -> bool {
    if control.points().iter().any(|p| p.x.abs() > BOUND || p.y.abs() > BOUND) {
        return false;
    }
    for row in [control.top(), control.bottom()] {
        if row.windows(2).any(|w| w[1].x - w[0].x < 0.01) {
            return false;
        }
    }
    if control.top().iter().zip(control.bottom()).any(|(t, b)| b.y - t.y < 0.2) {
        return false;
    }
    for (l, &xc) in centers.iter().enumerate() {
        if (segment_center(params, l).x - xc).abs() > 1e-6 {
            return false;
        }
    }
    !control.is_degenerate() && round_trip_error(control) < MAX_ROUND_TRIP
}

/// Largest template-pixel displacement left after bending the base layout
/// onto `control` and back.
fn round_trip_error(control: &ControlPoints) -> f64 {
    let base = base_points(control.segment_count()).expect("segment count checked");
    let (Ok(fwd), Ok(back)) = (solve(&base, control, 0.0), solve(control, &base, 0.0)) else {
        return f64::INFINITY;
    };
    let mut worst = 0.0f64;
    for i in 0..=20 {
        for j in 0..=8 {
            let q = Point::new(-0.5 + i as f64 / 20.0, -0.5 + j as f64 / 8.0);
            let e = back.map_point(fwd.map_point(q)) - q;
            worst = worst.max((e.x * TEMPLATE_W as f64).hypot(e.y * TEMPLATE_H as f64));
        }
    }
    worst
}

/// Deterministic synthetic case. Geometry that violates the layout rules is
/// redrawn without limit; a layout whose ground-truth rectification misses
/// [`MIN_ORACLE_PSNR`] counts as one of at most [`MAX_ATTEMPTS`] attempts.
pub fn gen_case(seed: u64, difficulty: Difficulty) -> Result<SynthCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ difficulty.tag());
    let glyphs = banner_glyphs(rng.gen(), TEMPLATE_W, TEMPLATE_H);
    let template = render_template(&glyphs, TEMPLATE_W, TEMPLATE_H)?.gaussian_blur(TEMPLATE_BLUR);
    let ranges = difficulty.ranges();
    let base = base_points(DEFAULT_SEGMENTS)?;
    let config = RectifyConfig::default();
    let mut best = f64::NEG_INFINITY;

    for attempt in 1..=MAX_ATTEMPTS {
        let (params, control) = loop {
            let (params, centers) = sample_params(&mut rng, &ranges);
            let control = control_points(&params);
            if acceptable(&params, &control, &centers) {
                break (params, control);
            }
        };
        let distorted = warp_with_control(&template, &control, SRC_W, SRC_H)?;
        let offsets = control.minus(&base);
        let state = ParamState::from_delta(offsets.clone())?;
        let oracle = psnr(&rectify_once(&distorted, &state, &config)?, &template)?;
        if oracle >= MIN_ORACLE_PSNR {
            return Ok(SynthCase {
                template,
                distorted,
                true_params: params,
                true_offsets: offsets,
                seed,
                difficulty,
                oracle_psnr: oracle,
                attempts: attempt,
            });
        }
        best = best.max(oracle);
    }
    Err(Error::Numerical {
        message: format!(
            "no {difficulty} case for seed {seed} reached {MIN_ORACLE_PSNR} dB in {MAX_ATTEMPTS} attempts (best {best:.2})"
        ),
        condition: f64::NAN,
    })
}

/// `count` consecutive seeds starting at `first_seed`.
pub fn suite(difficulty: Difficulty, first_seed: u64, count: usize) -> Result<Vec<SynthCase>> {
    (first_seed..first_seed + count as u64)
        .map(|s| gen_case(s, difficulty))
        .collect()
}

#[derive(Serialize)]
struct Meta {
    seed: u64,
    difficulty: Difficulty,
    src_w: usize,
    src_h: usize,
    oracle_psnr: f64,
    attempts: usize,
}

/// Writes `template.ppm`, `distorted.ppm`, `params.json` and `meta.json`.
pub fn write_bundle(case: &SynthCase, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_ppm(dir.join("template.ppm"), &case.template)?;
    write_ppm(dir.join("distorted.ppm"), &case.distorted)?;
    let params = crate::cli::ParamsFile::FitLine(case.true_params.clone());
    std::fs::write(dir.join("params.json"), params.to_json())?;
    let meta = Meta {
        seed: case.seed,
        difficulty: case.difficulty,
        src_w: case.distorted.width(),
        src_h: case.distorted.height(),
        oracle_psnr: case.oracle_psnr,
        attempts: case.attempts,
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}
