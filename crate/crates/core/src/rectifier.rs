//! Iterative rectification.
//!
//! The current pose is `P = P0 + dP` where `P0` is the base layout. Every
//! iteration rectifies the *original* image with the current pose, hands the
//! result to a [`ParamProvider`] and adds the returned increment to `dP`.
//! The final output is again sampled from the original, so no resampling
//! blur or cropping accumulates across iterations.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fitline::{base_points, ControlPoints, DEFAULT_ORDER, DEFAULT_SEGMENTS};
use crate::imagebuf::{mse, Image, Point};
use crate::sampler::{sample, Grid};
use crate::tps::{map_grid, TpsSystem};

/// Largest magnitude of a single increment component per iteration.
pub const MAX_INCREMENT: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct RectifyConfig {
    pub iterations: usize,
    pub segments: usize,
    pub order: usize,
    pub out_w: usize,
    pub out_h: usize,
    pub lambda: f64,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        RectifyConfig {
            iterations: 5,
            segments: DEFAULT_SEGMENTS,
            order: DEFAULT_ORDER,
            out_w: 100,
            out_h: 32,
            lambda: 0.0,
        }
    }
}

impl RectifyConfig {
    pub fn with_iterations(mut self, n: usize) -> Self {
        self.iterations = n;
        self
    }

    pub fn with_segments(mut self, l: usize) -> Self {
        self.segments = l;
        self
    }
}

/// Base layout plus accumulated offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    base: ControlPoints,
    delta: Vec<Point>,
}

/// `P0 = base_points(L)` with zero offsets.
pub fn init_state(segments: usize) -> Result<ParamState> {
    let base = base_points(segments)?;
    let delta = vec![Point::ZERO; base.len()];
    Ok(ParamState { base, delta })
}

impl ParamState {
    /// A state at the base layout with the given offsets.
    pub fn from_delta(delta: Vec<Point>) -> Result<ParamState> {
        if !delta.len().is_multiple_of(2) {
            return Err(Error::arg(format!("odd offset count {}", delta.len())));
        }
        let mut state = init_state(delta.len() / 2)?;
        if delta.iter().any(|d| !d.is_finite()) {
            return Err(Error::arg("non-finite offset"));
        }
        state.delta = delta;
        Ok(state)
    }

    /// The state whose current points equal `targets`.
    pub fn from_targets(targets: &ControlPoints) -> Result<ParamState> {
        let base = base_points(targets.segment_count())?;
        ParamState::from_delta(targets.minus(&base))
    }

    pub fn base(&self) -> &ControlPoints {
        &self.base
    }

    pub fn delta(&self) -> &[Point] {
        &self.delta
    }

    pub fn segment_count(&self) -> usize {
        self.base.segment_count()
    }

    /// `P0 + dP`.
    pub fn current(&self) -> ControlPoints {
        self.base
            .offset(&self.delta)
            .expect("offsets match base and are finite")
    }

    /// Frobenius norm of the offsets.
    pub fn delta_norm(&self) -> f64 {
        self.delta.iter().map(|d| d.x * d.x + d.y * d.y).sum::<f64>().sqrt()
    }

    /// Adds `inc` after clamping each component to `[-MAX_INCREMENT, MAX_INCREMENT]`.
    /// Returns the increment actually applied.
    pub fn accumulate(&mut self, inc: &[Point]) -> Result<Vec<Point>> {
        if inc.len() != self.delta.len() {
            return Err(Error::arg(format!(
                "increment has {} points, state has {}",
                inc.len(),
                self.delta.len()
            )));
        }
        if let Some(i) = inc.iter().position(|p| !p.is_finite()) {
            return Err(Error::arg(format!("non-finite increment at point {i}")));
        }
        let applied: Vec<Point> = inc
            .iter()
            .map(|p| {
                Point::new(
                    p.x.clamp(-MAX_INCREMENT, MAX_INCREMENT),
                    p.y.clamp(-MAX_INCREMENT, MAX_INCREMENT),
                )
            })
            .collect();
        for (d, a) in self.delta.iter_mut().zip(&applied) {
            *d = *d + *a;
        }
        Ok(applied)
    }
}

/// Anything that can propose the next pose increment from the current
/// rectification; stands in for a learned localization network.
pub trait ParamProvider {
    fn estimate_delta(&mut self, rectified: &Image, state: &ParamState) -> Result<Vec<Point>>;

    /// Free-form details about the last estimate, stored in the trace.
    fn diagnostics(&self) -> Option<serde_json::Value> {
        None
    }
}

/// Always proposes no change.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroProvider;

impl ParamProvider for ZeroProvider {
    fn estimate_delta(&mut self, _rectified: &Image, state: &ParamState) -> Result<Vec<Point>> {
        Ok(vec![Point::ZERO; state.delta().len()])
    }
}

/// Knows the total offset and hands out an equal share per iteration.
#[derive(Debug, Clone)]
pub struct OracleProvider {
    share: Vec<Point>,
}

impl OracleProvider {
    pub fn new(total: &[Point], iterations: usize) -> Self {
        let n = iterations.max(1) as f64;
        OracleProvider {
            share: total.iter().map(|&d| d * (1.0 / n)).collect(),
        }
    }
}

impl ParamProvider for OracleProvider {
    fn estimate_delta(&mut self, _rectified: &Image, _state: &ParamState) -> Result<Vec<Point>> {
        Ok(self.share.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub delta_norm: f64,
    pub loss: Option<f64>,
    pub oob_frac: f64,
    #[serde(skip)]
    pub delta: Vec<Point>,
    #[serde(skip)]
    pub diagnostics: Option<serde_json::Value>,
}

/// One entry for the initial state and one per executed iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RectifyTrace {
    pub entries: Vec<TraceEntry>,
}

impl RectifyTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("trace serializes"));
            out.push('\n');
        }
        out
    }

    pub fn losses(&self) -> Vec<Option<f64>> {
        self.entries.iter().map(|e| e.loss).collect()
    }
}

fn check_state(state: &ParamState, config: &RectifyConfig) -> Result<()> {
    if state.segment_count() != config.segments {
        return Err(Error::arg(format!(
            "state has {} segments, config expects {}",
            state.segment_count(),
            config.segments
        )));
    }
    if config.out_w == 0 || config.out_h == 0 {
        return Err(Error::arg("output dimensions must be positive"));
    }
    Ok(())
}

fn render(system: &TpsSystem, original: &Image, state: &ParamState, config: &RectifyConfig) -> Result<(Image, Grid)> {
    let coeffs = system.solve(&state.current())?;
    let grid = map_grid(&coeffs, config.out_w, config.out_h);
    Ok((sample(original, &grid, 0.0), grid))
}

/// Solve, map the output lattice, sample `original` with zero padding.
pub fn rectify_once(original: &Image, state: &ParamState, config: &RectifyConfig) -> Result<Image> {
    check_state(state, config)?;
    let system = TpsSystem::new(state.base(), config.lambda)?;
    Ok(render(&system, original, state, config)?.0)
}

fn entry(iter: usize, state: &ParamState, img: &Image, grid: &Grid, template: Option<&Image>) -> Result<TraceEntry> {
    Ok(TraceEntry {
        iter,
        delta_norm: state.delta_norm(),
        loss: template.map(|t| mse(img, t)).transpose()?,
        oob_frac: grid.out_of_bounds_fraction(),
        delta: state.delta().to_vec(),
        diagnostics: None,
    })
}

/// Runs `config.iterations` rounds of estimate-and-accumulate, always
/// sampling from `original`. When `template` is given the trace records the
/// reconstruction MSE of every iterate.
pub fn rectify_iterative(
    original: &Image,
    provider: &mut dyn ParamProvider,
    config: &RectifyConfig,
    template: Option<&Image>,
) -> Result<(Image, RectifyTrace)> {
    let mut state = init_state(config.segments)?;
    check_state(&state, config)?;
    let system = TpsSystem::new(state.base(), config.lambda)?;
    let mut trace = RectifyTrace::default();

    let (mut img, mut grid) = render(&system, original, &state, config)?;
    trace.entries.push(entry(0, &state, &img, &grid, template)?);
    for i in 0..config.iterations {
        let applied = provider
            .estimate_delta(&img, &state)
            .and_then(|inc| state.accumulate(&inc));
        if let Err(e) = applied {
            return Err(Error::Provider {
                iteration: i,
                trace: Box::new(trace),
                source: Box::new(e),
            });
        }
        (img, grid) = render(&system, original, &state, config)?;
        let mut e = entry(i + 1, &state, &img, &grid, template)?;
        e.diagnostics = provider.diagnostics();
        trace.entries.push(e);
    }
    Ok((img, trace))
}

/// The variant that feeds each rectified image into the next sampling step
/// instead of returning to the original. Iteration `i` warps the previous
/// output by the pose `P0 + increment_i`. Kept for comparison only.
pub fn rectify_chained(
    original: &Image,
    provider: &mut dyn ParamProvider,
    config: &RectifyConfig,
    template: Option<&Image>,
) -> Result<(Image, RectifyTrace)> {
    let mut state = init_state(config.segments)?;
    check_state(&state, config)?;
    let system = TpsSystem::new(state.base(), config.lambda)?;
    let mut trace = RectifyTrace::default();

    let (mut img, mut grid) = render(&system, original, &state, config)?;
    let mut src = original.clone();
    trace.entries.push(entry(0, &state, &img, &grid, template)?);
    for i in 0..config.iterations {
        let step = provider
            .estimate_delta(&img, &state)
            .and_then(|inc| state.accumulate(&inc));
        let applied = match step {
            Ok(a) => a,
            Err(e) => {
                return Err(Error::Provider {
                    iteration: i,
                    trace: Box::new(trace),
                    source: Box::new(e),
                })
            }
        };
        let local = ParamState::from_delta(applied)?;
        (img, grid) = render(&system, &src, &local, config)?;
        src = img.clone();
        let mut e = entry(i + 1, &state, &img, &grid, template)?;
        e.diagnostics = provider.diagnostics();
        trace.entries.push(e);
    }
    Ok((img, trace))
}
