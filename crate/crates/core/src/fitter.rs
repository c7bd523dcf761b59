//! Template-driven pose estimation by gradient descent.
//!
//! The objective is the mean squared difference between the rectification
//! of the original image and a fronto-parallel template, as a function of the
//! control-point offsets. Its gradient follows the chain
//! `loss -> output pixels -> grid -> control points`; the last link is the
//! linear [`GridBasis`] of the spline.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::imagebuf::{mse, Image, Point};
use crate::rectifier::{init_state, rectify_once, ParamProvider, ParamState, RectifyConfig, MAX_INCREMENT};
use crate::sampler::{sample, sample_with_jacobian};
use crate::tps::{GridBasis, TpsSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub max_steps: usize,
    /// Initial and largest step, in normalized units along the
    /// steepest component.
    pub step_size: f64,
    pub backtrack: f64,
    pub max_halvings: usize,
    pub grad: GradMode,
    pub fd_step: f64,
    /// Stop once the relative loss decrease of an accepted step falls below this.
    pub tolerance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_steps: 50,
            step_size: 0.05,
            backtrack: 0.5,
            max_halvings: 8,
            grad: GradMode::Analytic,
            fd_step: 1e-5,
            tolerance: 1e-6,
        }
    }
}

const ARMIJO: f64 = 1e-4;

fn check_template(template: &Image, config: &RectifyConfig) -> Result<()> {
    if template.width() != config.out_w || template.height() != config.out_h {
        return Err(Error::arg(format!(
            "template is {}x{}, output is {}x{}",
            template.width(),
            template.height(),
            config.out_w,
            config.out_h
        )));
    }
    Ok(())
}

/// Reconstruction MSE of `rectify_once(original, state)` against `template`.
pub fn loss(original: &Image, state: &ParamState, template: &Image, config: &RectifyConfig) -> Result<f64> {
    check_template(template, config)?;
    mse(&rectify_once(original, state, config)?, template)
}

/// Gradient of [`loss`] with respect to the offsets, interleaved as
/// `[dx_0, dy_0, dx_1, dy_1, ...]`.
pub fn grad_loss(
    original: &Image,
    state: &ParamState,
    template: &Image,
    config: &RectifyConfig,
    mode: GradMode,
) -> Result<Vec<f64>> {
    match mode {
        GradMode::Analytic => {
            let obj = Objective::new(original.clone(), template.clone(), config.clone())?;
            let (_, g) = obj.loss_and_grad(state.delta())?;
            Ok(interleave(&g))
        }
        GradMode::FiniteDifference => fd_grad(original, state, template, config, FitConfig::default().fd_step),
    }
}

/// Central differences of [`loss`] with step `h`.
pub fn fd_grad(
    original: &Image,
    state: &ParamState,
    template: &Image,
    config: &RectifyConfig,
    h: f64,
) -> Result<Vec<f64>> {
    let mut flat = interleave(state.delta());
    let mut out = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let v = flat[i];
        flat[i] = v + h;
        let up = loss(
            original,
            &ParamState::from_delta(deinterleave(&flat))?,
            template,
            config,
        )?;
        flat[i] = v - h;
        let down = loss(
            original,
            &ParamState::from_delta(deinterleave(&flat))?,
            template,
            config,
        )?;
        flat[i] = v;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

pub fn interleave(points: &[Point]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y]).collect()
}

pub fn deinterleave(flat: &[f64]) -> Vec<Point> {
    flat.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect()
}

/// The loss for one image pair with the spline basis precomputed, so each
/// evaluation is a weighted sum and a sampling pass.
#[derive(Debug, Clone)]
pub struct Objective {
    original: Image,
    template: Image,
    config: RectifyConfig,
    base: Vec<Point>,
    basis: GridBasis,
    metric: Cholesky<f64, Dyn>,
}

/// Ridge added to the grid metric, relative to its mean diagonal.
const METRIC_RIDGE: f64 = 1e-9;

impl Objective {
    pub fn new(original: Image, template: Image, config: RectifyConfig) -> Result<Self> {
        check_template(&template, &config)?;
        if original.channels() != template.channels() {
            return Err(Error::arg("original and template channel counts differ"));
        }
        let state = init_state(config.segments)?;
        let system = TpsSystem::new(state.base(), config.lambda)?;
        let basis = system.grid_basis(config.out_w, config.out_h);
        let mut gram = basis.gram();
        let ridge = METRIC_RIDGE * gram.trace() / gram.nrows() as f64;
        for i in 0..gram.nrows() {
            gram[(i, i)] += ridge;
        }
        let metric = Cholesky::new(gram).ok_or_else(|| Error::Numerical {
            message: "grid metric is not positive definite".into(),
            condition: f64::INFINITY,
        })?;
        Ok(Objective {
            original,
            template,
            base: state.base().points().to_vec(),
            config,
            basis,
            metric,
        })
    }

    pub fn config(&self) -> &RectifyConfig {
        &self.config
    }

    pub fn original(&self) -> &Image {
        &self.original
    }

    pub fn template(&self) -> &Image {
        &self.template
    }

    fn targets(&self, delta: &[Point]) -> Result<Vec<Point>> {
        if delta.len() != self.base.len() {
            return Err(Error::arg(format!(
                "{} offsets for {} control points",
                delta.len(),
                self.base.len()
            )));
        }
        Ok(self.base.iter().zip(delta).map(|(&b, &d)| b + d).collect())
    }

    pub fn loss(&self, delta: &[Point]) -> Result<f64> {
        let grid = self.basis.map(&self.targets(delta)?);
        mse(&sample(&self.original, &grid, 0.0), &self.template)
    }

    pub fn loss_and_grad(&self, delta: &[Point]) -> Result<(f64, Vec<Point>)> {
        let grid = self.basis.map(&self.targets(delta)?);
        let jac = sample_with_jacobian(&self.original, &grid, 0.0);
        let c = self.original.channels();
        let n = jac.image.data().len() as f64;
        let mut sum = 0.0;
        let mut d_grid = vec![Point::ZERO; grid.coords().len()];
        for (i, (&out, &tpl)) in jac.image.data().iter().zip(self.template.data()).enumerate() {
            let r = out - tpl;
            sum += r * r;
            let w = 2.0 * r / n;
            let g = &mut d_grid[i / c];
            g.x += w * jac.d_dx[i];
            g.y += w * jac.d_dy[i];
        }
        Ok((sum / n, self.basis.pullback(&d_grid)))
    }

    /// `G^-1 g` with `G` the basis Gram matrix: the gradient measured by
    /// grid displacement rather than by raw offsets. Neighboring control
    /// points move overlapping pixels, so the raw gradient is badly scaled
    /// when the points are dense.
    pub fn precondition(&self, grad: &[Point]) -> Vec<Point> {
        let gx = DVector::from_iterator(grad.len(), grad.iter().map(|p| p.x));
        let gy = DVector::from_iterator(grad.len(), grad.iter().map(|p| p.y));
        let rhs = DMatrix::from_columns(&[gx, gy]);
        let sol = self.metric.solve(&rhs);
        (0..grad.len()).map(|j| Point::new(sol[(j, 0)], sol[(j, 1)])).collect()
    }

    fn gradient(&self, delta: &[Point], mode: GradMode, h: f64) -> Result<(f64, Vec<Point>)> {
        match mode {
            GradMode::Analytic => self.loss_and_grad(delta),
            GradMode::FiniteDifference => {
                let state = ParamState::from_delta(delta.to_vec())?;
                let g = fd_grad(&self.original, &state, &self.template, &self.config, h)?;
                Ok((self.loss(delta)?, deinterleave(&g)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitStep {
    pub step: usize,
    pub loss: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub state: ParamState,
    pub loss: f64,
    /// Starting loss (step 0) followed by one record per accepted step.
    pub trace: Vec<FitStep>,
}

impl FitResult {
    pub fn steps(&self) -> usize {
        self.trace.len() - 1
    }

    pub fn trace_json_lines(&self) -> String {
        self.trace
            .iter()
            .map(|s| serde_json::to_string(s).expect("fit step serializes") + "\n")
            .collect()
    }
}

/// Descent from zero offsets.
pub fn fit(original: &Image, template: &Image, config: &RectifyConfig, fit_config: &FitConfig) -> Result<FitResult> {
    let obj = Objective::new(original.clone(), template.clone(), config.clone())?;
    fit_from(&obj, &init_state(config.segments)?, fit_config, None)
}

/// Descent from `start`. With `bound = Some(b)` every offset component stays
/// within `b` of its starting value.
///
/// Directions come from preconditioned nonlinear conjugate gradients
/// (Polak-Ribiere, clipped at zero), restarting from the preconditioned
/// steepest direction whenever the conjugate one fails to descend. Each
/// trial move is scaled so its largest component equals the trial step,
/// which is halved until the Armijo condition holds. After an accepted step
/// the next trial step doubles, capped at `fit_config.step_size`.
pub fn fit_from(obj: &Objective, start: &ParamState, fit_config: &FitConfig, bound: Option<f64>) -> Result<FitResult> {
    let origin = start.delta().to_vec();
    let project = |d: &mut [Point]| {
        if let Some(b) = bound {
            for (p, o) in d.iter_mut().zip(&origin) {
                p.x = p.x.clamp(o.x - b, o.x + b);
                p.y = p.y.clamp(o.y - b, o.y + b);
            }
        }
    };
    let mut delta = origin.clone();
    let (mut f, mut g) = obj.gradient(&delta, fit_config.grad, fit_config.fd_step)?;
    if !f.is_finite() {
        return Err(Error::NonFinite { step: 0 });
    }
    let mut trace = vec![FitStep {
        step: 0,
        loss: f,
        step_size: 0.0,
    }];
    let mut alpha = fit_config.step_size;
    let mut prev: Option<(Vec<Point>, Vec<Point>, Vec<Point>)> = None;

    // Backtracking along `dir`; returns the accepted point, its loss and the step.
    let search = |delta: &[Point],
                  f: f64,
                  g: &[Point],
                  dir: &[Point],
                  alpha: f64,
                  step: usize|
     -> Result<Option<(Vec<Point>, f64, f64)>> {
        let dmax = dir.iter().map(|p| p.x.abs().max(p.y.abs())).fold(0.0, f64::max);
        if dmax == 0.0 || !dmax.is_finite() {
            return Ok(None);
        }
        let mut trial = alpha;
        for _ in 0..=fit_config.max_halvings {
            let mut cand: Vec<Point> = delta.iter().zip(dir).map(|(&d, &di)| d + di * (trial / dmax)).collect();
            project(&mut cand);
            // directional derivative along the actual (projected) move
            let slope: f64 = cand
                .iter()
                .zip(delta)
                .zip(g)
                .map(|((c, d), gi)| (c.x - d.x) * gi.x + (c.y - d.y) * gi.y)
                .sum();
            let fc = obj.loss(&cand)?;
            if !fc.is_finite() {
                return Err(Error::NonFinite { step });
            }
            if slope < 0.0 && fc <= f + ARMIJO * slope {
                return Ok(Some((cand, fc, trial)));
            }
            trial *= fit_config.backtrack;
        }
        Ok(None)
    };

    for step in 1..=fit_config.max_steps {
        if g.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { step: step - 1 });
        }
        let pg = obj.precondition(&g);
        let steepest: Vec<Point> = pg.iter().map(|&p| p * -1.0).collect();
        let conjugate = prev.as_ref().and_then(|(g0, pg0, d0)| {
            let num: f64 = pg
                .iter()
                .zip(&g)
                .zip(g0)
                .map(|((p, a), b)| p.x * (a.x - b.x) + p.y * (a.y - b.y))
                .sum();
            let den: f64 = pg0.iter().zip(g0).map(|(p, a)| p.x * a.x + p.y * a.y).sum();
            let beta = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
            if beta == 0.0 {
                return None;
            }
            let dir: Vec<Point> = steepest.iter().zip(d0).map(|(&s, &d)| s + d * beta).collect();
            let slope: f64 = dir.iter().zip(&g).map(|(d, gi)| d.x * gi.x + d.y * gi.y).sum();
            (slope < 0.0).then_some(dir)
        });
        let mut found = None;
        if let Some(dir) = conjugate {
            found = search(&delta, f, &g, &dir, alpha, step)?.map(|r| (r, dir));
        }
        if found.is_none() {
            found = search(&delta, f, &g, &steepest, alpha, step)?.map(|r| (r, steepest.clone()));
        }
        let Some(((cand, fc, trial), dir)) = found else { break };
        let rel = (f - fc) / f.max(f64::MIN_POSITIVE);
        delta = cand;
        f = fc;
        trace.push(FitStep {
            step,
            loss: f,
            step_size: trial,
        });
        alpha = (2.0 * trial).min(fit_config.step_size);
        if rel < fit_config.tolerance {
            break;
        }
        let (_, gn) = obj.gradient(&delta, fit_config.grad, fit_config.fd_step)?;
        prev = Some((std::mem::replace(&mut g, gn), pg, dir));
    }
    Ok(FitResult {
        state: ParamState::from_delta(delta)?,
        loss: f,
        trace,
    })
}

/// Runs one descent per rectification iteration and hands back the change
/// in offsets. The original image is bound at construction because the
/// objective compares its rectification, not the rectified input, against
/// the template.
#[derive(Debug, Clone)]
pub struct FitterProvider {
    objective: Objective,
    fit_config: FitConfig,
    last: Option<FitResult>,
    history: Vec<FitStep>,
}

impl FitterProvider {
    pub fn new(original: Image, template: Image, config: RectifyConfig, fit_config: FitConfig) -> Result<Self> {
        Ok(FitterProvider {
            objective: Objective::new(original, template, config)?,
            fit_config,
            last: None,
            history: Vec::new(),
        })
    }

    pub fn last_fit(&self) -> Option<&FitResult> {
        self.last.as_ref()
    }

    /// Accepted descent steps over every call so far.
    pub fn total_steps(&self) -> usize {
        self.history.len().saturating_sub(1)
    }

    /// The starting loss and every accepted step over all calls, numbered
    /// consecutively.
    pub fn history(&self) -> &[FitStep] {
        &self.history
    }
}

impl ParamProvider for FitterProvider {
    fn estimate_delta(&mut self, rectified: &Image, state: &ParamState) -> Result<Vec<Point>> {
        let cfg = self.objective.config();
        if rectified.width() != cfg.out_w || rectified.height() != cfg.out_h {
            return Err(Error::arg("rectified image does not match the output size"));
        }
        let result = fit_from(&self.objective, state, &self.fit_config, Some(MAX_INCREMENT))?;
        let inc = result
            .state
            .delta()
            .iter()
            .zip(state.delta())
            .map(|(&a, &b)| a - b)
            .collect();
        let offset = self.total_steps();
        let skip = if self.history.is_empty() { 0 } else { 1 };
        self.history.extend(result.trace.iter().skip(skip).map(|s| FitStep {
            step: s.step + offset,
            ..*s
        }));
        self.last = Some(result);
        Ok(inc)
    }

    fn diagnostics(&self) -> Option<serde_json::Value> {
        self.last.as_ref().map(|r| {
            serde_json::json!({
                "fit_loss": r.loss,
                "fit_steps": r.steps(),
            })
        })
    }
}

/// Outcome of comparing analytic and central-difference gradients at one state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    /// Cosine similarity of the full analytic and difference gradients.
    pub cosine: f64,
    /// Largest component error relative to the component magnitude, with
    /// taps that change sampler cell under the perturbation left out of
    /// both gradients.
    pub max_rel_error: f64,
    /// The same measure without leaving any taps out.
    pub raw_max_rel_error: f64,
    /// Tap exclusions summed over components.
    pub excluded_taps: usize,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64, min_cosine: f64) -> bool {
        self.max_rel_error < rel_tol && self.cosine > min_cosine
    }
}

/// Floor on the denominator of the relative error, as a fraction of the
/// largest gradient component, so components that are numerically zero do
/// not dominate.
const REL_FLOOR: f64 = 1e-6;

fn rel_errors(a: &[f64], f: &[f64]) -> f64 {
    let scale = f.iter().chain(a).fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(f)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR * scale).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

fn cell_of(p: Point, w: usize, h: usize) -> (i64, i64) {
    let (px, py) = crate::imagebuf::to_pixel(p, w, h);
    (px.floor() as i64, py.floor() as i64)
}

/// Top-left source cell a pixel reads from.
type Tap = (i64, i64);

/// Compares the analytic gradient against central differences of the
/// reference path (`solve`, `map_grid`, `sample`) with step `h`.
///
/// For each component, output taps whose source cell differs between the
/// `+h` and `-h` evaluations sit on a kink of the bilinear kernel; their
/// contribution is dropped from both sides of the masked comparison.
/// `corrupt` perturbs one analytic component, for exercising failure paths.
pub fn gradcheck(
    original: &Image,
    state: &ParamState,
    template: &Image,
    config: &RectifyConfig,
    h: f64,
    corrupt: bool,
) -> Result<GradCheck> {
    let obj = Objective::new(original.clone(), template.clone(), config.clone())?;
    let grid = obj.basis.map(&obj.targets(state.delta())?);
    let jac = sample_with_jacobian(original, &grid, 0.0);
    let c = original.channels();
    let n = jac.image.data().len() as f64;
    let mut d_grid = vec![Point::ZERO; grid.coords().len()];
    for (i, (&out, &tpl)) in jac.image.data().iter().zip(template.data()).enumerate() {
        let w = 2.0 * (out - tpl) / n;
        d_grid[i / c].x += w * jac.d_dx[i];
        d_grid[i / c].y += w * jac.d_dy[i];
    }
    let mut analytic = interleave(&obj.basis.pullback(&d_grid));
    let bump = if corrupt {
        0.01 * analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1e-3
    } else {
        0.0
    };
    analytic[0] += bump;

    let system = TpsSystem::new(state.base(), config.lambda)?;
    let (sw, sh) = (original.width(), original.height());
    let per_pixel = |flat: &[f64]| -> Result<(Vec<f64>, Vec<Tap>)> {
        let st = ParamState::from_delta(deinterleave(flat))?;
        let coeffs = system.solve(&st.current())?;
        let g = crate::tps::map_grid(&coeffs, config.out_w, config.out_h);
        let img = sample(original, &g, 0.0);
        let losses = img
            .data()
            .chunks_exact(c)
            .zip(template.data().chunks_exact(c))
            .map(|(o, t)| o.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
            .collect();
        let cells = g.coords().iter().map(|&p| cell_of(p, sw, sh)).collect();
        Ok((losses, cells))
    };

    let mut flat = interleave(state.delta());
    let (mut fd_raw, mut fd_masked, mut an_masked) = (vec![], vec![], vec![]);
    let mut excluded = 0;
    for i in 0..flat.len() {
        let v = flat[i];
        flat[i] = v + h;
        let (up, up_cells) = per_pixel(&flat)?;
        flat[i] = v - h;
        let (down, down_cells) = per_pixel(&flat)?;
        flat[i] = v;
        let (j, axis) = (i / 2, i % 2);
        let (mut raw, mut masked, mut an) = (0.0, 0.0, 0.0);
        for p in 0..up.len() {
            let diff = (up[p] - down[p]) / (2.0 * h);
            raw += diff;
            if up_cells[p] != down_cells[p] {
                excluded += 1;
                continue;
            }
            masked += diff;
            let dg = if axis == 0 { d_grid[p].x } else { d_grid[p].y };
            an += dg * obj.basis.weights(p)[j];
        }
        if i == 0 {
            an += bump;
        }
        fd_raw.push(raw);
        fd_masked.push(masked);
        an_masked.push(an);
    }
    let dot: f64 = analytic.iter().zip(&fd_raw).map(|(a, b)| a * b).sum();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nf = fd_raw.iter().map(|a| a * a).sum::<f64>().sqrt();
    let cosine = if na == 0.0 && nf == 0.0 { 1.0 } else { dot / (na * nf) };
    Ok(GradCheck {
        cosine,
        max_rel_error: rel_errors(&an_masked, &fd_masked),
        raw_max_rel_error: rel_errors(&analytic, &fd_raw),
        excluded_taps: excluded,
    })
}
