//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitline::{base_points, control_points, ControlPoints, FitLineParams};
use crate::fitter::{gradcheck, FitConfig, FitterProvider, GradCheck, GradMode};
use crate::imagebuf::{load_ppm, mse, psnr_from_mse, save_ppm, to_pixel, Image, Point};
use crate::rectifier::{rectify_iterative, OracleProvider, ParamState, RectifyConfig};
use crate::synth::{gen_case, warp_with_control, warp_with_params, write_bundle, Difficulty, SynthCase};
use crate::tps::solve;

pub mod bench;

/// Pose parameters on disk, either as fitting lines or as control-point
/// offsets from the base layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "space")]
pub enum ParamsFile {
    #[serde(rename = "fitline")]
    FitLine(FitLineParams),
    #[serde(rename = "control")]
    Control {
        #[serde(rename = "L")]
        segments: usize,
        delta: Vec<[f64; 2]>,
    },
}

impl ParamsFile {
    pub fn from_state(state: &ParamState) -> Self {
        ParamsFile::Control {
            segments: state.segment_count(),
            delta: state.delta().iter().map(|d| [d.x, d.y]).collect(),
        }
    }

    /// Accepts both tagged forms and a bare fitting-line object.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let parsed = if value.get("space").is_some() {
            serde_json::from_value(value)?
        } else {
            ParamsFile::FitLine(serde_json::from_value(value)?)
        };
        if let ParamsFile::Control { segments, delta } = &parsed {
            if delta.len() != 2 * segments {
                return Err(Error::arg(format!(
                    "control params with L = {segments} need {} offsets, found {}",
                    2 * segments,
                    delta.len()
                )));
            }
        }
        Ok(parsed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("params serialize")
    }

    pub fn segment_count(&self) -> usize {
        match self {
            ParamsFile::FitLine(p) => p.segment_count(),
            ParamsFile::Control { segments, .. } => *segments,
        }
    }

    /// Offsets from the base layout.
    pub fn to_state(&self) -> Result<ParamState> {
        match self {
            ParamsFile::FitLine(p) => ParamState::from_targets(&control_points(p)),
            ParamsFile::Control { delta, .. } => {
                ParamState::from_delta(delta.iter().map(|&[x, y]| Point::new(x, y)).collect())
            }
        }
    }

    /// Absolute control points.
    pub fn control(&self) -> Result<ControlPoints> {
        match self {
            ParamsFile::FitLine(p) => Ok(control_points(p)),
            ParamsFile::Control { .. } => {
                let state = self.to_state()?;
                base_points(state.segment_count())?.offset(state.delta())
            }
        }
    }
}

/// Exit status for a failed check (as opposed to a failed run).
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "textrect", version, about = "Iterative text-line rectification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bend a template along the fitting lines in a params file.
    Warp {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "200x64", value_parser = parse_size)]
        src_size: (usize, usize),
    },
    /// Rectify an image, reaching the pose in the params file over `--iters` equal steps.
    Rectify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Record reconstruction loss against this image in the trace.
        #[arg(long)]
        template: Option<PathBuf>,
    },
    /// Estimate the pose that rectifies `input` onto `template`.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        out_params: PathBuf,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        /// Descent steps per iteration.
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = GradArg::Analytic)]
        grad: GradArg,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        segments: usize,
    },
    /// Compare analytic and finite-difference gradients on synthetic cases.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        cases: usize,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Run a seeded synthetic suite and write a CSV summary.
    Bench {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw control points, middle line and segments over an image.
    Gridviz {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic case bundle.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "mild")]
        difficulty: Difficulty,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradArg {
    Analytic,
    Fd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Iterations,
    Segments,
    Boundary,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 {
        return Err("dimensions must be positive".into());
    }
    Ok((w, h))
}

/// A failure together with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn check(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CHECK,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical { .. } | Error::NonFinite { .. } => EXIT_NUMERICAL,
        Error::Provider { source, .. } => exit_code(source),
        Error::Parse { .. } | Error::Argument(_) | Error::Io(_) | Error::Json(_) => EXIT_USAGE,
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn usage(message: String) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message,
    }
}

fn read_image(path: &Path) -> std::result::Result<Image, Failure> {
    let bytes = std::fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    load_ppm(&bytes).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn read_params(path: &Path) -> std::result::Result<ParamsFile, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    ParamsFile::from_json(&text).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    std::fs::write(path, bytes).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status. Reports go to `out`, errors to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> CmdResult {
    match command {
        Command::Warp {
            template,
            params,
            out: path,
            src_size: (w, h),
        } => {
            let tpl = read_image(&template)?;
            let params = read_params(&params)?;
            let warped = match &params {
                ParamsFile::FitLine(p) => warp_with_params(&tpl, p, w, h)?,
                ParamsFile::Control { .. } => warp_with_control(&tpl, &params.control()?, w, h)?,
            };
            write_file(&path, &save_ppm(&warped))
        }
        Command::Rectify {
            input,
            params,
            out: path,
            iters,
            trace,
            template,
        } => {
            let img = read_image(&input)?;
            let params = read_params(&params)?;
            let template = template.map(|t| read_image(&t)).transpose()?;
            let config = RectifyConfig {
                iterations: iters,
                segments: params.segment_count(),
                ..RectifyConfig::default()
            };
            let total = params.to_state()?;
            let mut provider = OracleProvider::new(total.delta(), iters);
            let (rectified, record) = rectify_iterative(&img, &mut provider, &config, template.as_ref())?;
            write_file(&path, &save_ppm(&rectified))?;
            if let Some(t) = trace {
                write_file(&t, record.to_json_lines().as_bytes())?;
            }
            Ok(())
        }
        Command::Fit {
            input,
            template,
            out_params,
            iters,
            steps,
            grad,
            trace,
            segments,
        } => {
            let img = read_image(&input)?;
            let tpl = read_image(&template)?;
            let config = RectifyConfig {
                iterations: iters,
                segments,
                ..RectifyConfig::default()
            };
            let fit_config = FitConfig {
                max_steps: steps,
                grad: match grad {
                    GradArg::Analytic => GradMode::Analytic,
                    GradArg::Fd => GradMode::FiniteDifference,
                },
                ..FitConfig::default()
            };
            let mut provider = FitterProvider::new(img.clone(), tpl.clone(), config.clone(), fit_config)?;
            let (rectified, record) = rectify_iterative(&img, &mut provider, &config, Some(&tpl))?;
            let last = record.entries.last().expect("trace has an initial entry");
            let state = ParamState::from_delta(last.delta.clone())?;
            write_file(&out_params, ParamsFile::from_state(&state).to_json().as_bytes())?;
            if let Some(t) = trace {
                let lines: String = provider
                    .history()
                    .iter()
                    .map(|s| serde_json::to_string(s).expect("fit step serializes") + "\n")
                    .collect();
                write_file(&t, lines.as_bytes())?;
            }
            let loss = mse(&rectified, &tpl)?;
            let _ = writeln!(out, "loss {loss:.6e}");
            let _ = writeln!(out, "psnr {:.3}", psnr_from_mse(loss));
            Ok(())
        }
        Command::Gradcheck {
            seed,
            cases,
            inject_fault,
        } => gradcheck_cmd(seed, cases, inject_fault, out),
        Command::Bench {
            suite,
            out: path,
            cases,
            seed,
        } => {
            let threads = std::env::var("ESIR_THREADS")
                .ok()
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| usage(format!("ESIR_THREADS must be a count, got {v:?}")))
                })
                .transpose()?
                .unwrap_or(0);
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| usage(format!("cannot start worker pool: {e}")))?;
            let rows = pool.install(|| bench::run_suite(suite, seed, cases))?;
            write_file(&path, bench::to_csv(&rows).as_bytes())
        }
        Command::Gridviz {
            input,
            params,
            out: path,
        } => {
            let img = read_image(&input)?;
            let params = read_params(&params)?;
            let overlay = gridviz(&img, &params)?;
            write_file(&path, &save_ppm(&overlay))
        }
        Command::Synth {
            seed,
            difficulty,
            out_dir,
        } => {
            let case = gen_case(seed, difficulty)?;
            write_bundle(&case, &out_dir).map_err(|e| usage(format!("cannot write {}: {e}", out_dir.display())))
        }
    }
}

/// Relative component error a gradient check must stay under.
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_MIN_COSINE: f64 = 0.999;

/// The synthetic case and evaluation state used by gradient check `seed`:
/// difficulties cycle with the seed and the state sits halfway to the
/// ground truth.
pub fn gradcheck_case(seed: u64) -> Result<(SynthCase, ParamState)> {
    let case = gen_case(seed, Difficulty::ALL[(seed % 4) as usize])?;
    let half = case.true_offsets.iter().map(|&d| d * 0.5).collect();
    let state = ParamState::from_delta(half)?;
    Ok((case, state))
}

fn gradcheck_cmd(seed: u64, cases: usize, inject_fault: bool, out: &mut dyn Write) -> CmdResult {
    if cases == 0 {
        let _ = writeln!(out, "no cases");
        return Ok(());
    }
    let config = RectifyConfig::default();
    let mut worst: Option<(u64, GradCheck)> = None;
    let mut failed = None;
    for s in seed..seed + cases as u64 {
        let (case, state) = gradcheck_case(s)?;
        let check = gradcheck(
            &case.distorted,
            &state,
            &case.template,
            &config,
            FitConfig::default().fd_step,
            inject_fault,
        )?;
        let _ = writeln!(
            out,
            "seed {s}: max_rel_error {:.3e} cosine {:.9} raw_max_rel_error {:.3e}",
            check.max_rel_error, check.cosine, check.raw_max_rel_error
        );
        if failed.is_none() && !check.passes(GRADCHECK_TOL, GRADCHECK_MIN_COSINE) {
            failed = Some(s);
        }
        if worst
            .as_ref()
            .is_none_or(|(_, w)| check.max_rel_error > w.max_rel_error)
        {
            worst = Some((s, check));
        }
    }
    if let Some((s, w)) = &worst {
        let _ = writeln!(
            out,
            "worst seed {s}: max_rel_error {:.3e} cosine {:.9}",
            w.max_rel_error, w.cosine
        );
    }
    match failed {
        Some(s) => Err(Failure::check(format!("gradient check failed for seed {s}"))),
        None => Ok(()),
    }
}

const MARK_POINT: f64 = 0.0;
const MARK_SEGMENT: f64 = 0.35;
const MARK_MIDDLE: f64 = 0.7;

/// Burns the pose into a copy of `img`: segments between their endpoints,
/// the middle line, then 3x3 squares at the control points.
pub fn gridviz(img: &Image, params: &ParamsFile) -> Result<Image> {
    let control = params.control()?;
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut data = img.data().to_vec();
    let mut plot = |p: Point, v: f64| {
        let (px, py) = to_pixel(p, w, h);
        let (col, row) = (px.round(), py.round());
        if col >= 0.0 && row >= 0.0 && (col as usize) < w && (row as usize) < h {
            let i = (row as usize * w + col as usize) * c;
            data[i..i + c].iter_mut().for_each(|d| *d = v);
        }
    };
    let step = 0.5 / w.max(h) as f64;
    let line = |a: Point, b: Point, v: f64, plot: &mut dyn FnMut(Point, f64)| {
        let n = ((a.dist_sq(b).sqrt() / step).ceil() as usize).max(1);
        for k in 0..=n {
            plot(a + (b - a) * (k as f64 / n as f64), v);
        }
    };
    for (t, b) in control.top().iter().zip(control.bottom()) {
        line(*t, *b, MARK_SEGMENT, &mut plot);
    }
    let middle: Vec<Point> = match params {
        ParamsFile::FitLine(p) => (0..=200)
            .map(|i| {
                let x = -0.5 + i as f64 / 200.0;
                Point::new(x, p.middle_line(x))
            })
            .collect(),
        ParamsFile::Control { .. } => {
            let base = base_points(control.segment_count())?;
            let coeffs = solve(&base, &control, 0.0)?;
            (0..=200)
                .map(|i| coeffs.map_point(Point::new(-0.5 + i as f64 / 200.0, 0.0)))
                .collect()
        }
    };
    for pair in middle.windows(2) {
        line(pair[0], pair[1], MARK_MIDDLE, &mut plot);
    }
    let (dx, dy) = (1.0 / w as f64, 1.0 / h as f64);
    for &p in control.points() {
        for i in -1..=1 {
            for j in -1..=1 {
                plot(p + Point::new(i as f64 * dx, j as f64 * dy), MARK_POINT);
            }
        }
    }
    Image::new(w, h, c, data)
}
