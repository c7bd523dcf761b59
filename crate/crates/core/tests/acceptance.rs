//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textrect::cli::{gradcheck_case, ParamsFile, GRADCHECK_MIN_COSINE, GRADCHECK_TOL};
use textrect::fitline::{base_points, ControlPoints, FitLineParams, Segment};
use textrect::fitter::{fit, gradcheck, FitConfig, FitterProvider};
use textrect::imagebuf::{load_ppm, mse, psnr, psnr_from_mse, resize_bilinear, save_ppm, Image, Point};
use textrect::rectifier::{
    init_state, rectify_chained, rectify_iterative, rectify_once, OracleProvider, RectifyConfig, ZeroProvider,
};
use textrect::synth::{suite, Difficulty, SynthCase};
use textrect::tps::{solve, TpsSystem};

type Outcome = Result<String, String>;
type Check<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Suites {
    mild: Vec<SynthCase>,
    curved: Vec<SynthCase>,
    perspective: Vec<SynthCase>,
    severe: Vec<SynthCase>,
}

impl Suites {
    fn get(&self, d: Difficulty) -> &[SynthCase] {
        match d {
            Difficulty::Mild => &self.mild,
            Difficulty::Curved => &self.curved,
            Difficulty::Perspective => &self.perspective,
            Difficulty::Severe => &self.severe,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn random_offsets(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Point> {
    (0..n)
        .map(|_| Point::new(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)))
        .collect()
}

fn tps_exactness() -> Outcome {
    let start = Instant::now();
    let base = base_points(20).map_err(|e| e.to_string())?;
    let system = TpsSystem::new(&base, 0.0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_residual = 0.0f64;
    let mut worst_kernel = 0.0f64;
    for _ in 0..100 {
        let targets = base
            .offset(&random_offsets(&mut rng, 40, 0.1))
            .map_err(|e| e.to_string())?;
        let coeffs = system.solve(&targets).map_err(|e| e.to_string())?;
        worst_residual = worst_residual.max(coeffs.max_residual(&targets));

        let a = [
            rng.gen_range(0.7..1.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(0.7..1.3),
        ];
        let t = Point::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
        let affine: Vec<Point> = base
            .points()
            .iter()
            .map(|p| Point::new(a[0] * p.x + a[1] * p.y, a[2] * p.x + a[3] * p.y) + t)
            .collect();
        let coeffs = system
            .solve(&ControlPoints::new(affine).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let k = coeffs
            .kernel_weights
            .iter()
            .map(|w| w.x.abs().max(w.y.abs()))
            .fold(0.0, f64::max);
        worst_kernel = worst_kernel.max(k);
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "max residual {worst_residual:.2e}, max affine kernel weight {worst_kernel:.2e}, {:.1} ms",
        elapsed.as_secs_f64() * 1e3
    );
    if worst_residual < 1e-9 && worst_kernel < 1e-9 && elapsed < Duration::from_secs(1) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn identity_pipeline(s: &Suites) -> Outcome {
    let mut worst = 0.0f64;
    for case in s.curved.iter().take(10) {
        let resized = resize_bilinear(&case.distorted, 100, 32).map_err(|e| e.to_string())?;
        for n in [0, 1, 5] {
            let config = RectifyConfig::default().with_iterations(n);
            let (out, _) =
                rectify_iterative(&case.distorted, &mut ZeroProvider, &config, None).map_err(|e| e.to_string())?;
            let dev = out
                .data()
                .iter()
                .zip(resized.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(dev);
        }
    }
    let detail = format!("max deviation from resize {worst:.2e} over N in {{0,1,5}}");
    if worst < 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn differentiability() -> Outcome {
    let config = RectifyConfig::default();
    let h = FitConfig::default().fd_step;
    let (mut worst_err, mut worst_cos, mut failures) = (0.0f64, 1.0f64, 0);
    for seed in 0..50 {
        let (case, state) = gradcheck_case(seed).map_err(|e| e.to_string())?;
        let check = gradcheck(&case.distorted, &state, &case.template, &config, h, false).map_err(|e| e.to_string())?;
        worst_err = worst_err.max(check.max_rel_error);
        worst_cos = worst_cos.min(check.cosine);
        if !check.passes(GRADCHECK_TOL, GRADCHECK_MIN_COSINE) {
            failures += 1;
        }
    }
    let detail = format!("50 cases, max relative error {worst_err:.2e}, min cosine {worst_cos:.9}");
    if failures == 0 && worst_err < 1e-4 && worst_cos > 0.999 {
        Ok(detail)
    } else {
        Err(format!("{detail}, {failures} failing"))
    }
}

fn oracle_round_trip(s: &Suites) -> Outcome {
    let config = RectifyConfig::default();
    let mut notes = Vec::new();
    let mut ok = true;
    for d in Difficulty::ALL {
        let (mut truth, mut zero, mut below) = (Vec::new(), Vec::new(), 0);
        for case in s.get(d) {
            let mut provider = OracleProvider::new(&case.true_offsets, config.iterations);
            let (out, _) =
                rectify_iterative(&case.distorted, &mut provider, &config, None).map_err(|e| e.to_string())?;
            let p = psnr(&out, &case.template).map_err(|e| e.to_string())?;
            if p < 25.0 {
                below += 1;
            }
            truth.push(p);
            let base = rectify_once(&case.distorted, &init_state(20).map_err(|e| e.to_string())?, &config)
                .map_err(|e| e.to_string())?;
            zero.push(psnr(&base, &case.template).map_err(|e| e.to_string())?);
        }
        ok &= below == 0 && truth.len() == 100;
        if matches!(d, Difficulty::Curved | Difficulty::Severe) {
            ok &= mean(&zero) < mean(&truth);
        }
        notes.push(format!(
            "{d} {:.2}/{:.2} dB ({below} below 25)",
            mean(&zero),
            mean(&truth)
        ));
    }
    let detail = format!("mean N=0/truth PSNR: {}", notes.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn iteration_trend(s: &Suites) -> Outcome {
    let config = RectifyConfig::default();
    let cases: Vec<&SynthCase> = s.mild.iter().take(50).chain(s.curved.iter().take(50)).collect();
    let mut per_n = vec![Vec::new(); 6];
    let mut strict = 0;
    for case in &cases {
        let mut provider = FitterProvider::new(
            case.distorted.clone(),
            case.template.clone(),
            config.clone(),
            FitConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        let (_, trace) = rectify_iterative(&case.distorted, &mut provider, &config, Some(&case.template))
            .map_err(|e| e.to_string())?;
        let losses: Vec<f64> = trace.losses().into_iter().map(|l| l.expect("template given")).collect();
        for (n, &l) in losses.iter().enumerate() {
            per_n[n].push(psnr_from_mse(l));
        }
        if losses[1] < losses[0] {
            strict += 1;
        }
    }
    // an N-iteration run is the prefix of the 5-iteration run
    for case in cases.iter().step_by(25) {
        let short = config.clone().with_iterations(2);
        let mut p = FitterProvider::new(
            case.distorted.clone(),
            case.template.clone(),
            short.clone(),
            FitConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        let (out, _) = rectify_iterative(&case.distorted, &mut p, &short, None).map_err(|e| e.to_string())?;
        let mut q = FitterProvider::new(
            case.distorted.clone(),
            case.template.clone(),
            config.clone(),
            FitConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        let (_, trace) =
            rectify_iterative(&case.distorted, &mut q, &config, Some(&case.template)).map_err(|e| e.to_string())?;
        let l2 = mse(&out, &case.template).map_err(|e| e.to_string())?;
        if l2 != trace.entries[2].loss.expect("template given") {
            return Err("N=2 run differs from the N=5 trace prefix".into());
        }
    }
    let means: Vec<f64> = per_n.iter().map(|v| mean(v)).collect();
    let monotone = means.windows(2).all(|w| w[1] >= w[0]);
    let frac = strict as f64 / cases.len() as f64;
    let detail = format!(
        "mean PSNR N=0..5 [{}], strict N0->1 on {strict}/{}",
        means.iter().map(|m| format!("{m:.2}")).collect::<Vec<_>>().join(", "),
        cases.len()
    );
    if monotone && frac >= 0.9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn segment_trend(s: &Suites) -> Outcome {
    let mut means = Vec::new();
    for l in [5, 10, 20] {
        let config = RectifyConfig::default().with_segments(l);
        let mut psnrs = Vec::new();
        for case in s.curved.iter().take(50) {
            let mut provider = FitterProvider::new(
                case.distorted.clone(),
                case.template.clone(),
                config.clone(),
                FitConfig::default(),
            )
            .map_err(|e| e.to_string())?;
            let (out, _) =
                rectify_iterative(&case.distorted, &mut provider, &config, None).map_err(|e| e.to_string())?;
            psnrs.push(psnr(&out, &case.template).map_err(|e| e.to_string())?);
        }
        means.push(mean(&psnrs));
    }
    let detail = format!(
        "mean PSNR L=5 {:.2}, L=10 {:.2}, L=20 {:.2}",
        means[0], means[1], means[2]
    );
    if means[2] >= means[1] && means[1] >= means[0] - 0.2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn boundary_effect(s: &Suites) -> Outcome {
    let config = RectifyConfig::default();
    let mut wins = 0;
    let (mut compose, mut chained) = (Vec::new(), Vec::new());
    for case in &s.severe {
        let mut p = OracleProvider::new(&case.true_offsets, 5);
        let (a, _) = rectify_iterative(&case.distorted, &mut p, &config, None).map_err(|e| e.to_string())?;
        let mut q = OracleProvider::new(&case.true_offsets, 5);
        let (b, _) = rectify_chained(&case.distorted, &mut q, &config, None).map_err(|e| e.to_string())?;
        let ma = mse(&a, &case.template).map_err(|e| e.to_string())?;
        let mb = mse(&b, &case.template).map_err(|e| e.to_string())?;
        if ma < mb {
            wins += 1;
        }
        compose.push(psnr_from_mse(ma));
        chained.push(psnr_from_mse(mb));
    }
    let detail = format!(
        "compose wins {wins}/{}, mean PSNR compose {:.2} vs chained {:.2}",
        s.severe.len(),
        mean(&compose),
        mean(&chained)
    );
    if wins as f64 >= 0.9 * s.severe.len() as f64 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fitter_convergence(s: &Suites) -> Outcome {
    let config = RectifyConfig::default();
    let fit_config = FitConfig {
        max_steps: 250,
        ..FitConfig::default()
    };
    let (mut reached, mut monotone) = (0, 0);
    for case in &s.mild {
        let r = fit(&case.distorted, &case.template, &config, &fit_config).map_err(|e| e.to_string())?;
        if psnr_from_mse(r.loss) >= 20.0 {
            reached += 1;
        }
        if r.trace.windows(2).all(|w| w[1].loss <= w[0].loss) {
            monotone += 1;
        }
    }
    let n = s.mild.len();
    let detail = format!("{reached}/{n} reach 20 dB, {monotone}/{n} non-increasing");
    if reached as f64 >= 0.9 * n as f64 && monotone == n {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median_time<F: FnMut()>(runs: usize, mut f: F) -> Duration {
    let mut times: Vec<Duration> = (0..runs)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .collect();
    times.sort();
    times[runs / 2]
}

fn performance(s: &Suites) -> Outcome {
    let case = &s.curved[0];
    let config = RectifyConfig::default();
    assert_eq!((case.distorted.width(), case.distorted.height()), (200, 64));
    let rectify = median_time(21, || {
        let mut p = OracleProvider::new(&case.true_offsets, 5);
        let (out, _) = rectify_iterative(&case.distorted, &mut p, &config, None).expect("rectification runs");
        assert_eq!((out.width(), out.height()), (100, 32));
    });
    let base = base_points(20).map_err(|e| e.to_string())?;
    let targets = case.true_state().current();
    let tps = median_time(101, || {
        let c = solve(&base, &targets, 0.0).expect("solve runs");
        assert_eq!(c.kernel_weights.len(), 40);
    });
    let detail = format!(
        "5-iteration rectify {:.2} ms, 43-unknown solve {:.3} ms",
        rectify.as_secs_f64() * 1e3,
        tps.as_secs_f64() * 1e3
    );
    if rectify < Duration::from_millis(50) && tps < Duration::from_millis(5) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn file_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..20 {
        let (w, h) = (rng.gen_range(1..64), rng.gen_range(1..64));
        let c = if i % 2 == 0 { 1 } else { 3 };
        let data = (0..w * h * c).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let img = Image::new(w, h, c, data).map_err(|e| e.to_string())?;
        let first = save_ppm(&img);
        let second = save_ppm(&load_ppm(&first).map_err(|e| e.to_string())?);
        if first != second {
            return Err(format!("image {i} ({w}x{h}x{c}) changed on reload"));
        }
    }
    for _ in 0..20 {
        let poly = (0..5).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let segments = (0..20)
            .map(|_| Segment {
                slope: rng.gen_range(-50.0..50.0),
                intercept: rng.gen_range(-1.0..1.0),
                half_len: rng.gen_range(0.1..0.5),
            })
            .collect();
        let p = FitLineParams::new(poly, segments).map_err(|e| e.to_string())?;
        let file = ParamsFile::FitLine(p.clone());
        if ParamsFile::from_json(&file.to_json()).map_err(|e| e.to_string())? != file
            || FitLineParams::from_json(&p.to_json()).map_err(|e| e.to_string())? != p
        {
            return Err("fitting-line params changed on reload".into());
        }
        let state = textrect::rectifier::ParamState::from_delta(random_offsets(&mut rng, 40, 0.2))
            .map_err(|e| e.to_string())?;
        let file = ParamsFile::from_state(&state);
        if ParamsFile::from_json(&file.to_json())
            .map_err(|e| e.to_string())?
            .to_state()
            .map_err(|e| e.to_string())?
            != state
        {
            return Err("control offsets changed on reload".into());
        }
    }
    Ok("20 PPM images byte-identical, 40 params files identical".into())
}

fn main() {
    let build = |d| suite(d, 0, 100).expect("suite generates");
    let suites = Suites {
        mild: build(Difficulty::Mild),
        curved: build(Difficulty::Curved),
        perspective: build(Difficulty::Perspective),
        severe: build(Difficulty::Severe),
    };
    let criteria: Vec<Check> = vec![
        ("tps exactness", Box::new(tps_exactness)),
        ("identity pipeline", Box::new(|| identity_pipeline(&suites))),
        ("differentiability", Box::new(differentiability)),
        ("oracle round trip", Box::new(|| oracle_round_trip(&suites))),
        ("iteration trend", Box::new(|| iteration_trend(&suites))),
        ("segment-count trend", Box::new(|| segment_trend(&suites))),
        ("boundary effect", Box::new(|| boundary_effect(&suites))),
        ("fitter convergence", Box::new(|| fitter_convergence(&suites))),
        ("performance envelope", Box::new(|| performance(&suites))),
        ("file-format fidelity", Box::new(file_fidelity)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
