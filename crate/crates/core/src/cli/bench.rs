//! Seeded suites behind the `bench` command.

use std::time::Instant;

use rayon::prelude::*;

use super::SuiteArg;
use crate::error::Result;
use crate::fitter::{FitConfig, FitterProvider};
use crate::imagebuf::{mse, psnr_from_mse};
use crate::rectifier::{rectify_chained, rectify_iterative, OracleProvider, RectifyConfig};
use crate::synth::{suite, Difficulty, SynthCase};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub suite: &'static str,
    pub config: String,
    pub cases: usize,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub mean_mse: f64,
    pub wall_ms: f64,
}

fn summarize(suite: &'static str, config: String, mses: &[f64], wall_ms: f64) -> BenchRow {
    let n = mses.len() as f64;
    let psnrs: Vec<f64> = mses.iter().map(|&m| psnr_from_mse(m)).collect();
    let mean = psnrs.iter().sum::<f64>() / n;
    let var = psnrs.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    BenchRow {
        suite,
        config,
        cases: mses.len(),
        mean_psnr: mean,
        std_psnr: var.sqrt(),
        mean_mse: mses.iter().sum::<f64>() / n,
        wall_ms,
    }
}

/// Final reconstruction MSE of the fitter-driven pipeline on one case.
pub fn fitted_mse(case: &SynthCase, config: &RectifyConfig) -> Result<f64> {
    let mut provider = FitterProvider::new(
        case.distorted.clone(),
        case.template.clone(),
        config.clone(),
        FitConfig::default(),
    )?;
    let (out, _) = rectify_iterative(&case.distorted, &mut provider, config, None)?;
    mse(&out, &case.template)
}

/// Final reconstruction MSE with ground-truth increments, either composing
/// from the original or chaining resamples.
pub fn oracle_mse(case: &SynthCase, config: &RectifyConfig, chained: bool) -> Result<f64> {
    let mut provider = OracleProvider::new(&case.true_offsets, config.iterations);
    let (out, _) = if chained {
        rectify_chained(&case.distorted, &mut provider, config, None)?
    } else {
        rectify_iterative(&case.distorted, &mut provider, config, None)?
    };
    mse(&out, &case.template)
}

fn timed<F>(cases: &[SynthCase], f: F) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&SynthCase) -> Result<f64> + Sync,
{
    let start = Instant::now();
    let mses = cases.par_iter().map(&f).collect::<Result<Vec<f64>>>()?;
    Ok((mses, start.elapsed().as_secs_f64() * 1e3))
}

fn cases_for(difficulties: &[Difficulty], seed: u64, count: usize) -> Result<Vec<SynthCase>> {
    let per: Vec<Vec<SynthCase>> = difficulties
        .par_iter()
        .map(|&d| suite(d, seed, count))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Runs every configuration of `which` over `count` seeds per difficulty.
pub fn run_suite(which: SuiteArg, seed: u64, count: usize) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    match which {
        SuiteArg::Iterations => {
            let cases = cases_for(&[Difficulty::Mild, Difficulty::Curved], seed, count)?;
            for n in 0..=5 {
                let config = RectifyConfig::default().with_iterations(n);
                let (mses, ms) = timed(&cases, |c| fitted_mse(c, &config))?;
                rows.push(summarize("iterations", format!("N={n}"), &mses, ms));
            }
        }
        SuiteArg::Segments => {
            let cases = cases_for(&[Difficulty::Curved], seed, count)?;
            for l in [5, 10, 15, 20] {
                let config = RectifyConfig::default().with_segments(l);
                let (mses, ms) = timed(&cases, |c| fitted_mse(c, &config))?;
                rows.push(summarize("segments", format!("L={l}"), &mses, ms));
            }
        }
        SuiteArg::Boundary => {
            let cases = cases_for(&[Difficulty::Severe], seed, count)?;
            let config = RectifyConfig::default();
            for (name, chained) in [("compose", false), ("chained", true)] {
                let (mses, ms) = timed(&cases, |c| oracle_mse(c, &config, chained))?;
                rows.push(summarize("boundary", name.to_string(), &mses, ms));
            }
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("suite,config,cases,mean_psnr,std_psnr,mean_mse,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.6e},{:.1}\n",
            r.suite, r.config, r.cases, r.mean_psnr, r.std_psnr, r.mean_mse, r.wall_ms
        ));
    }
    out
}
