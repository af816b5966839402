//! Baseline drivers: plain Metropolis/MALA chains with an importance-weighted
//! histogram estimator, and independent path-tracing style sampling.

use std::time::Instant;

use rayon::prelude::*;

use crate::dynamics::{LocalDynamics, ScoreCache};
use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::restore::{thread_pool, RunStats, CHAIN_BLOCK};
use crate::rng::Philox;
use crate::target::{estimate_normalization, TargetDensity};
use crate::torus::sample_uniform;

const BOOTSTRAP_TAG: u32 = 1;
const PIXEL_TAG: u32 = 2;

/// Estimates `∫ p dλ` with one pass of `samples` independent uniform draws.
pub fn bootstrap_normalization<T: TargetDensity + ?Sized>(
    target: &T,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = Philox::for_tag(seed, BOOTSTRAP_TAG, 0);
    Ok(estimate_normalization(target, &mut rng, samples)?.mean)
}

/// Runs `chains` Metropolis or MALA chains for `budget / chains` steps each.
/// Every visited state adds `(f / (p + ε)) · p_λ · pixel_count / N` to its
/// pixel, `N` being the total number of steps.
#[allow(clippy::too_many_arguments)]
pub fn run_plain_mcmc<T: TargetDensity + ?Sized>(
    method: &str,
    dynamics: &LocalDynamics,
    target: &T,
    p_lambda: f64,
    chains: usize,
    budget: u64,
    threads: usize,
    seed: u64,
) -> Result<(Image, RunStats)> {
    if matches!(dynamics, LocalDynamics::Langevin(_)) {
        return Err(Error::Config(
            "plain MCMC needs Metropolis or MALA dynamics; unadjusted Langevin is not invariant".into(),
        ));
    }
    let grid = target.grid();
    if grid.pixel_count() == 0 || chains == 0 {
        return Err(Error::Config("plain MCMC needs pixels and chains".into()));
    }
    let steps = budget / chains as u64;
    if steps == 0 {
        return Err(Error::Config(format!("budget {budget} is smaller than the chain count {chains}")));
    }
    let start = Instant::now();
    let blocks: Vec<(usize, usize)> = (0..chains)
        .step_by(CHAIN_BLOCK)
        .map(|s| (s, (s + CHAIN_BLOCK).min(chains)))
        .collect();
    let partials: Vec<(Vec<Rgb>, u64)> = thread_pool(threads)?.install(|| {
        blocks
            .par_iter()
            .map(|&(lo, hi)| {
                let mut buf = vec![Rgb::ZERO; grid.pixel_count()];
                let mut accepted = 0u64;
                let mut cache = ScoreCache::default();
                for index in lo..hi {
                    let mut rng = Philox::for_chain(seed, index as u64, 0);
                    let mut x = sample_uniform(&mut rng, target.dim()).expect("even dimension");
                    let mut eval = target.eval(x.coords());
                    cache.valid = false;
                    for _ in 0..steps {
                        let current = eval;
                        let (next, acc) = dynamics.advance(target, &mut x, &current, &mut cache, &mut rng);
                        eval = next.expect("MH dynamics return the evaluation");
                        accepted += u64::from(acc);
                        buf[eval.pixel] += eval.f * (1.0 / eval.penalized());
                    }
                }
                (buf, accepted)
            })
            .collect()
    });
    let total = steps * chains as u64;
    let scale = p_lambda * grid.pixel_count() as f64 / total as f64;
    let mut image = Image::new(grid.width, grid.height);
    let mut accepted = 0;
    for (buf, acc) in &partials {
        for (px, b) in image.pixels.iter_mut().zip(buf) {
            *px += *b;
        }
        accepted += acc;
    }
    for px in &mut image.pixels {
        *px = *px * scale;
    }
    let mut stats = RunStats::simple(method, total, start.elapsed().as_secs_f64() * 1e3);
    stats.kill_frac = 0.0;
    stats.mean_tour_len = accepted as f64 / total as f64;
    Ok((image, stats))
}

/// Independent sampling: `budget / pixel_count` samples per pixel, the first
/// coordinate pair jittered inside the pixel and the rest uniform.
pub fn run_path_tracing<T: TargetDensity + ?Sized>(
    target: &T,
    budget: u64,
    threads: usize,
    seed: u64,
) -> Result<(Image, RunStats)> {
    let grid = target.grid();
    if grid.pixel_count() == 0 {
        return Err(Error::Config("image has zero pixels".into()));
    }
    let spp = budget / grid.pixel_count() as u64;
    if spp == 0 {
        return Err(Error::Config(format!(
            "budget {budget} gives less than one sample per pixel"
        )));
    }
    let start = Instant::now();
    let image = render_independent(target, spp, threads, seed)?;
    let stats = RunStats::simple("pt", spp * grid.pixel_count() as u64, start.elapsed().as_secs_f64() * 1e3);
    Ok((image, stats))
}

/// Per-pixel mean of `spp` jittered samples of `f`.
pub fn render_independent<T: TargetDensity + ?Sized>(
    target: &T,
    spp: u64,
    threads: usize,
    seed: u64,
) -> Result<Image> {
    let grid = target.grid();
    let d = target.dim();
    let pixels: Vec<Rgb> = thread_pool(threads)?.install(|| {
        (0..grid.pixel_count())
            .into_par_iter()
            .map(|pixel| {
                let (col, row) = (pixel % grid.width, pixel / grid.width);
                let mut rng = Philox::for_tag(seed, PIXEL_TAG, pixel as u64);
                let mut u = vec![0.0; d];
                let mut sum = Rgb::ZERO;
                for _ in 0..spp {
                    u[0] = ((col as f64 + rng.uniform()) / grid.width as f64).min(1.0 - f64::EPSILON);
                    u[1] = ((row as f64 + rng.uniform()) / grid.height as f64).min(1.0 - f64::EPSILON);
                    for c in &mut u[2..] {
                        *c = rng.uniform();
                    }
                    sum += target.eval(&u).f;
                }
                sum * (1.0 / spp as f64)
            })
            .collect()
    });
    Ok(Image {
        width: grid.width,
        height: grid.height,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{MalaConfig, MetropolisConfig};
    use crate::target::{GaussianComponent, ImageGrid, Uniform, WrappedGaussianMixture};

    fn uniform() -> Uniform {
        Uniform { dim: 2, grid: ImageGrid::new(8, 8) }
    }

    #[test]
    fn plain_mcmc_on_flat_target_preserves_total_mass() {
        let t = uniform();
        let d = LocalDynamics::Metropolis(MetropolisConfig::default());
        let p = bootstrap_normalization(&t, 64, 1).unwrap();
        assert_eq!(p, 1.0);
        let (img, stats) = run_plain_mcmc("metropolis", &d, &t, p, 16, 64_000, 1, 1).unwrap();
        assert!((img.mean() - 1.0).abs() < 1e-7);
        assert_eq!(stats.steps, 64_000);
        // Every proposal is accepted on a flat density.
        assert_eq!(stats.mean_tour_len, 1.0);
        // Per-pixel values fluctuate like visit counts: sd ≈ sqrt(pixels / N_eff).
        let worst = img.pixels.iter().map(|p| (p.0[0] - 1.0).abs()).fold(0.0, f64::max);
        assert!(worst < 0.3, "{worst}");
    }

    #[test]
    fn plain_mcmc_rejects_unadjusted_dynamics() {
        let t = uniform();
        let d = LocalDynamics::Langevin(Default::default());
        assert!(run_plain_mcmc("x", &d, &t, 1.0, 4, 100, 1, 0).is_err());
    }

    #[test]
    fn path_tracing_flat_target_is_exact() {
        let t = uniform();
        let (img, stats) = run_path_tracing(&t, 64 * 3, 2, 5).unwrap();
        assert!(img.pixels.iter().all(|p| *p == Rgb::splat(1.0)));
        assert_eq!(stats.steps, 192);
        assert!(run_path_tracing(&t, 10, 1, 5).is_err());
    }

    #[test]
    fn path_tracing_variance_halves_with_double_budget() {
        let t = WrappedGaussianMixture::new(
            2,
            ImageGrid::new(16, 16),
            vec![GaussianComponent { weight: 1.0, mean: vec![0.5, 0.5], stddev: 0.1 }],
            5,
        )
        .unwrap();
        let reference = crate::target::quadrature_reference(&t, 512).unwrap();
        let variance = |spp: u64| {
            let mut total = 0.0;
            let seeds = 16;
            for seed in 0..seeds {
                let img = render_independent(&t, spp, 1, seed).unwrap();
                total += crate::metrics::compare(&img, &reference).unwrap().mse;
            }
            total / seeds as f64
        };
        let ratio = variance(16) / variance(8);
        assert!((ratio - 0.5).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn independent_large_steps_match_path_tracing_in_distribution() {
        let t = WrappedGaussianMixture::new(
            2,
            ImageGrid::new(8, 8),
            vec![GaussianComponent { weight: 1.0, mean: vec![0.4, 0.6], stddev: 0.2 }],
            5,
        )
        .unwrap();
        let reference = crate::target::quadrature_reference(&t, 256).unwrap();
        let d = LocalDynamics::Mala(MalaConfig { stddev: 5e-3, large_step_prob: 1.0 });
        let (img, _) = run_plain_mcmc("mala", &d, &t, 1.0, 64, 640_000, 1, 3).unwrap();
        let report = crate::metrics::compare(&img, &reference).unwrap();
        // Independence-sampler histogram: MSE ≈ pixels * E[v] / N_eff, with N_eff ≤ N.
        assert!(report.mse < 5.0 * 64.0 / 640_000.0 * 1.5, "{report:?}");
    }
}
