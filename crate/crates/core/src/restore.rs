//! The Jump Restore engine: exponential holding times, density-sensitive
//! killing, regeneration from `ν`, accumulation and the resolve estimator.
//!
//! A tour starts at a regeneration point and alternates local steps until a
//! kill. In state `x` the next event is a local step with probability
//! `λ / (λ + κ(x))` and a kill with probability `κ(x) / (λ + κ(x))`; either way
//! the state is held for `Δτ ~ Exp(λ + κ(x))` and contributes `Δτ · f/p` to
//! its pixel. The image estimate is `κ₀ / tourCount` times the accumulated
//! buffer, scaled by the pixel count so that pixels hold the per-pixel mean
//! of `f`.

use std::time::Instant;

use rayon::prelude::*;

use crate::dynamics::{LocalDynamics, ScoreCache};
use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::rng::Philox;
use crate::target::{TargetDensity, TargetEvaluation, EPSILON};
use crate::torus::{sample_uniform, TorusPoint};

/// Chains per work unit. Work units are merged in index order, which keeps
/// results bit-identical for any thread count.
pub const CHAIN_BLOCK: usize = 8;

/// Longest tour length tracked individually in the tour-length histogram.
pub const TOUR_HIST_LEN: usize = 4096;

/// How the discrete local chain is embedded in continuous time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Holding {
    /// Holding rate `1 / dt` (Diffusion Restore).
    Embedded { dt: f64 },
    /// Holding rate 1 (Metropolis Restore, MALA Restore).
    Unit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RestoreConfig {
    /// Expected number of local steps per tour.
    pub m: f64,
    pub kappa0: f64,
    pub holding: Holding,
    /// `∫ p dλ`, exact or estimated.
    pub p_lambda: f64,
    /// Number of chains evolved in parallel.
    pub chains: usize,
}

impl RestoreConfig {
    /// Picks `κ₀ = p_λ / (m λ)` so that tours average `m` local steps on
    /// targets where `p ≈ p_λ`.
    pub fn auto(p_lambda: f64, m: f64, holding: Holding, chains: usize) -> Result<Self> {
        if !(m >= 1.0 && m.is_finite()) {
            return Err(Error::Config(format!("m must be >= 1, got {m}")));
        }
        if !(p_lambda > 0.0 && p_lambda.is_finite()) {
            return Err(Error::Config(format!("p_lambda must be positive, got {p_lambda}")));
        }
        if let Holding::Embedded { dt } = holding {
            if !(dt > 0.0) {
                return Err(Error::Config(format!("dt must be positive, got {dt}")));
            }
        }
        if chains == 0 {
            return Err(Error::Config("at least one chain is required".into()));
        }
        let mut cfg = Self {
            m,
            kappa0: 0.0,
            holding,
            p_lambda,
            chains,
        };
        cfg.kappa0 = p_lambda * holding_rate(&cfg) / m;
        Ok(cfg)
    }
}

/// `λ = 1 / dt` for the embedded diffusion, 1 otherwise.
pub fn holding_rate(cfg: &RestoreConfig) -> f64 {
    match cfg.holding {
        Holding::Embedded { dt } => 1.0 / dt,
        Holding::Unit => 1.0,
    }
}

/// Modified killing rate `(ρ/ρ_λ) κ₀ / (p + EPSILON)`.
pub fn killing_rate(cfg: &RestoreConfig, p: f64, regen_density_ratio: f64) -> f64 {
    regen_density_ratio * cfg.kappa0 / (p + EPSILON)
}

/// Spawn distribution for new tours.
pub trait Regeneration: Sync {
    fn sample(&self, rng: &mut Philox, d: usize) -> TorusPoint;

    /// `ρ(x) / ρ_λ`.
    fn density_ratio(&self, _x: &[f64]) -> f64 {
        1.0
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct UniformRegeneration;

impl Regeneration for UniformRegeneration {
    fn sample(&self, rng: &mut Philox, d: usize) -> TorusPoint {
        sample_uniform(rng, d).expect("target dimension is validated even")
    }
}

/// Per-tour record.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub rng: Philox,
    pub x: TorusPoint,
    pub pixel: usize,
    pub p: f64,
    /// Only meaningful when `p > 0`.
    pub f_over_p: Rgb,
    pub killed: bool,
    /// Local steps taken since the last regeneration.
    pub steps_in_tour: u64,
    eval: TargetEvaluation,
    score: ScoreCache,
}

/// Shared estimator state: per-pixel accumulators and the tour counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AccumulationImage {
    pub width: usize,
    pub height: usize,
    pub buffer: Vec<Rgb>,
    pub tour_count: u64,
    /// Number of accumulate calls.
    pub accumulations: u64,
    /// `tour_lengths[k]` counts completed tours with `k` local steps; the last
    /// entry collects everything longer.
    pub tour_lengths: Vec<u64>,
}

impl AccumulationImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            buffer: vec![Rgb::ZERO; width * height],
            tour_count: 0,
            accumulations: 0,
            tour_lengths: vec![0; TOUR_HIST_LEN + 1],
        }
    }

    pub fn for_target<T: TargetDensity + ?Sized>(target: &T) -> Self {
        let g = target.grid();
        Self::new(g.width, g.height)
    }

    /// Adds `other` into `self`; callers merge in a fixed order.
    pub fn merge(&mut self, other: &AccumulationImage) {
        for (a, b) in self.buffer.iter_mut().zip(&other.buffer) {
            *a += *b;
        }
        self.tour_count += other.tour_count;
        self.accumulations += other.accumulations;
        for (a, b) in self.tour_lengths.iter_mut().zip(&other.tour_lengths) {
            *a += b;
        }
    }

    fn record_tour(&mut self, length: u64) {
        self.tour_count += 1;
        let k = (length as usize).min(TOUR_HIST_LEN);
        self.tour_lengths[k] += 1;
    }
}

/// Outcome of one accumulate call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccumulateOutcome {
    pub dtau: f64,
    pub killed: bool,
}

impl ChainState {
    /// Seeds the chain stream from `(index, frame)`, draws `x ~ ν` and
    /// accumulates the first holding interval.
    #[allow(clippy::too_many_arguments)]
    pub fn initialize<T: TargetDensity + ?Sized, R: Regeneration + ?Sized>(
        seed: u64,
        index: u64,
        frame: u32,
        cfg: &RestoreConfig,
        target: &T,
        nu: &R,
        acc: &mut AccumulationImage,
    ) -> Self {
        let mut rng = Philox::for_chain(seed, index, frame);
        let x = nu.sample(&mut rng, target.dim());
        let mut chain = ChainState {
            rng,
            x,
            pixel: 0,
            p: 0.0,
            f_over_p: Rgb::ZERO,
            killed: false,
            steps_in_tour: 0,
            eval: TargetEvaluation {
                f: Rgb::ZERO,
                p: 0.0,
                pixel: 0,
            },
            score: ScoreCache::default(),
        };
        accumulate(&mut chain, cfg, target, nu, acc);
        chain
    }

    pub fn evaluation(&self) -> &TargetEvaluation {
        &self.eval
    }
}

/// Evaluates the target at the chain state, races the holding and killing
/// clocks and adds `Δτ · f/p` to the chain's pixel.
pub fn accumulate<T: TargetDensity + ?Sized, R: Regeneration + ?Sized>(
    chain: &mut ChainState,
    cfg: &RestoreConfig,
    target: &T,
    nu: &R,
    acc: &mut AccumulationImage,
) -> AccumulateOutcome {
    let eval = target.eval(chain.x.coords());
    accumulate_evaluated(chain, eval, cfg, nu, acc)
}

fn accumulate_evaluated<R: Regeneration + ?Sized>(
    chain: &mut ChainState,
    eval: TargetEvaluation,
    cfg: &RestoreConfig,
    nu: &R,
    acc: &mut AccumulationImage,
) -> AccumulateOutcome {
    chain.eval = eval;
    chain.pixel = eval.pixel;
    chain.p = eval.p;
    let lambda = holding_rate(cfg);
    let kappa = killing_rate(cfg, eval.p, nu.density_ratio(chain.x.coords()));
    let hold = chain.rng.exponential(lambda);
    let kill = chain.rng.exponential(kappa);
    let (dtau, killed) = if hold < kill { (hold, false) } else { (kill, true) };
    chain.killed = killed;
    acc.accumulations += 1;
    if killed {
        acc.record_tour(chain.steps_in_tour);
    }
    if let Some(ratio) = eval.f_over_p() {
        chain.f_over_p = ratio;
        acc.buffer[eval.pixel] += ratio * dtau;
    }
    AccumulateOutcome { dtau, killed }
}

/// One local step, or a regeneration if the tour was killed, followed by one
/// accumulation.
pub fn evolve<T: TargetDensity + ?Sized, R: Regeneration + ?Sized>(
    chain: &mut ChainState,
    cfg: &RestoreConfig,
    dynamics: &LocalDynamics,
    target: &T,
    nu: &R,
    acc: &mut AccumulationImage,
) -> AccumulateOutcome {
    if chain.killed {
        chain.x = nu.sample(&mut chain.rng, target.dim());
        chain.score.valid = false;
        chain.steps_in_tour = 0;
        accumulate(chain, cfg, target, nu, acc)
    } else {
        let current = chain.eval;
        let (eval, _) = dynamics.advance(target, &mut chain.x, &current, &mut chain.score, &mut chain.rng);
        chain.steps_in_tour += 1;
        match eval {
            Some(e) => accumulate_evaluated(chain, e, cfg, nu, acc),
            None => accumulate(chain, cfg, target, nu, acc),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub image: Image,
    /// Set when no tour has completed yet.
    pub warning: Option<String>,
}

/// `κ₀ · pixel_count / tourCount · buffer`.
pub fn resolve(acc: &AccumulationImage, cfg: &RestoreConfig) -> Resolved {
    let mut image = Image::new(acc.width, acc.height);
    if acc.tour_count == 0 {
        return Resolved {
            image,
            warning: Some("no completed tours; resolved image is zero".into()),
        };
    }
    let scale = cfg.kappa0 * acc.buffer.len() as f64 / acc.tour_count as f64;
    for (out, b) in image.pixels.iter_mut().zip(&acc.buffer) {
        *out = *b * scale;
    }
    Resolved { image, warning: None }
}

/// Summary of one sampler run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunStats {
    pub method: String,
    /// Samples drawn: accumulate calls for Restore, chain steps for MCMC,
    /// paths for path tracing.
    pub steps: u64,
    pub tours: u64,
    /// Mean local steps per completed tour.
    pub mean_tour_len: f64,
    /// Fraction of accumulate calls that ended a tour.
    pub kill_frac: f64,
    pub wall_ms: f64,
    pub warning: Option<String>,
    pub tour_lengths: Vec<u64>,
}

impl RunStats {
    pub(crate) fn simple(method: &str, steps: u64, wall_ms: f64) -> Self {
        Self {
            method: method.to_string(),
            steps,
            tours: 0,
            mean_tour_len: 0.0,
            kill_frac: 0.0,
            wall_ms,
            warning: None,
            tour_lengths: Vec::new(),
        }
    }
}

pub(crate) fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))
}

/// Runs `cfg.chains` tours-in-parallel for `budget / cfg.chains` rounds each
/// (the initialization counts as the first round) and resolves the image.
#[allow(clippy::too_many_arguments)]
pub fn run_restore<T: TargetDensity + ?Sized, R: Regeneration + ?Sized>(
    method: &str,
    cfg: &RestoreConfig,
    dynamics: &LocalDynamics,
    target: &T,
    nu: &R,
    budget: u64,
    threads: usize,
    seed: u64,
) -> Result<(Image, RunStats)> {
    let grid = target.grid();
    if grid.pixel_count() == 0 {
        return Err(Error::Config("image has zero pixels".into()));
    }
    if cfg.chains == 0 {
        return Err(Error::Config("at least one chain is required".into()));
    }
    let rounds = budget / cfg.chains as u64;
    if rounds == 0 {
        return Err(Error::Config(format!(
            "budget {budget} is smaller than the chain count {}",
            cfg.chains
        )));
    }
    let start = Instant::now();
    let blocks: Vec<(usize, usize)> = (0..cfg.chains)
        .step_by(CHAIN_BLOCK)
        .map(|s| (s, (s + CHAIN_BLOCK).min(cfg.chains)))
        .collect();
    let partials: Vec<AccumulationImage> = thread_pool(threads)?.install(|| {
        blocks
            .par_iter()
            .map(|&(lo, hi)| {
                let mut acc = AccumulationImage::for_target(target);
                for index in lo..hi {
                    let mut chain = ChainState::initialize(seed, index as u64, 0, cfg, target, nu, &mut acc);
                    for _ in 1..rounds {
                        evolve(&mut chain, cfg, dynamics, target, nu, &mut acc);
                    }
                }
                acc
            })
            .collect()
    });
    let mut acc = AccumulationImage::for_target(target);
    for part in &partials {
        acc.merge(part);
    }
    let resolved = resolve(&acc, cfg);
    let completed: u64 = acc.tour_lengths.iter().sum();
    let total_len: u64 = acc
        .tour_lengths
        .iter()
        .enumerate()
        .map(|(k, c)| k as u64 * c)
        .sum();
    let stats = RunStats {
        method: method.to_string(),
        steps: acc.accumulations,
        tours: acc.tour_count,
        mean_tour_len: if completed > 0 { total_len as f64 / completed as f64 } else { 0.0 },
        kill_frac: acc.tour_count as f64 / acc.accumulations as f64,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        warning: resolved.warning,
        tour_lengths: acc.tour_lengths,
    };
    Ok((resolved.image, stats))
}
