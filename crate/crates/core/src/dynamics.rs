//! Local dynamics: the unadjusted nonreversible Langevin step used by
//! Diffusion Restore, plus Metropolis and MALA transitions with large steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Philox;
use crate::target::{TargetDensity, TargetEvaluation};
use crate::torus::{min_image, wrap_coord, TorusPoint};

/// Euler-Maruyama parameters in the increment-scale parameterization:
/// `stddev = sqrt(dt) * sigma` and `c_tilde = dt * c / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    pub stddev: f64,
    pub c_tilde: f64,
    pub dt: f64,
}

impl LangevinConfig {
    pub const DEFAULT_STDDEV: f64 = 5e-3;
    pub const DEFAULT_DT: f64 = 1e-5;

    pub fn new(stddev: f64, c_tilde: f64, dt: f64) -> Result<Self> {
        if !(stddev > 0.0 && dt > 0.0 && c_tilde >= 0.0) || !(stddev.is_finite() && dt.is_finite() && c_tilde.is_finite()) {
            return Err(Error::Config(format!(
                "langevin parameters out of range: stddev={stddev}, c_tilde={c_tilde}, dt={dt}"
            )));
        }
        Ok(Self { stddev, c_tilde, dt })
    }

    /// From the diffusion coefficient `sigma` and rotation scale `c` at step `dt`.
    pub fn from_diffusion(sigma: f64, rotation: f64, dt: f64) -> Self {
        Self {
            stddev: dt.sqrt() * sigma,
            c_tilde: dt * rotation / 2.0,
            dt,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.stddev / self.dt.sqrt()
    }

    pub fn rotation(&self) -> f64 {
        2.0 * self.c_tilde / self.dt
    }
}

impl Default for LangevinConfig {
    /// Rotation strength defaults to the gradient-drift strength, `c_tilde = stddev^2 / 2`.
    fn default() -> Self {
        Self {
            stddev: Self::DEFAULT_STDDEV,
            c_tilde: Self::DEFAULT_STDDEV * Self::DEFAULT_STDDEV / 2.0,
            dt: Self::DEFAULT_DT,
        }
    }
}

/// Random-walk Metropolis with independent uniform large steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetropolisConfig {
    pub stddev: f64,
    pub large_step_prob: f64,
}

impl Default for MetropolisConfig {
    fn default() -> Self {
        Self {
            stddev: 1e-2,
            large_step_prob: 0.3,
        }
    }
}

/// Metropolis-adjusted Langevin with independent uniform large steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MalaConfig {
    pub stddev: f64,
    pub large_step_prob: f64,
}

impl Default for MalaConfig {
    fn default() -> Self {
        Self {
            stddev: 5e-3,
            large_step_prob: 0.3,
        }
    }
}

fn check_mh(stddev: f64, large_step_prob: f64) -> Result<()> {
    if !(stddev > 0.0 && stddev.is_finite()) {
        return Err(Error::Config(format!("stddev must be positive, got {stddev}")));
    }
    if !(0.0..=1.0).contains(&large_step_prob) {
        return Err(Error::Config(format!(
            "large_step_prob must lie in [0, 1], got {large_step_prob}"
        )));
    }
    Ok(())
}

impl MetropolisConfig {
    pub fn validate(&self) -> Result<()> {
        check_mh(self.stddev, self.large_step_prob)
    }
}

impl MalaConfig {
    pub fn validate(&self) -> Result<()> {
        check_mh(self.stddev, self.large_step_prob)
    }
}

/// The antisymmetric block action `c_tilde * (v1, -v0)`.
#[inline]
pub fn rotate(c_tilde: f64, v: [f64; 2]) -> [f64; 2] {
    [c_tilde * v[1], -c_tilde * v[0]]
}

/// One Euler-Maruyama step in place, given the score at `x`.
///
/// Blocks are processed in order, each consuming one pair of normals.
pub fn langevin_update(cfg: &LangevinConfig, score: &[f64], x: &mut [f64], rng: &mut Philox) {
    let half_var = 0.5 * cfg.stddev * cfg.stddev;
    for (xb, sb) in x.chunks_exact_mut(2).zip(score.chunks_exact(2)) {
        let xi = rng.normal_pair();
        let rot = rotate(cfg.c_tilde, [sb[0], sb[1]]);
        for k in 0..2 {
            xb[k] = wrap_coord(xb[k] + half_var * sb[k] + rot[k] + cfg.stddev * xi[k]);
        }
    }
}

/// One unadjusted nonreversible Langevin step from `x`.
pub fn langevin_step<T: TargetDensity + ?Sized>(
    cfg: &LangevinConfig,
    target: &T,
    x: &TorusPoint,
    rng: &mut Philox,
) -> TorusPoint {
    let mut score = vec![0.0; x.dim()];
    target.score(x.coords(), &mut score);
    let mut y = x.clone();
    langevin_update(cfg, &score, y.coords_mut(), rng);
    y
}

/// Result of one Metropolis-Hastings transition.
#[derive(Clone, Debug)]
pub struct MhOutcome {
    pub x: TorusPoint,
    pub eval: TargetEvaluation,
    /// Score at the returned state when it was computed along the way.
    pub score: Option<Vec<f64>>,
    pub accepted: bool,
    pub large_step: bool,
}

fn uniform_proposal(d: usize, rng: &mut Philox) -> TorusPoint {
    TorusPoint::from_wrapped((0..d).map(|_| rng.uniform()).collect())
}

fn gaussian_proposal(mean: &[f64], stddev: f64, rng: &mut Philox) -> TorusPoint {
    let mut y = Vec::with_capacity(mean.len());
    for mb in mean.chunks_exact(2) {
        let xi = rng.normal_pair();
        y.push(wrap_coord(mb[0] + stddev * xi[0]));
        y.push(wrap_coord(mb[1] + stddev * xi[1]));
    }
    TorusPoint::from_wrapped(y)
}

fn reject(x: &TorusPoint, current: &TargetEvaluation, large_step: bool) -> MhOutcome {
    MhOutcome {
        x: x.clone(),
        eval: *current,
        score: None,
        accepted: false,
        large_step,
    }
}

/// Metropolis transition targeting `p + EPSILON`. `current` is the evaluation at `x`.
pub fn metropolis_step<T: TargetDensity + ?Sized>(
    cfg: &MetropolisConfig,
    target: &T,
    x: &TorusPoint,
    current: &TargetEvaluation,
    rng: &mut Philox,
) -> MhOutcome {
    let large_step = rng.uniform() < cfg.large_step_prob;
    let y = if large_step {
        uniform_proposal(x.dim(), rng)
    } else {
        gaussian_proposal(x.coords(), cfg.stddev, rng)
    };
    let eval = target.eval(y.coords());
    // Both proposals are symmetric, so the ratio is the density ratio.
    let ratio = eval.penalized() / current.penalized();
    if ratio >= 1.0 || rng.uniform() < ratio {
        MhOutcome {
            x: y,
            eval,
            score: None,
            accepted: true,
            large_step,
        }
    } else {
        reject(x, current, large_step)
    }
}

/// Log density, up to a constant, of the nearest-image Gaussian proposal
/// from drift-shifted `mean` to `y`. For stddev <= 1e-2 the next image is at
/// least 0.5 / 1e-2 = 50 stddevs away; its relative weight is below e^-1000.
fn log_proposal(mean: &[f64], y: &[f64], stddev: f64) -> f64 {
    let sq: f64 = mean
        .iter()
        .zip(y)
        .map(|(m, yi)| {
            let d = min_image(yi - m);
            d * d
        })
        .sum();
    -sq / (2.0 * stddev * stddev)
}

fn drifted(x: &[f64], score: &[f64], stddev: f64) -> Vec<f64> {
    let half_var = 0.5 * stddev * stddev;
    x.iter().zip(score).map(|(xi, si)| xi + half_var * si).collect()
}

/// MALA transition targeting `p + EPSILON`. `score_x` is the score at `x`.
pub fn mala_step<T: TargetDensity + ?Sized>(
    cfg: &MalaConfig,
    target: &T,
    x: &TorusPoint,
    current: &TargetEvaluation,
    score_x: &[f64],
    rng: &mut Philox,
) -> MhOutcome {
    let large_step = rng.uniform() < cfg.large_step_prob;
    if large_step {
        let y = uniform_proposal(x.dim(), rng);
        let eval = target.eval(y.coords());
        let ratio = eval.penalized() / current.penalized();
        return if ratio >= 1.0 || rng.uniform() < ratio {
            MhOutcome {
                x: y,
                eval,
                score: None,
                accepted: true,
                large_step,
            }
        } else {
            reject(x, current, large_step)
        };
    }
    let mean_x = drifted(x.coords(), score_x, cfg.stddev);
    let y = gaussian_proposal(&mean_x, cfg.stddev, rng);
    let eval = target.eval(y.coords());
    let mut score_y = vec![0.0; x.dim()];
    target.score(y.coords(), &mut score_y);
    let mean_y = drifted(y.coords(), &score_y, cfg.stddev);
    let log_ratio = eval.penalized().ln() - current.penalized().ln()
        + log_proposal(&mean_y, x.coords(), cfg.stddev)
        - log_proposal(&mean_x, y.coords(), cfg.stddev);
    if log_ratio >= 0.0 || rng.uniform() < log_ratio.exp() {
        MhOutcome {
            x: y,
            eval,
            score: Some(score_y),
            accepted: true,
            large_step,
        }
    } else {
        reject(x, current, large_step)
    }
}

/// Score values cached for the current state of a chain.
#[derive(Clone, Debug, Default)]
pub struct ScoreCache {
    pub values: Vec<f64>,
    pub valid: bool,
}

/// Local dynamics selectable by the samplers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LocalDynamics {
    Langevin(LangevinConfig),
    Metropolis(MetropolisConfig),
    Mala(MalaConfig),
}

impl LocalDynamics {
    /// Moves `x` by one local step. Returns the new evaluation when the step
    /// already computed it, and whether the move was accepted.
    pub fn advance<T: TargetDensity + ?Sized>(
        &self,
        target: &T,
        x: &mut TorusPoint,
        current: &TargetEvaluation,
        cache: &mut ScoreCache,
        rng: &mut Philox,
    ) -> (Option<TargetEvaluation>, bool) {
        let d = x.dim();
        if cache.values.len() != d {
            cache.values = vec![0.0; d];
            cache.valid = false;
        }
        match self {
            LocalDynamics::Langevin(cfg) => {
                target.score(x.coords(), &mut cache.values);
                langevin_update(cfg, &cache.values, x.coords_mut(), rng);
                cache.valid = false;
                (None, true)
            }
            LocalDynamics::Metropolis(cfg) => {
                let out = metropolis_step(cfg, target, x, current, rng);
                if out.accepted {
                    *x = out.x;
                }
                (Some(out.eval), out.accepted)
            }
            LocalDynamics::Mala(cfg) => {
                if !cache.valid {
                    target.score(x.coords(), &mut cache.values);
                    cache.valid = true;
                }
                let out = mala_step(cfg, target, x, current, &cache.values, rng);
                if out.accepted {
                    *x = out.x;
                    match out.score {
                        Some(s) => cache.values = s,
                        None => cache.valid = false,
                    }
                }
                (Some(out.eval), out.accepted)
            }
        }
    }
}
