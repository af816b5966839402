//! Turns an [`ExperimentConfig`] into runs and files: the `render`, `bench`
//! and `bias` commands.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::biaslab::adjoint_bias_field;
use crate::config::{ExperimentConfig, MethodConfig, MethodKind, TargetConfig};
use crate::drivers::{bootstrap_normalization, render_independent, run_path_tracing, run_plain_mcmc};
use crate::dynamics::{LangevinConfig, LocalDynamics, MalaConfig, MetropolisConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{convergence_curve, log_log_slope, median, write_curve_csv, CurveRow};
use crate::microrender::{cornell_box, furnace_box, Scene};
use crate::restore::{run_restore, thread_pool, Holding, RestoreConfig, RunStats, UniformRegeneration};
use crate::target::{
    quadrature_reference, three_mode_mixture, GaussianComponent, ImageGrid, TargetDensity, Uniform,
    WrappedGaussianMixture, DEFAULT_IMAGES,
};

pub const DEFAULT_CHAINS: usize = 64;
pub const DEFAULT_M: f64 = 64.0;
/// Fields whose sup-norm stays below this are reported as degenerate.
pub const DEGENERATE_SUP: f64 = 1e-10;

/// Settings that may come from the command line, the environment or the config.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub threads: usize,
    pub out: PathBuf,
    pub seed: u64,
}

impl RunOptions {
    /// Explicit values win over the config, which wins over defaults
    /// (all available cores, `./out`, seed 0).
    pub fn resolve(cfg: &ExperimentConfig, threads: Option<usize>, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self> {
        let threads = threads
            .or(cfg.run.threads)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if threads == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        Ok(Self {
            threads,
            out: out.or_else(|| cfg.run.out.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out")),
            seed: seed.unwrap_or(cfg.run.seed),
        })
    }
}

pub fn build_target(cfg: &ExperimentConfig) -> Result<Box<dyn TargetDensity>> {
    let grid = cfg.image.map_or(ImageGrid::new(32, 32), |i| ImageGrid::new(i.width, i.height));
    let scene = |mut desc: crate::microrender::SceneDesc| -> Result<Box<dyn TargetDensity>> {
        if let Some(img) = cfg.image {
            desc.width = img.width;
            desc.height = img.height;
        }
        Ok(Box::new(Scene::new(desc)?))
    };
    match &cfg.target {
        TargetConfig::Uniform { dim } => {
            if *dim == 0 || dim % 2 != 0 {
                return Err(Error::Config(format!("`target.dim` must be even and positive, got {dim}")));
            }
            Ok(Box::new(Uniform { dim: *dim, grid }))
        }
        TargetConfig::Gaussian { dim, mean, stddev } => Ok(Box::new(WrappedGaussianMixture::new(
            *dim,
            grid,
            vec![GaussianComponent { weight: 1.0, mean: mean.clone(), stddev: *stddev }],
            DEFAULT_IMAGES,
        )?)),
        TargetConfig::Mixture { dim, components, images } => Ok(Box::new(WrappedGaussianMixture::new(
            *dim,
            grid,
            components
                .iter()
                .map(|c| GaussianComponent { weight: c.weight, mean: c.mean.clone(), stddev: c.stddev })
                .collect(),
            *images,
        )?)),
        TargetConfig::ThreeMode => Ok(Box::new(three_mode_mixture(grid))),
        TargetConfig::Cornell => scene(cornell_box()),
        TargetConfig::Furnace { albedo, emission, max_depth } => scene(furnace_box(*albedo, *emission, *max_depth)),
        TargetConfig::Scene { scene: desc } => scene(desc.clone()),
    }
}

/// Whether the target is a closed-form density in `d = 2`, for which the
/// midpoint rule gives the reference image.
pub fn has_quadrature_reference(cfg: &ExperimentConfig) -> bool {
    match &cfg.target {
        TargetConfig::Uniform { dim } | TargetConfig::Gaussian { dim, .. } | TargetConfig::Mixture { dim, .. } => {
            *dim == 2
        }
        TargetConfig::ThreeMode => true,
        _ => false,
    }
}

/// `∫ p dλ`, exact when the target knows it and estimated otherwise.
pub fn normalization(target: &dyn TargetDensity, samples: usize, seed: u64) -> Result<f64> {
    match target.normalization() {
        Some(p) => Ok(p),
        None => {
            let p = bootstrap_normalization(target, samples, seed)?;
            if p > 0.0 {
                Ok(p)
            } else {
                Err(Error::Numeric(format!(
                    "no light found in {samples} normalization samples; the image would be black"
                )))
            }
        }
    }
}

/// A method with every parameter filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSpec {
    pub kind: MethodKind,
    pub dynamics: Option<LocalDynamics>,
    pub m: f64,
    pub chains: usize,
}

impl MethodSpec {
    pub fn from_config(m: &MethodConfig) -> Result<Self> {
        m.validate()?;
        let chains = m.chains.unwrap_or(DEFAULT_CHAINS);
        let dynamics = match m.name {
            MethodKind::Pt => None,
            MethodKind::Metropolis | MethodKind::MetropolisRestore => {
                let d = MetropolisConfig::default();
                let large = if m.name == MethodKind::Metropolis { d.large_step_prob } else { 0.0 };
                let cfg = MetropolisConfig {
                    stddev: m.stddev.unwrap_or(d.stddev),
                    large_step_prob: m.large_step_prob.unwrap_or(large),
                };
                cfg.validate()?;
                Some(LocalDynamics::Metropolis(cfg))
            }
            MethodKind::Mala | MethodKind::MalaRestore => {
                let d = MalaConfig::default();
                let large = if m.name == MethodKind::Mala { d.large_step_prob } else { 0.0 };
                let cfg = MalaConfig {
                    stddev: m.stddev.unwrap_or(d.stddev),
                    large_step_prob: m.large_step_prob.unwrap_or(large),
                };
                cfg.validate()?;
                Some(LocalDynamics::Mala(cfg))
            }
            MethodKind::DiffusionRestore => {
                let d = LangevinConfig::default();
                let stddev = m.stddev.unwrap_or(d.stddev);
                let cfg = LangevinConfig::new(stddev, m.c_tilde.unwrap_or(0.5 * stddev * stddev), m.dt.unwrap_or(d.dt))?;
                Some(LocalDynamics::Langevin(cfg))
            }
        };
        Ok(Self { kind: m.name, dynamics, m: m.m.unwrap_or(DEFAULT_M), chains })
    }

    pub fn name(&self) -> &'static str {
        self.kind.as_str()
    }
}

/// Runs one method for `budget` samples.
pub fn run_method(
    spec: &MethodSpec,
    target: &dyn TargetDensity,
    p_lambda: f64,
    budget: u64,
    threads: usize,
    seed: u64,
) -> Result<(Image, RunStats)> {
    let name = spec.name();
    match (spec.kind, &spec.dynamics) {
        (MethodKind::Pt, _) => run_path_tracing(target, budget, threads, seed),
        (MethodKind::Metropolis | MethodKind::Mala, Some(d)) => {
            run_plain_mcmc(name, d, target, p_lambda, spec.chains, budget, threads, seed)
        }
        (_, Some(d)) => {
            let holding = match d {
                LocalDynamics::Langevin(l) => Holding::Embedded { dt: l.dt },
                _ => Holding::Unit,
            };
            let cfg = RestoreConfig::auto(p_lambda, spec.m, holding, spec.chains)?;
            run_restore(name, &cfg, d, target, &UniformRegeneration, budget, threads, seed)
        }
        (_, None) => Err(Error::InvalidState(format!("method {name} has no dynamics"))),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn check_finite(image: &Image, what: &str) -> Result<()> {
    if image.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains NaN or infinite values")))
    }
}

#[derive(Serialize)]
struct StatsRow<'a> {
    method: &'a str,
    steps: u64,
    tours: u64,
    mean_tour_len: f64,
    kill_frac: f64,
    wall_ms: f64,
}

/// Writes `method,steps,tours,mean_tour_len,kill_frac,wall_ms`.
pub fn write_stats_csv(stats: &[RunStats], path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for s in stats {
        w.serialize(StatsRow {
            method: &s.method,
            steps: s.steps,
            tours: s.tours,
            mean_tour_len: s.mean_tour_len,
            kill_frac: s.kill_frac,
            wall_ms: s.wall_ms,
        })
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn single_method(cfg: &ExperimentConfig) -> Result<MethodSpec> {
    match cfg.methods.as_slice() {
        [m] => MethodSpec::from_config(m),
        [] => Err(Error::Config("render needs one [[method]] entry".into())),
        _ => Err(Error::Config(format!("render takes exactly one [[method]], found {}", cfg.methods.len()))),
    }
}

/// Renders with the configured method; writes `image.pfm`, `image.png` and
/// `stats.csv`. Returns a one-line summary.
pub fn cmd_render(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<String> {
    let spec = single_method(cfg)?;
    let target = build_target(cfg)?;
    ensure_dir(&opts.out)?;
    let p_lambda = if spec.kind == MethodKind::Pt {
        1.0
    } else {
        normalization(target.as_ref(), cfg.run.normalization_samples, opts.seed)?
    };
    let (image, stats) = run_method(&spec, target.as_ref(), p_lambda, cfg.run.budget, opts.threads, opts.seed)?;
    check_finite(&image, "rendered image")?;
    image.write_pfm(&opts.out.join("image.pfm"))?;
    image.write_png(&opts.out.join("image.png"), cfg.run.exposure)?;
    write_stats_csv(std::slice::from_ref(&stats), &opts.out.join("stats.csv"))?;
    let mut line = format!(
        "{}: {} steps, {} tours, mean {:.6}, wall {:.1} ms -> {}",
        stats.method,
        stats.steps,
        stats.tours,
        image.mean(),
        stats.wall_ms,
        opts.out.display()
    );
    if let Some(w) = &stats.warning {
        line.push_str(&format!(" (warning: {w})"));
    }
    Ok(line)
}

/// The image every bench run is compared against.
pub fn reference_image(cfg: &ExperimentConfig, target: &dyn TargetDensity, threads: usize) -> Result<Image> {
    let bench = cfg.bench.as_ref().ok_or_else(|| Error::Config("missing [bench] section".into()))?;
    let image = if has_quadrature_reference(cfg) {
        quadrature_reference(target, bench.quadrature_n)?
    } else {
        // A stream family of its own so that no bench seed reuses it.
        render_independent(target, bench.reference_spp, threads, u64::MAX)?
    };
    check_finite(&image, "reference image")?;
    Ok(image)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub budget: u64,
    pub median_mae: f64,
    pub median_mse: f64,
    pub median_mrse: f64,
    pub median_mape: f64,
}

/// Medians over seeds at the largest budget, one row per method.
pub fn summarize(rows: &[CurveRow], methods: &[&str]) -> Vec<SummaryRow> {
    let Some(last) = rows.iter().map(|r| r.budget).max() else {
        return vec![];
    };
    methods
        .iter()
        .map(|&m| {
            let sel: Vec<&CurveRow> = rows.iter().filter(|r| r.method == m && r.budget == last).collect();
            let med = |f: fn(&CurveRow) -> f64| median(&mut sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                method: m.to_string(),
                budget: last,
                median_mae: med(|r| r.mae),
                median_mse: med(|r| r.mse),
                median_mrse: med(|r| r.mrse),
                median_mape: med(|r| r.mape),
            }
        })
        .collect()
}

/// Runs every method at every `(budget, seed)`; writes `reference.pfm`,
/// `curves.csv` and `summary.csv` and returns the summary as a table.
pub fn cmd_bench(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<String> {
    let bench = cfg.bench.as_ref().ok_or_else(|| Error::Config("missing [bench] section".into()))?;
    if cfg.methods.len() < 2 {
        return Err(Error::Config(format!("bench needs at least two [[method]] entries, found {}", cfg.methods.len())));
    }
    let specs = cfg.methods.iter().map(MethodSpec::from_config).collect::<Result<Vec<_>>>()?;
    let target = build_target(cfg)?;
    ensure_dir(&opts.out)?;
    let reference = reference_image(cfg, target.as_ref(), opts.threads)?;
    reference.write_pfm(&opts.out.join("reference.pfm"))?;
    let p_lambda = normalization(target.as_ref(), cfg.run.normalization_samples, opts.seed)?;
    let mut rows = Vec::new();
    for spec in &specs {
        let run = |budget: u64, seed: u64| {
            let (image, _) = run_method(spec, target.as_ref(), p_lambda, budget, 1, seed)?;
            check_finite(&image, spec.name())?;
            Ok(image)
        };
        rows.extend(convergence_curve(spec.name(), &reference, &bench.budgets, &bench.seeds, opts.threads, run)?);
    }
    write_curve_csv(&rows, &opts.out.join("curves.csv"))?;
    let names: Vec<&str> = specs.iter().map(MethodSpec::name).collect();
    let summary = summarize(&rows, &names);
    let path = opts.out.join("summary.csv");
    let io = |e: csv::Error| Error::io(&path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    for s in &summary {
        w.serialize(s).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let mut table = format!("{:<20} {:>10} {:>12} {:>12} {:>12} {:>12}\n", "method", "budget", "MAE", "MSE", "MRSE", "MAPE");
    for s in &summary {
        table.push_str(&format!(
            "{:<20} {:>10} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}\n",
            s.method, s.budget, s.median_mae, s.median_mse, s.median_mrse, s.median_mape
        ));
    }
    Ok(table)
}

/// Slope of log sup-norm against log Δt, or `None` when every field is
/// numerically zero.
pub fn bias_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|&(_, s)| !(s > DEGENERATE_SUP)) {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(dt, s)| (dt.ln(), s.ln())).collect();
    Some(log_log_slope(&logs))
}

/// Computes the bias field for every Δt in the sweep. Writes
/// `bias_<k>.csv`/`.png`, `sup.csv` and `slope.csv`.
pub fn cmd_bias(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<String> {
    let bias = cfg.bias.as_ref().ok_or_else(|| Error::Config("missing [bias] section (needs `dt_sweep`)".into()))?;
    if !has_quadrature_reference(cfg) {
        return Err(Error::Config("bias needs a closed-form target in two dimensions".into()));
    }
    let target = build_target(cfg)?;
    ensure_dir(&opts.out)?;
    let rotation = bias.rotation.unwrap_or(bias.sigma * bias.sigma);
    let mut sups = Vec::new();
    let pool = thread_pool(opts.threads)?;
    for (k, &dt) in bias.dt_sweep.iter().enumerate() {
        let lcfg = LangevinConfig::from_diffusion(bias.sigma, rotation, dt);
        let field = pool.install(|| adjoint_bias_field(&lcfg, target.as_ref(), bias.grid_n, bias.quadrature_n))?;
        if field.ratio.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("bias field at dt = {dt} is not finite")));
        }
        field.ratio.write_csv(&opts.out.join(format!("bias_{k}.csv")))?;
        field.ratio.write_png(&opts.out.join(format!("bias_{k}.png")))?;
        sups.push((dt, field.ratio.sup_norm()));
    }
    let path = opts.out.join("sup.csv");
    let io = |e: csv::Error| Error::io(&path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    w.write_record(["index", "dt", "sup_norm"]).map_err(io)?;
    for (k, (dt, s)) in sups.iter().enumerate() {
        w.serialize((k, dt, s)).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let slope = bias_slope(&sups);
    let text = match slope {
        Some(s) => format!("slope\n{s}\n"),
        None => "slope\ndegenerate\n".to_string(),
    };
    let path = opts.out.join("slope.csv");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(match slope {
        Some(s) => format!("bias sup-norm decays with slope {s:.3} over {} step sizes", sups.len()),
        None => "bias field is numerically zero: slope degenerate".to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_str(text).unwrap()
    }

    fn opts(dir: &Path, threads: usize) -> RunOptions {
        RunOptions { threads, out: dir.to_path_buf(), seed: 7 }
    }

    const UNIFORM: &str = "schema = 1\n[run]\nbudget = 4096\n[image]\nwidth = 8\nheight = 8\n[target]\nkind = \"uniform\"\n";

    #[test]
    fn options_precedence() {
        let c = config(&format!("{UNIFORM}[[method]]\nname = \"pt\"\n").replace("budget = 4096", "budget = 4096\nthreads = 3\nout = \"x\"\nseed = 5"));
        let o = RunOptions::resolve(&c, None, None, None).unwrap();
        assert_eq!(o, RunOptions { threads: 3, out: PathBuf::from("x"), seed: 5 });
        let o = RunOptions::resolve(&c, Some(2), Some("y".into()), Some(9)).unwrap();
        assert_eq!(o, RunOptions { threads: 2, out: PathBuf::from("y"), seed: 9 });
        assert!(RunOptions::resolve(&c, Some(0), None, None).is_err());
    }

    #[test]
    fn method_defaults() {
        let s = MethodSpec::from_config(&MethodConfig::new(MethodKind::Metropolis)).unwrap();
        assert_eq!(s.dynamics, Some(LocalDynamics::Metropolis(MetropolisConfig { stddev: 1e-2, large_step_prob: 0.3 })));
        let s = MethodSpec::from_config(&MethodConfig::new(MethodKind::MalaRestore)).unwrap();
        assert_eq!(s.dynamics, Some(LocalDynamics::Mala(MalaConfig { stddev: 5e-3, large_step_prob: 0.0 })));
        assert_eq!(s.m, 64.0);
        let s = MethodSpec::from_config(&MethodConfig::new(MethodKind::DiffusionRestore)).unwrap();
        assert_eq!(s.dynamics, Some(LocalDynamics::Langevin(LangevinConfig::default())));
    }

    #[test]
    fn render_uniform_pt_is_all_ones() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(&format!("{UNIFORM}[[method]]\nname = \"pt\"\n"));
        cmd_render(&c, &opts(dir.path(), 2)).unwrap();
        let img = Image::from_pfm_bytes(&std::fs::read(dir.path().join("image.pfm")).unwrap()).unwrap();
        assert!(img.pixels.iter().all(|p| *p == crate::image::Rgb::splat(1.0)));
        let stats = std::fs::read_to_string(dir.path().join("stats.csv")).unwrap();
        assert!(stats.starts_with("method,steps,tours,mean_tour_len,kill_frac,wall_ms\npt,4096,"), "{stats}");
        assert!(dir.path().join("image.png").exists());
    }

    #[test]
    fn render_needs_exactly_one_method() {
        let dir = tempfile::tempdir().unwrap();
        assert!(cmd_render(&config(UNIFORM), &opts(dir.path(), 1)).is_err());
    }

    #[test]
    fn bench_two_methods_one_budget_one_seed() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(&format!(
            "{UNIFORM}[[method]]\nname = \"pt\"\n[[method]]\nname = \"mala-restore\"\nchains = 64\n[bench]\nbudgets = [6400]\nseeds = [3]\nquadrature_n = 64\n"
        ));
        let table = cmd_bench(&c, &opts(dir.path(), 1)).unwrap();
        assert!(table.contains("mala-restore"));
        let curves = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        assert_eq!(curves.lines().count(), 3);
        assert!(curves.lines().nth(1).unwrap().starts_with("pt,6400,3,0.0,0.0,"));
        let again = tempfile::tempdir().unwrap();
        cmd_bench(&c, &opts(again.path(), 1)).unwrap();
        assert_eq!(curves, std::fs::read_to_string(again.path().join("curves.csv")).unwrap());
    }

    #[test]
    fn bias_on_uniform_is_degenerate() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(&format!("{UNIFORM}[bias]\ndt_sweep = [1e-2, 1e-3]\ngrid_n = 8\n"));
        let line = cmd_bias(&c, &opts(dir.path(), 1)).unwrap();
        assert!(line.contains("degenerate"));
        assert_eq!(std::fs::read_to_string(dir.path().join("slope.csv")).unwrap(), "slope\ndegenerate\n");
        assert!(dir.path().join("bias_1.png").exists());
        let missing = config(UNIFORM);
        let e = cmd_bias(&missing, &opts(dir.path(), 1)).unwrap_err().to_string();
        assert!(e.contains("dt_sweep"), "{e}");
    }

    #[test]
    fn slope_of_synthetic_sups() {
        let pts = [(1e-2, 3e-2), (1e-3, 3e-3), (1e-4, 3e-4)];
        assert!((bias_slope(&pts).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bias_slope(&[(1e-2, 0.0), (1e-3, 0.0)]), None);
    }
}
