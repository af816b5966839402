//! Deterministic quadrature checks of the discretized Langevin kernel in
//! `d = 2`: generators of the continuous diffusion and of the embedded
//! Euler-Maruyama chain, the first-order correction operator, and the
//! adjoint bias field `(L†π̂)/π̂` that the killing rate must absorb.
//!
//! `π̂ = p + EPSILON` throughout, matching the score used by the sampler.

use std::f64::consts::PI;
use std::num::NonZeroUsize;
use std::path::Path;

use gauss_quad::legendre::GaussLegendre;
use png::ColorType;
use rayon::prelude::*;

use crate::dynamics::{rotate, LangevinConfig};
use crate::error::{Error, Result};
use crate::image::write_png_bytes;
use crate::rng::Philox;
use crate::target::{TargetDensity, EPSILON};

/// Half-width of quadrature windows in kernel standard deviations.
/// `exp(-WINDOW^2 / 2)` is below 1e-17.
const WINDOW: f64 = 9.0;

/// Lattice spacing for the adjoint sum, as a fraction of the kernel stddev.
/// The trapezoid rule on a Gaussian of width `s` errs by about
/// `exp(-2π² s² / h²)`, i.e. ~1e-19 here.
const SPACING: f64 = 1.0 / 1.5;

/// One Fourier mode `a cos(2π k·x) + b sin(2π k·x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrigTerm {
    pub k: [i32; 2],
    pub cos: f64,
    pub sin: f64,
}

/// A trigonometric polynomial on the 2-torus with analytic derivatives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrigPoly {
    pub constant: f64,
    pub terms: Vec<TrigTerm>,
}

/// Derivatives of a test function at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: [f64; 2],
    pub hessian: [[f64; 2]; 2],
    pub laplacian: f64,
    pub grad_laplacian: [f64; 2],
    pub bilaplacian: f64,
}

impl TrigPoly {
    pub fn constant(c: f64) -> Self {
        Self { constant: c, terms: vec![] }
    }

    pub fn cos(k: [i32; 2]) -> Self {
        Self { constant: 0.0, terms: vec![TrigTerm { k, cos: 1.0, sin: 0.0 }] }
    }

    /// `terms` random modes with `|k_i| <= kmax` and N(0, 1) coefficients.
    pub fn random(rng: &mut Philox, terms: usize, kmax: i32) -> Self {
        let span = (2 * kmax + 1) as u32;
        let terms = (0..terms)
            .map(|_| {
                let mut k = [0i32; 2];
                while k == [0, 0] {
                    k = [(rng.next_u32() % span) as i32 - kmax, (rng.next_u32() % span) as i32 - kmax];
                }
                let [a, b] = rng.normal_pair();
                TrigTerm { k, cos: a, sin: b }
            })
            .collect();
        let [c, _] = rng.normal_pair();
        Self { constant: c, terms }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.terms.iter().fold(self.constant, |acc, t| {
            let theta = 2.0 * PI * (f64::from(t.k[0]) * x[0] + f64::from(t.k[1]) * x[1]);
            acc + t.cos * theta.cos() + t.sin * theta.sin()
        })
    }

    pub fn jet(&self, x: &[f64]) -> Jet {
        let mut j = Jet { value: self.constant, ..Jet::default() };
        for t in &self.terms {
            let w = [2.0 * PI * f64::from(t.k[0]), 2.0 * PI * f64::from(t.k[1])];
            let theta = w[0] * x[0] + w[1] * x[1];
            let (s, c) = theta.sin_cos();
            let g = t.cos * c + t.sin * s;
            let dg = -t.cos * s + t.sin * c;
            let w2 = w[0] * w[0] + w[1] * w[1];
            j.value += g;
            for a in 0..2 {
                j.grad[a] += w[a] * dg;
                j.grad_laplacian[a] -= w2 * w[a] * dg;
                for b in 0..2 {
                    j.hessian[a][b] -= w[a] * w[b] * g;
                }
            }
            j.laplacian -= w2 * g;
            j.bilaplacian += w2 * w2 * g;
        }
        j
    }
}

fn check_dim<T: TargetDensity + ?Sized>(target: &T) -> Result<()> {
    if target.dim() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, found: target.dim() });
    }
    Ok(())
}

/// Drift `b = (σ² ∇ln π̂ + A ∇ln π̂) / 2`, so one step moves the mean by `Δt b`.
pub fn drift<T: TargetDensity + ?Sized>(cfg: &LangevinConfig, target: &T, x: &[f64]) -> [f64; 2] {
    let mut s = [0.0; 2];
    target.score(x, &mut s);
    let r = rotate(cfg.c_tilde, s);
    let half_var = 0.5 * cfg.stddev * cfg.stddev;
    [(half_var * s[0] + r[0]) / cfg.dt, (half_var * s[1] + r[1]) / cfg.dt]
}

/// `Lφ = b·∇φ + (σ²/2) Δφ`.
pub fn continuous_generator<T: TargetDensity + ?Sized>(
    cfg: &LangevinConfig,
    target: &T,
    phi: &TrigPoly,
    x: &[f64],
) -> f64 {
    let b = drift(cfg, target, x);
    let j = phi.jet(x);
    let sigma2 = cfg.sigma().powi(2);
    b[0] * j.grad[0] + b[1] * j.grad[1] + 0.5 * sigma2 * j.laplacian
}

/// Tensor Gauss-Legendre rule on `[-WINDOW, WINDOW]^2` in standard-normal
/// units, with the normal density folded into the weights.
pub struct KernelRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl KernelRule {
    pub fn new(n: usize) -> Result<Self> {
        if n < 64 {
            return Err(Error::Config(format!("quadrature_n must be at least 64, got {n}")));
        }
        let rule = GaussLegendre::new(NonZeroUsize::new(n).expect("n >= 64"));
        let (nodes, weights) = rule
            .as_node_weight_pairs()
            .iter()
            .map(|&(z, w)| {
                let z = WINDOW * z;
                (z, WINDOW * w * (-0.5 * z * z).exp() / (2.0 * PI).sqrt())
            })
            .unzip();
        Ok(Self { nodes, weights })
    }
}

/// `(1/Δt) [∫ φ(y) k(x, dy) - φ(x)]` for the Euler-Maruyama kernel
/// `k(x, ·) = N(x + Δt b(x), σ² Δt I)`.
///
/// `φ` is periodic, so integrating the unwrapped Gaussian equals integrating
/// the wrapped one. The integrand is `φ(y) - φ(x)`, which makes constants
/// vanish exactly; weights are renormalized to sum to one.
pub fn embedded_generator<T: TargetDensity + ?Sized>(
    cfg: &LangevinConfig,
    target: &T,
    phi: &TrigPoly,
    x: &[f64],
    rule: &KernelRule,
) -> f64 {
    let b = drift(cfg, target, x);
    let mean = [x[0] + cfg.dt * b[0], x[1] + cfg.dt * b[1]];
    let phi_x = phi.value(x);
    let n = rule.nodes.len();
    let total: f64 = rule.weights.iter().sum::<f64>().powi(2);
    // Each mode separates: cos(α_i + β_j) = cos α_i cos β_j - sin α_i sin β_j.
    let mut alpha = vec![(0.0, 0.0); n];
    let mut beta = vec![(0.0, 0.0); n];
    let mut acc = 0.0;
    for t in &phi.terms {
        let w = [2.0 * PI * f64::from(t.k[0]), 2.0 * PI * f64::from(t.k[1])];
        for (i, z) in rule.nodes.iter().enumerate() {
            alpha[i] = (w[0] * (mean[0] + cfg.stddev * z)).sin_cos();
            beta[i] = (w[1] * (mean[1] + cfg.stddev * z)).sin_cos();
        }
        for ((sa, ca), wi) in alpha.iter().zip(&rule.weights) {
            let mut row = 0.0;
            for ((sb, cb), wj) in beta.iter().zip(&rule.weights) {
                let c = ca * cb - sa * sb;
                let s = sa * cb + ca * sb;
                row += wj * (t.cos * c + t.sin * s);
            }
            acc += wi * row;
        }
    }
    (acc / total + phi.constant - phi_x) / cfg.dt
}

/// `Cφ = ½ bᵀ∇²φ b + (σ²/2) b·∇Δφ + (σ⁴/8) Δ²φ`, the `Δt` coefficient of
/// the embedded generator's expansion around `L`.
pub fn correction_operator<T: TargetDensity + ?Sized>(
    cfg: &LangevinConfig,
    target: &T,
    phi: &TrigPoly,
    x: &[f64],
) -> f64 {
    let b = drift(cfg, target, x);
    let j = phi.jet(x);
    let s2 = cfg.sigma().powi(2);
    let mut bhb = 0.0;
    for a in 0..2 {
        for c in 0..2 {
            bhb += b[a] * j.hessian[a][c] * b[c];
        }
    }
    0.5 * bhb
        + 0.5 * s2 * (b[0] * j.grad_laplacian[0] + b[1] * j.grad_laplacian[1])
        + 0.125 * s2 * s2 * j.bilaplacian
}

/// Values on the cell centres of an `n x n` grid; `values[j * n + i]` sits at
/// `((i + ½)/n, (j + ½)/n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub n: usize,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn center(&self, i: usize, j: usize) -> [f64; 2] {
        let h = 1.0 / self.n as f64;
        [(i as f64 + 0.5) * h, (j as f64 + 0.5) * h]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Midpoint-rule integral over the torus.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() / (self.n * self.n) as f64
    }

    /// Columns `x1,x2,value`, one row per cell.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["x1", "x2", "value"]).map_err(io)?;
        for j in 0..self.n {
            for i in 0..self.n {
                let [x1, x2] = self.center(i, j);
                w.serialize((x1, x2, self.values[j * self.n + i])).map_err(io)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Signed grey heatmap: 128 is zero, 0 and 255 are `∓ sup|value|`.
    /// Row 0 of the image is `x2` near 1.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let sup = self.sup_norm();
        let scale = if sup > 0.0 { 127.0 / sup } else { 0.0 };
        let mut data = Vec::with_capacity(self.n * self.n);
        for j in (0..self.n).rev() {
            for i in 0..self.n {
                data.push((128.0 + scale * self.values[j * self.n + i]).round().clamp(0.0, 255.0) as u8);
            }
        }
        write_png_bytes(path, self.n, self.n, ColorType::Grayscale, &data)
    }
}

/// The adjoint generator applied to `π̂` and the bias field derived from it.
#[derive(Clone, Debug)]
pub struct BiasField {
    /// `(L†π̂)(x)`.
    pub adjoint: GridField,
    /// `(L†π̂)(x) / π̂(x)`.
    pub ratio: GridField,
    /// Lattice resolution used for the inner integral.
    pub lattice_n: usize,
}

/// Computes `(L†π̂)(x) = (1/Δt)[∫ k(y, x) π̂(y) dy - π̂(x)]` at the centres of
/// a `grid_n x grid_n` grid.
///
/// The inner integral is a trapezoid sum over a periodic lattice that refines
/// the grid by an odd factor, so every grid centre is a lattice point. The
/// spacing is at most `SPACING` kernel deviations and at least
/// `1/quadrature_n`. Only lattice points within `WINDOW` deviations plus the
/// largest drift displacement are visited; each uses its nearest image.
pub fn adjoint_bias_field<T: TargetDensity + ?Sized>(
    cfg: &LangevinConfig,
    target: &T,
    grid_n: usize,
    quadrature_n: usize,
) -> Result<BiasField> {
    check_dim(target)?;
    if grid_n == 0 || quadrature_n < 64 {
        return Err(Error::Config(format!(
            "grid_n must be positive and quadrature_n at least 64, got {grid_n} and {quadrature_n}"
        )));
    }
    let s = cfg.stddev;
    let wanted = (1.0 / (SPACING * s)).ceil().max(quadrature_n as f64);
    let mut r = (wanted / grid_n as f64).ceil() as usize;
    if r.is_multiple_of(2) {
        r += 1;
    }
    let nf = grid_n * r;
    if nf > 8192 {
        return Err(Error::Config(format!(
            "kernel stddev {s} needs a {nf}^2 lattice; increase dt or stddev"
        )));
    }
    let h = 1.0 / nf as f64;

    // π̂ and the mean displacement Δt b at every lattice point.
    let lattice: Vec<(f64, [f64; 2])> = (0..nf * nf)
        .into_par_iter()
        .map(|idx| {
            let y = [((idx % nf) as f64 + 0.5) * h, ((idx / nf) as f64 + 0.5) * h];
            let b = drift(cfg, target, &y);
            (target.eval(&y).p + EPSILON, [cfg.dt * b[0], cfg.dt * b[1]])
        })
        .collect();
    let max_shift = lattice
        .iter()
        .map(|(_, m)| m[0].abs().max(m[1].abs()))
        .fold(0.0, f64::max);
    let reach = WINDOW * s + max_shift;
    if reach >= 0.5 {
        return Err(Error::Config(format!(
            "kernel reach {reach:.3} exceeds half the torus; nearest-image quadrature is invalid"
        )));
    }
    let radius = (reach / h).ceil() as isize;
    let norm = h * h / (2.0 * PI * s * s);
    let inv_two_var = 1.0 / (2.0 * s * s);
    let half = (r / 2) as isize;

    let adjoint: Vec<f64> = (0..grid_n * grid_n)
        .into_par_iter()
        .map(|cell| {
            let ci = (cell % grid_n) as isize * r as isize + half;
            let cj = (cell / grid_n) as isize * r as isize + half;
            let mut sum = 0.0;
            for dj in -radius..=radius {
                let yj = (cj + dj).rem_euclid(nf as isize) as usize;
                for di in -radius..=radius {
                    let yi = (ci + di).rem_euclid(nf as isize) as usize;
                    let (pi_y, m) = lattice[yj * nf + yi];
                    // x - (y + Δt b(y)) with y = x + (di, dj) h.
                    let ex = -(di as f64) * h - m[0];
                    let ey = -(dj as f64) * h - m[1];
                    sum += (-(ex * ex + ey * ey) * inv_two_var).exp() * pi_y;
                }
            }
            let pi_x = lattice[cj as usize * nf + ci as usize].0;
            (sum * norm - pi_x) / cfg.dt
        })
        .collect();
    let ratio = adjoint
        .iter()
        .enumerate()
        .map(|(cell, a)| {
            let ci = (cell % grid_n) * r + r / 2;
            let cj = (cell / grid_n) * r + r / 2;
            a / lattice[cj * nf + ci].0
        })
        .collect();
    Ok(BiasField {
        adjoint: GridField { n: grid_n, values: adjoint },
        ratio: GridField { n: grid_n, values: ratio },
        lattice_n: nf,
    })
}

/// `⟨L_K φ, π̂⟩` and `⟨φ, L†π̂⟩` by midpoint sums over the field's grid.
pub fn duality_pair<T: TargetDensity + ?Sized>(
    cfg: &LangevinConfig,
    target: &T,
    phi: &TrigPoly,
    field: &BiasField,
    rule: &KernelRule,
) -> (f64, f64) {
    let g = &field.adjoint;
    let n = g.n;
    let w = 1.0 / (n * n) as f64;
    let (left, right) = (0..n * n)
        .into_par_iter()
        .map(|cell| {
            let x = g.center(cell % n, cell / n);
            let pi = target.eval(&x).p + EPSILON;
            (
                embedded_generator(cfg, target, phi, &x, rule) * pi,
                phi.value(&x) * g.values[cell],
            )
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    (left * w, right * w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target::{three_mode_mixture, ImageGrid, Uniform};

    fn uniform() -> Uniform {
        Uniform { dim: 2, grid: ImageGrid::new(8, 8) }
    }

    fn rule() -> KernelRule {
        KernelRule::new(64).unwrap()
    }

    #[test]
    fn trig_jet_matches_central_differences() {
        let phi = TrigPoly::random(&mut Philox::for_chain(1, 0, 0), 3, 2);
        let x = [0.31, 0.72];
        let j = phi.jet(&x);
        let h = 1e-5;
        for a in 0..2 {
            let mut up = x;
            let mut dn = x;
            up[a] += h;
            dn[a] -= h;
            let fd = (phi.value(&up) - phi.value(&dn)) / (2.0 * h);
            assert!((fd - j.grad[a]).abs() < 1e-6 * (1.0 + j.grad[a].abs()));
            let lap = |p: &[f64; 2]| phi.jet(p).laplacian;
            let fd = (lap(&up) - lap(&dn)) / (2.0 * h);
            assert!((fd - j.grad_laplacian[a]).abs() < 1e-5 * (1.0 + j.grad_laplacian[a].abs()));
        }
        assert!((j.laplacian - (j.hessian[0][0] + j.hessian[1][1])).abs() < 1e-9);
        assert!((j.value - phi.value(&x)).abs() < 1e-14);
    }

    #[test]
    fn constants_are_in_every_kernel() {
        let t = three_mode_mixture(ImageGrid::new(8, 8));
        let cfg = LangevinConfig::from_diffusion(0.1, 0.01, 1e-3);
        let one = TrigPoly::constant(1.0);
        for x in [[0.2, 0.3], [0.7, 0.1]] {
            assert_eq!(continuous_generator(&cfg, &t, &one, &x), 0.0);
            assert_eq!(embedded_generator(&cfg, &t, &one, &x, &rule()), 0.0);
            assert_eq!(correction_operator(&cfg, &t, &one, &x), 0.0);
        }
    }

    #[test]
    fn uniform_target_is_pure_diffusion() {
        let sigma = 0.3;
        let cfg = LangevinConfig::from_diffusion(sigma, 5.0, 1e-3);
        let phi = TrigPoly::cos([1, 0]);
        let w2 = (2.0 * PI).powi(2);
        for x in [[0.1, 0.9], [0.45, 0.2]] {
            let c = (2.0 * PI * x[0]).cos();
            let l = continuous_generator(&cfg, &uniform(), &phi, &x);
            assert!((l + 0.5 * sigma * sigma * w2 * c).abs() < 1e-12);
            let k = embedded_generator(&cfg, &uniform(), &phi, &x, &rule());
            let exact = ((-2.0 * PI * PI * sigma * sigma * cfg.dt).exp() - 1.0) / cfg.dt * c;
            assert!((k - exact).abs() < 1e-8, "{k} {exact}");
            let corr = correction_operator(&cfg, &uniform(), &phi, &x);
            assert!((corr - sigma.powi(4) / 8.0 * w2 * w2 * c).abs() < 1e-10);
        }
        let still = LangevinConfig { stddev: 0.0, c_tilde: 0.0, dt: 1e-3 };
        assert_eq!(correction_operator(&still, &uniform(), &phi, &[0.3, 0.4]), 0.0);
    }

    #[test]
    fn embedded_generator_tends_to_continuous_linearly() {
        let t = uniform();
        let phi = TrigPoly::cos([1, 0]);
        let x = [0.1, 0.5];
        let pts: Vec<(f64, f64)> = [1e-1, 1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&dt| {
                let cfg = LangevinConfig::from_diffusion(0.3, 0.0, dt);
                let gap = embedded_generator(&cfg, &t, &phi, &x, &rule()) - continuous_generator(&cfg, &t, &phi, &x);
                (dt.ln(), gap.abs().ln())
            })
            .collect();
        let slope = crate::metrics::log_log_slope(&pts);
        assert!((slope - 1.0).abs() < 0.15, "{slope}");
    }

    #[test]
    fn correction_matches_richardson_coefficient() {
        let t = three_mode_mixture(ImageGrid::new(8, 8));
        let cfg = LangevinConfig::from_diffusion(0.1, 0.01, 1e-3);
        let phi = TrigPoly { constant: 0.0, terms: vec![TrigTerm { k: [1, 0], cos: 0.0, sin: 1.0 / (2.0 * PI) }] };
        let x = [0.3, 0.35];
        let extracted =
            (embedded_generator(&cfg, &t, &phi, &x, &rule()) - continuous_generator(&cfg, &t, &phi, &x)) / cfg.dt;
        let c = correction_operator(&cfg, &t, &phi, &x);
        assert!((extracted / c - 1.0).abs() < 0.05, "{extracted} {c}");
    }

    #[test]
    fn uniform_bias_field_vanishes() {
        let cfg = LangevinConfig { stddev: 0.02, c_tilde: 0.0, dt: 1e-3 };
        let f = adjoint_bias_field(&cfg, &uniform(), 16, 64).unwrap();
        assert!(f.ratio.sup_norm() < 1e-8, "{}", f.ratio.sup_norm());
    }

    #[test]
    fn mixture_bias_field_decays_linearly_and_integrates_to_zero() {
        let t = three_mode_mixture(ImageGrid::new(8, 8));
        // The midpoint integral needs a grid fine enough for the fourth
        // derivatives of the narrowest mode; 32 cells per side is not.
        let sup = |dt: f64| {
            let cfg = LangevinConfig::from_diffusion(0.1, 0.01, dt);
            let f = adjoint_bias_field(&cfg, &t, 128, 64).unwrap();
            assert!(f.adjoint.integral().abs() < 1e-8 * f.adjoint.sup_norm(), "{}", f.adjoint.integral());
            f.ratio.sup_norm()
        };
        let ratio = sup(1e-3) / sup(1e-4);
        assert!((ratio - 10.0).abs() < 3.0, "{ratio}");
    }

    #[test]
    fn duality_holds_on_random_trig_functions() {
        let t = three_mode_mixture(ImageGrid::new(8, 8));
        let cfg = LangevinConfig::from_diffusion(0.1, 0.01, 1e-3);
        let field = adjoint_bias_field(&cfg, &t, 256, 64).unwrap();
        let mut rng = Philox::for_chain(4, 0, 0);
        for _ in 0..5 {
            let phi = TrigPoly::random(&mut rng, 3, 2);
            let (l, r) = duality_pair(&cfg, &t, &phi, &field, &rule());
            assert!((l - r).abs() <= 1e-6 * l.abs().max(r.abs()), "{l} {r}");
        }
    }

    #[test]
    fn bias_field_rejects_bad_input() {
        let cfg = LangevinConfig::from_diffusion(0.1, 0.0, 1e-3);
        let four = Uniform { dim: 4, grid: ImageGrid::new(2, 2) };
        assert!(adjoint_bias_field(&cfg, &four, 8, 64).is_err());
        assert!(adjoint_bias_field(&cfg, &uniform(), 8, 16).is_err());
        assert!(KernelRule::new(10).is_err());
    }

    #[test]
    fn grid_field_outputs() {
        let f = GridField { n: 2, values: vec![1.0, -1.0, 0.0, 0.5] };
        let dir = tempfile::tempdir().unwrap();
        f.write_csv(&dir.path().join("f.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("f.csv")).unwrap();
        assert_eq!(text.lines().next(), Some("x1,x2,value"));
        assert_eq!(text.lines().nth(2), Some("0.75,0.25,-1.0"));
        f.write_png(&dir.path().join("f.png")).unwrap();
        assert!(std::fs::metadata(dir.path().join("f.png")).unwrap().len() > 0);
    }
}
