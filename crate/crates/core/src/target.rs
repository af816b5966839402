//! Target densities on the torus: an unnormalized scalar density `p`, an RGB
//! integrand `f` and the score of the penalized log density `ln(p + EPSILON)`.

use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::rng::Philox;
use crate::torus::{min_image, wrap_coord};

/// Penalty added to the density before taking logarithms or reciprocals.
pub const EPSILON: f64 = 1e-8;

/// Central-difference step for targets without an analytic score.
pub const FD_STEP: f64 = 1e-6;

/// Default number of periodic images per side in wrapped Gaussians. For
/// stddev <= 0.1 the first omitted image lies at least 5.5 / 0.1 = 55
/// standard deviations away, far below 1e-15 relative.
pub const DEFAULT_IMAGES: i32 = 5;

/// Largest supported torus dimension.
pub const MAX_DIM: usize = 32;

/// One evaluation of the integrand at a torus point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetEvaluation {
    pub f: Rgb,
    pub p: f64,
    pub pixel: usize,
}

impl TargetEvaluation {
    /// `f / p`, or `None` where the density vanishes.
    pub fn f_over_p(&self) -> Option<Rgb> {
        (self.p > 0.0).then(|| self.f * (1.0 / self.p))
    }

    pub fn penalized(&self) -> f64 {
        self.p + EPSILON
    }
}

/// Maps the first coordinate pair onto a `width x height` pixel grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Column from `x0`, row from `x1`, row-major index.
    #[inline]
    pub fn pixel_of(&self, x0: f64, x1: f64) -> usize {
        let col = ((x0 * self.width as f64) as usize).min(self.width - 1);
        let row = ((x1 * self.height as f64) as usize).min(self.height - 1);
        row * self.width + col
    }

    /// Lower-left corner of pixel `(col, row)` on the torus and its extent.
    pub fn pixel_bounds(&self, col: usize, row: usize) -> ([f64; 2], [f64; 2]) {
        let w = 1.0 / self.width as f64;
        let h = 1.0 / self.height as f64;
        ([col as f64 * w, row as f64 * h], [w, h])
    }
}

/// An unnormalized target density on `[0,1)^d` together with its integrand.
///
/// Implementations are immutable and shared by all chains.
pub trait TargetDensity: Send + Sync {
    fn dim(&self) -> usize;

    fn grid(&self) -> ImageGrid;

    fn eval(&self, x: &[f64]) -> TargetEvaluation;

    /// Writes `grad ln(p + EPSILON)` at `x` into `out`.
    fn score(&self, x: &[f64], out: &mut [f64]) {
        finite_difference_score(self, x, FD_STEP, out);
    }

    /// Exact `∫ p dλ` when known in closed form.
    fn normalization(&self) -> Option<f64> {
        None
    }
}

/// Central differences of `ln(p + EPSILON)` with step `h`, wrapping coordinates.
pub fn finite_difference_score<T: TargetDensity + ?Sized>(
    target: &T,
    x: &[f64],
    h: f64,
    out: &mut [f64],
) {
    let mut probe = [0.0; MAX_DIM];
    let d = x.len();
    assert!(d <= MAX_DIM, "dimension {d} exceeds {MAX_DIM}");
    probe[..d].copy_from_slice(x);
    for i in 0..d {
        probe[i] = wrap_coord(x[i] + h);
        let up = target.eval(&probe[..d]).penalized().ln();
        probe[i] = wrap_coord(x[i] - h);
        let down = target.eval(&probe[..d]).penalized().ln();
        probe[i] = x[i];
        out[i] = (up - down) / (2.0 * h);
    }
}

/// Constant density `p = 1`, `f = (1, 1, 1)`.
#[derive(Clone, Debug)]
pub struct Uniform {
    pub dim: usize,
    pub grid: ImageGrid,
}

impl TargetDensity for Uniform {
    fn dim(&self) -> usize {
        self.dim
    }

    fn grid(&self) -> ImageGrid {
        self.grid
    }

    fn eval(&self, x: &[f64]) -> TargetEvaluation {
        TargetEvaluation {
            f: Rgb::splat(1.0),
            p: 1.0,
            pixel: self.grid.pixel_of(x[0], x[1]),
        }
    }

    fn score(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn normalization(&self) -> Option<f64> {
        Some(1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub stddev: f64,
}

/// Isotropic wrapped Gaussians, `p(x) = Σ_k w_k Π_i Σ_j φ((δ_i + j)/s_k)/s_k`
/// with `δ` the minimal-image offset from the mean and `|j| <= images`.
/// The integrand is grey: `f = (p, p, p)`.
#[derive(Clone, Debug)]
pub struct WrappedGaussianMixture {
    dim: usize,
    grid: ImageGrid,
    components: Vec<GaussianComponent>,
    images: i32,
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
// exp(-x) is exactly zero in f64 beyond this; skipping such terms changes nothing.
const UNDERFLOW: f64 = 746.0;

/// Wrapped 1-D Gaussian density and its derivative at minimal-image offset `delta`.
#[inline]
fn wrapped_normal(delta: f64, s: f64, images: i32) -> (f64, f64) {
    let inv = 1.0 / s;
    let mut g = 0.0;
    let mut dg = 0.0;
    for j in -images..=images {
        let z = (delta + f64::from(j)) * inv;
        let e = 0.5 * z * z;
        if e > UNDERFLOW {
            continue;
        }
        let phi = INV_SQRT_2PI * (-e).exp() * inv;
        g += phi;
        dg -= z * inv * phi;
    }
    (g, dg)
}

impl WrappedGaussianMixture {
    pub fn new(
        dim: usize,
        grid: ImageGrid,
        components: Vec<GaussianComponent>,
        images: i32,
    ) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 || dim > MAX_DIM {
            return Err(Error::Config(format!("mixture dimension {dim} must be even and <= {MAX_DIM}")));
        }
        if components.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        for c in &components {
            if !(c.weight > 0.0 && c.stddev > 0.0) {
                return Err(Error::Config("mixture weights and stddevs must be positive".into()));
            }
            if c.mean.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: c.mean.len(),
                });
            }
            if c.mean.iter().any(|m| !(0.0..1.0).contains(m)) {
                return Err(Error::Config("mixture means must lie in [0, 1)".into()));
            }
        }
        if images < 0 {
            return Err(Error::Config("image truncation must be nonnegative".into()));
        }
        Ok(Self {
            dim,
            grid,
            components,
            images,
        })
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn images(&self) -> i32 {
        self.images
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.components
            .iter()
            .map(|c| {
                c.weight
                    * x.iter()
                        .zip(&c.mean)
                        .map(|(xi, mi)| wrapped_normal(min_image(xi - mi), c.stddev, self.images).0)
                        .product::<f64>()
            })
            .sum()
    }

    /// Density and gradient of `p` (not of `ln p`).
    pub fn density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.dim;
        grad[..d].fill(0.0);
        let mut g = [0.0; MAX_DIM];
        let mut dg = [0.0; MAX_DIM];
        let mut p = 0.0;
        for c in &self.components {
            for i in 0..d {
                (g[i], dg[i]) = wrapped_normal(min_image(x[i] - c.mean[i]), c.stddev, self.images);
            }
            p += c.weight * g[..d].iter().product::<f64>();
            for i in 0..d {
                let others: f64 = (0..d).filter(|&l| l != i).map(|l| g[l]).product();
                grad[i] += c.weight * dg[i] * others;
            }
        }
        p
    }
}

impl TargetDensity for WrappedGaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn grid(&self) -> ImageGrid {
        self.grid
    }

    fn eval(&self, x: &[f64]) -> TargetEvaluation {
        let p = self.density(x);
        TargetEvaluation {
            f: Rgb::splat(p),
            p,
            pixel: self.grid.pixel_of(x[0], x[1]),
        }
    }

    fn score(&self, x: &[f64], out: &mut [f64]) {
        let p = self.density_and_gradient(x, out);
        let inv = 1.0 / (p + EPSILON);
        for o in out[..self.dim].iter_mut() {
            *o *= inv;
        }
    }

    /// Each wrapped Gaussian integrates to one over the torus (up to the
    /// image truncation), so the mass is the total weight.
    fn normalization(&self) -> Option<f64> {
        Some(self.components.iter().map(|c| c.weight).sum())
    }
}

/// Three separated wrapped Gaussians of unequal weight and width, total mass one.
pub fn three_mode_mixture(grid: ImageGrid) -> WrappedGaussianMixture {
    WrappedGaussianMixture::new(
        2,
        grid,
        vec![
            GaussianComponent { weight: 0.45, mean: vec![0.25, 0.3], stddev: 0.06 },
            GaussianComponent { weight: 0.35, mean: vec![0.7, 0.35], stddev: 0.08 },
            GaussianComponent { weight: 0.2, mean: vec![0.5, 0.78], stddev: 0.05 },
        ],
        DEFAULT_IMAGES,
    )
    .expect("valid mixture")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Plain Monte Carlo estimate of `∫ p dλ` from `n` uniform draws.
pub fn estimate_normalization<T: TargetDensity + ?Sized>(
    target: &T,
    rng: &mut Philox,
    n: usize,
) -> Result<NormalizationEstimate> {
    if n == 0 {
        return Err(Error::Config("normalization estimate needs at least one sample".into()));
    }
    let d = target.dim();
    let mut x = vec![0.0; d];
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 0..n {
        x.iter_mut().for_each(|c| *c = rng.uniform());
        let p = target.eval(&x).p;
        let delta = p - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (p - mean);
    }
    let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
    Ok(NormalizationEstimate {
        mean,
        std_error: (var / n as f64).sqrt(),
    })
}

/// Per-pixel mean of `f` by the midpoint rule on an `n x n` grid of cells.
/// Only defined for `d = 2`; `n` must be a multiple of both image dimensions.
pub fn quadrature_reference<T: TargetDensity + ?Sized>(target: &T, n: usize) -> Result<Image> {
    if target.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            found: target.dim(),
        });
    }
    let grid = target.grid();
    if n % grid.width != 0 || n % grid.height != 0 {
        return Err(Error::Config(format!(
            "quadrature resolution {n} must be a multiple of the image size"
        )));
    }
    let mut img = Image::new(grid.width, grid.height);
    let cells_per_pixel = (n / grid.width) * (n / grid.height);
    let h = 1.0 / n as f64;
    for iy in 0..n {
        for ix in 0..n {
            let x = [(ix as f64 + 0.5) * h, (iy as f64 + 0.5) * h];
            let e = target.eval(&x);
            img.pixels[e.pixel] += e.f;
        }
    }
    let scale = 1.0 / cells_per_pixel as f64;
    for px in &mut img.pixels {
        *px = *px * scale;
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::wrap;
    use statrs::function::erf::erf;

    fn grid() -> ImageGrid {
        ImageGrid::new(32, 32)
    }

    fn single(mean: [f64; 2], s: f64) -> WrappedGaussianMixture {
        WrappedGaussianMixture::new(
            2,
            grid(),
            vec![GaussianComponent {
                weight: 1.0,
                mean: mean.to_vec(),
                stddev: s,
            }],
            DEFAULT_IMAGES,
        )
        .unwrap()
    }

    fn symmetric_pair() -> WrappedGaussianMixture {
        WrappedGaussianMixture::new(
            2,
            grid(),
            vec![
                GaussianComponent { weight: 0.5, mean: vec![0.3, 0.2], stddev: 0.05 },
                GaussianComponent { weight: 0.5, mean: vec![0.7, 0.8], stddev: 0.05 },
            ],
            DEFAULT_IMAGES,
        )
        .unwrap()
    }

    #[test]
    fn uniform_target() {
        let u = Uniform { dim: 4, grid: grid() };
        let e = u.eval(&[0.3, 0.6, 0.1, 0.9]);
        assert_eq!(e.p, 1.0);
        assert_eq!(e.f, Rgb::splat(1.0));
        assert_eq!(e.pixel, 19 * 32 + 9);
        let mut s = [1.0; 4];
        u.score(&[0.3, 0.6, 0.1, 0.9], &mut s);
        assert_eq!(s, [0.0; 4]);
        let est = estimate_normalization(&u, &mut Philox::for_chain(0, 0, 0), 17).unwrap();
        assert_eq!(est.mean, 1.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn gaussian_peaks_at_mean() {
        let mu = [0.37, 0.81];
        let t = single(mu, 0.05);
        let at_mean = t.eval(&mu).p;
        for i in 0..101 {
            for j in 0..101 {
                let x = [i as f64 / 101.0, j as f64 / 101.0];
                assert!(t.eval(&x).p <= at_mean);
            }
        }
    }

    #[test]
    fn mirror_symmetry() {
        let t = symmetric_pair();
        for &(a, b) in &[(0.1, 0.2), (0.45, 0.93), (0.0, 0.5), (0.31, 0.77)] {
            let x = [a, b];
            let mirrored = wrap(&[1.0 - a, 1.0 - b]).unwrap();
            assert!((t.eval(&x).p - t.eval(mirrored.coords()).p).abs() < 1e-12);
        }
    }

    #[test]
    fn periodicity() {
        let t = symmetric_pair();
        // Dyadic coordinates survive integer shifts exactly.
        let x = [0.125, 0.4375];
        let shifted = wrap(&[x[0] + 3.0, x[1] - 2.0]).unwrap();
        assert_eq!(t.eval(&x).p, t.eval(shifted.coords()).p);
        // Elsewhere the shift perturbs x by an ulp of the shifted value.
        let x = [0.123, 0.456];
        let shifted = wrap(&[x[0] + 3.0, x[1] - 2.0]).unwrap();
        let a = t.eval(&x).p;
        let b = t.eval(shifted.coords()).p;
        assert!((a - b).abs() <= 1e-11 * a, "{a} {b}");
    }

    #[test]
    fn analytic_score_matches_central_differences() {
        let t = single([0.5, 0.5], 0.05);
        let h = 1e-5;
        for x in [[0.52, 0.49], [0.47, 0.55], [0.6, 0.4]] {
            let mut s = [0.0; 2];
            t.score(&x, &mut s);
            let mut fd = [0.0; 2];
            finite_difference_score(&t, &x, h, &mut fd);
            for i in 0..2 {
                assert!((s[i] - fd[i]).abs() <= 1e-6 * s[i].abs().max(1.0), "{s:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn score_is_finite_where_density_vanishes() {
        struct Clipped(WrappedGaussianMixture);
        impl TargetDensity for Clipped {
            fn dim(&self) -> usize {
                2
            }
            fn grid(&self) -> ImageGrid {
                self.0.grid()
            }
            fn eval(&self, x: &[f64]) -> TargetEvaluation {
                let mut e = self.0.eval(x);
                if x[0] > 0.5 {
                    e.p = 0.0;
                    e.f = Rgb::ZERO;
                }
                e
            }
        }
        let t = Clipped(single([0.5, 0.5], 0.05));
        let mut s = [0.0; 2];
        t.score(&[0.75, 0.5], &mut s);
        assert_eq!(s, [0.0, 0.0]);
        t.score(&[0.5 + 5e-7, 0.5], &mut s);
        assert!(s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mixture_mass_equals_weight_sum() {
        let t = WrappedGaussianMixture::new(
            2,
            grid(),
            vec![
                GaussianComponent { weight: 0.7, mean: vec![0.1, 0.95], stddev: 0.08 },
                GaussianComponent { weight: 1.3, mean: vec![0.6, 0.4], stddev: 0.05 },
            ],
            DEFAULT_IMAGES,
        )
        .unwrap();
        // 256^2 midpoint rule is spectrally accurate for smooth periodic integrands.
        let n = 256;
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                sum += t.density(&[(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64]);
            }
        }
        let quad = sum / (n * n) as f64;
        assert!((quad - 2.0).abs() < 1e-10, "{quad}");
        assert_eq!(t.normalization(), Some(2.0));
        let est = estimate_normalization(&t, &mut Philox::for_chain(4, 0, 0), 1_000_000).unwrap();
        assert!((est.mean - 2.0).abs() < 3.0 * est.std_error, "{est:?}");
    }

    #[test]
    fn std_error_shrinks_like_inverse_sqrt() {
        let t = symmetric_pair();
        let ns = [1_000usize, 10_000, 100_000, 1_000_000];
        let pts: Vec<(f64, f64)> = ns
            .iter()
            .map(|&n| {
                let e = estimate_normalization(&t, &mut Philox::for_chain(9, n as u64, 0), n).unwrap();
                ((n as f64).ln(), e.std_error.ln())
            })
            .collect();
        let slope = crate::metrics::log_log_slope(&pts);
        assert!((slope + 0.5).abs() < 0.1, "slope {slope}");
    }

    fn erf_pixel_mean(t: &WrappedGaussianMixture, col: usize, row: usize) -> f64 {
        let g = t.grid();
        let ([x0, y0], [w, h]) = g.pixel_bounds(col, row);
        let axis = |a: f64, b: f64, m: f64, s: f64| -> f64 {
            (-10..=10)
                .map(|j| {
                    let j = f64::from(j);
                    0.5 * (erf((b - m + j) / (s * 2f64.sqrt())) - erf((a - m + j) / (s * 2f64.sqrt())))
                })
                .sum()
        };
        t.components()
            .iter()
            .map(|c| {
                c.weight * axis(x0, x0 + w, c.mean[0], c.stddev) * axis(y0, y0 + h, c.mean[1], c.stddev)
            })
            .sum::<f64>()
            / (w * h)
    }

    #[test]
    fn quadrature_reference_matches_erf_integrals() {
        let t = symmetric_pair();
        let worst_at = |n: usize| {
            let img = quadrature_reference(&t, n).unwrap();
            let mut worst: f64 = 0.0;
            for row in 0..32 {
                for col in 0..32 {
                    let exact = erf_pixel_mean(&t, col, row);
                    worst = worst.max((img.get(col, row).0[0] - exact).abs());
                }
            }
            worst
        };
        // Midpoint error ~ h^2 |Δp| / 24; the peak Laplacian here is ~2.5e4.
        let (coarse, fine) = (worst_at(256), worst_at(1024));
        assert!(fine < 2e-3, "{fine}");
        // Second order: quartering h divides the error by ~16.
        assert!((coarse / fine - 16.0).abs() < 3.0, "{coarse} {fine}");
        let img = quadrature_reference(&t, 256).unwrap();
        assert!((img.mean() - 1.0).abs() < 1e-10);
        assert!(quadrature_reference(&t, 100).is_err());
    }

    #[test]
    fn construction_errors() {
        assert!(WrappedGaussianMixture::new(3, grid(), vec![], 5).is_err());
        assert!(WrappedGaussianMixture::new(
            2,
            grid(),
            vec![GaussianComponent { weight: 1.0, mean: vec![0.5], stddev: 0.1 }],
            5
        )
        .is_err());
        assert!(WrappedGaussianMixture::new(
            2,
            grid(),
            vec![GaussianComponent { weight: -1.0, mean: vec![0.5, 0.5], stddev: 0.1 }],
            5
        )
        .is_err());
    }
}
