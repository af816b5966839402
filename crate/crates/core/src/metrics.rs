//! Image error metrics and convergence-curve bookkeeping.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::restore::thread_pool;

/// Offset in the MAPE denominator `r + 1e-2`.
pub const MAPE_OFFSET: f64 = 1e-2;
/// Offset in the MRSE denominator `r^2 + 1e-2`.
pub const MRSE_OFFSET: f64 = 1e-2;

/// Errors averaged over pixels and channels, in linear radiance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ErrorReport {
    pub mae: f64,
    pub mse: f64,
    pub mrse: f64,
    pub mape: f64,
}

pub fn compare(test: &Image, reference: &Image) -> Result<ErrorReport> {
    if test.width != reference.width || test.height != reference.height {
        return Err(Error::DimensionMismatch {
            expected: reference.pixel_count(),
            found: test.pixel_count(),
        });
    }
    let mut r = ErrorReport::default();
    for (t, f) in test.pixels.iter().zip(&reference.pixels) {
        for (tc, rc) in t.0.iter().zip(f.0) {
            let e = tc - rc;
            r.mae += e.abs();
            r.mse += e * e;
            r.mrse += e * e / (rc * rc + MRSE_OFFSET);
            r.mape += e.abs() / (rc + MAPE_OFFSET);
        }
    }
    let n = (3 * test.pixel_count()) as f64;
    r.mae /= n;
    r.mse /= n;
    r.mrse /= n;
    r.mape /= n;
    Ok(r)
}

/// Least-squares slope of `y` on `x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub method: String,
    pub budget: u64,
    pub seed: u64,
    pub mae: f64,
    pub mse: f64,
    pub mrse: f64,
    pub mape: f64,
}

/// Runs `run(budget, seed)` for every pair, compares with `reference`, and
/// returns rows sorted by (budget, seed). Pairs are evaluated in parallel.
pub fn convergence_curve<F>(
    method: &str,
    reference: &Image,
    budgets: &[u64],
    seeds: &[u64],
    threads: usize,
    run: F,
) -> Result<Vec<CurveRow>>
where
    F: Fn(u64, u64) -> Result<Image> + Sync,
{
    if budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("budgets must be ascending".into()));
    }
    let pairs: Vec<(u64, u64)> = budgets
        .iter()
        .flat_map(|&b| seeds.iter().map(move |&s| (b, s)))
        .collect();
    let mut rows: Vec<CurveRow> = thread_pool(threads)?.install(|| {
        pairs
            .par_iter()
            .map(|&(budget, seed)| {
                let img = run(budget, seed)?;
                let e = compare(&img, reference)?;
                Ok(CurveRow {
                    method: method.to_string(),
                    budget,
                    seed,
                    mae: e.mae,
                    mse: e.mse,
                    mrse: e.mrse,
                    mape: e.mape,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    rows.sort_by_key(|r| (r.budget, r.seed));
    Ok(rows)
}

/// Writes rows with the header `method,budget,seed,mae,mse,mrse,mape`.
pub fn write_curve_csv(rows: &[CurveRow], path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    if rows.is_empty() {
        w.write_record(["method", "budget", "seed", "mae", "mse", "mrse", "mape"])
            .map_err(io)?;
    }
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Rgb;
    use proptest::prelude::*;

    #[test]
    fn identical_images_have_zero_error() {
        let img = Image::filled(4, 3, Rgb([0.2, 1.5, 3.0]));
        assert_eq!(compare(&img, &img).unwrap(), ErrorReport::default());
    }

    #[test]
    fn constant_offset_on_black_reference() {
        let r = compare(&Image::filled(2, 2, Rgb::splat(0.01)), &Image::new(2, 2)).unwrap();
        assert!((r.mae - 0.01).abs() < 1e-15);
        assert!((r.mse - 1e-4).abs() < 1e-15);
        assert!((r.mape - 1.0).abs() < 1e-12);
        assert!((r.mrse - 1e-2).abs() < 1e-12);
    }

    #[test]
    fn inverted_checkerboard() {
        let mut a = Image::new(4, 4);
        let mut b = Image::new(4, 4);
        for i in 0..16 {
            let on = (i % 4 + i / 4) % 2 == 0;
            a.pixels[i] = Rgb::splat(if on { 1.0 } else { 0.0 });
            b.pixels[i] = Rgb::splat(if on { 0.0 } else { 1.0 });
        }
        let r = compare(&a, &b).unwrap();
        assert_eq!((r.mae, r.mse), (1.0, 1.0));
    }

    #[test]
    fn dimension_mismatch() {
        assert!(compare(&Image::new(2, 2), &Image::new(2, 3)).is_err());
    }

    proptest! {
        #[test]
        fn positive_noise_increases_mae(vals in prop::collection::vec(0.0f64..10.0, 12), a in 1e-6f64..1.0) {
            let reference = Image { width: 2, height: 2, pixels: vals.chunks(3).map(|c| Rgb([c[0], c[1], c[2]])).collect() };
            let noisy = Image { width: 2, height: 2, pixels: reference.pixels.iter().map(|p| *p + Rgb::splat(a)).collect() };
            let e = compare(&noisy, &reference).unwrap();
            prop_assert!(e.mae > 0.0);
            prop_assert!(e.mse > 0.0 && e.mrse > 0.0 && e.mape > 0.0);
        }
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = (1..6).map(|k| (f64::from(k), -2.0 * f64::from(k) + 3.0)).collect();
        assert!((log_log_slope(&pts) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn curve_rows_are_sorted_and_aligned() {
        let reference = Image::filled(2, 2, Rgb::splat(1.0));
        let run = |b: u64, s: u64| Ok(Image::filled(2, 2, Rgb::splat(1.0 + (s as f64) / b as f64)));
        let rows = convergence_curve("a", &reference, &[10, 20], &[3, 1], 2, run).unwrap();
        let keys: Vec<(u64, u64)> = rows.iter().map(|r| (r.budget, r.seed)).collect();
        assert_eq!(keys, vec![(10, 1), (10, 3), (20, 1), (20, 3)]);
        assert!(convergence_curve("a", &reference, &[20, 10], &[1], 1, run).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        write_curve_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("method,budget,seed,mae,mse,mrse,mape\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
