//! Power-law fits `y ~ c x^slope` by least squares on logs.

use std::path::Path;

use serde::Serialize;

use super::run::read_trace_column;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `(ln x, ln y)` pairs the fit used.
    pub points: Vec<(f64, f64)>,
}

/// OLS of `ln(y - floor)` on `ln x`. Needs at least 3 points with distinct
/// `x`; every `x` and `y - floor` must be positive.
pub fn fit_power_law(xs: &[f64], ys: &[f64], floor: Option<f64>) -> Result<RateFit> {
    if xs.len() != ys.len() {
        return Err(Error::argument(format!(
            "x has {} values, y has {}",
            xs.len(),
            ys.len()
        )));
    }
    let floor = floor.unwrap_or(0.0);
    let mut points = Vec::with_capacity(xs.len());
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let y = y - floor;
        if !(x > 0.0) || !(y > 0.0) || !x.is_finite() || !y.is_finite() {
            return Err(Error::Data(format!(
                "point {i}: need positive finite values, got x = {x}, y - floor = {y}"
            )));
        }
        points.push((x.ln(), y.ln()));
    }
    if points.len() < 3 {
        return Err(Error::Data(format!("need at least 3 points, got {}", points.len())));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::Data("all x values are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    // A constant y is fitted exactly.
    let r_squared = if syy <= f64::EPSILON * n {
        1.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        points,
    })
}

/// Pools `(x, y)` rows from trace CSVs. Rows with an empty cell in either
/// column are skipped.
pub fn rate_fit(
    paths: &[impl AsRef<Path>],
    x_col: &str,
    y_col: &str,
    floor: Option<f64>,
) -> Result<RateFit> {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for path in paths {
        let x = read_trace_column(path.as_ref(), x_col)?;
        let y = read_trace_column(path.as_ref(), y_col)?;
        for (a, b) in x.into_iter().zip(y) {
            if let (Some(a), Some(b)) = (a, b) {
                xs.push(a);
                ys.push(b);
            }
        }
    }
    fit_power_law(&xs, &ys, floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_inverse() {
        let fit = fit_power_law(&[2.0, 4.0, 8.0], &[0.5, 0.25, 0.125], None).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!((fit.intercept).abs() < 1e-12);
    }

    #[test]
    fn constant_has_zero_slope() {
        let fit = fit_power_law(&[1.0, 10.0, 100.0], &[3.0, 3.0, 3.0], None).unwrap();
        assert!(fit.slope.abs() < 1e-12);
        assert!((0.0..=1.0).contains(&fit.r_squared));
    }

    #[test]
    fn noisy_square_root() {
        let mut rng = crate::rng::RngStream::new(4);
        let xs: Vec<f64> = (4..16).map(|e| 2f64.powi(e)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| x.powf(-0.5) * (1.0 + 0.1 * (rng.uniform() - 0.5)))
            .collect();
        let fit = fit_power_law(&xs, &ys, None).unwrap();
        assert!((-0.6..=-0.4).contains(&fit.slope), "{}", fit.slope);
    }

    #[test]
    fn floor_subtraction() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 + 1.0 / x).collect();
        let fit = fit_power_law(&xs, &ys, Some(0.5)).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_data() {
        assert!(matches!(
            fit_power_law(&[1.0, 2.0, 3.0], &[1.0, 0.0, 1.0], None),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            fit_power_law(&[1.0, 2.0], &[1.0, 2.0], None),
            Err(Error::Data(_))
        ));
        assert!(fit_power_law(&[1.0, 2.0, 3.0], &[1.0, 0.4, 0.2], Some(0.3)).is_err());
    }
}
