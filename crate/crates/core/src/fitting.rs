//! Least-squares fits on ladders of radii or step sizes, power-law
//! extrapolation of flux integrals, and the deterministic summation
//! used by every quadrature reduction.

/// Slope of the least-squares line through (ln x, ln y).
///
/// For y ~ c * x^p this returns p. Returns `None` when fewer than two
/// samples remain after dropping non-positive entries.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys.iter())
        .filter(|(&x, &y)| x > 0.0 && y > 0.0)
        .map(|(&x, &y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

/// Decay exponent p of y ~ c * x^(-p), fitted on a log-log scale.
pub fn decay_exponent(xs: &[f64], ys: &[f64]) -> Option<f64> {
    log_log_slope(xs, ys).map(|s| -s)
}

/// Result of extrapolating a ladder of values v(x) = v_inf + c * x^(-p).
#[derive(Debug, Clone)]
pub struct PowerLawFit {
    pub value: f64,
    /// Fitted convergence exponent; `None` when the ladder is already
    /// converged to rounding noise and no rate is identifiable.
    pub exponent: Option<f64>,
    /// >= 1; grows when earlier ladder points deviate from the fitted law.
    pub quality_factor: f64,
    /// Conservative error estimate, at least |v(x_max) - v_inf| * quality.
    pub error_estimate: f64,
    /// Set when successive residuals fail to shrink beyond noise.
    pub converged: bool,
}

/// Noise floor below which differences are treated as converged.
pub const CONVERGENCE_NOISE_FLOOR: f64 = 1e-12;

/// Three-point power-law extrapolation on the tail of a geometrically
/// spaced ladder, with the remaining points used to grade fit quality.
///
/// `xs` must be strictly increasing. Values are assumed to follow
/// v(x) = v_inf + c x^(-p) with unknown v_inf, c, p.
pub fn extrapolate_power_law(xs: &[f64], vs: &[f64]) -> PowerLawFit {
    assert_eq!(xs.len(), vs.len());
    let n = vs.len();
    assert!(n >= 3, "power-law extrapolation needs at least 3 points");

    let scale = vs.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let noise = CONVERGENCE_NOISE_FLOOR * scale;

    let (v1, v2, v3) = (vs[n - 3], vs[n - 2], vs[n - 1]);
    let d12 = v1 - v2;
    let d23 = v2 - v3;

    // Already flat to rounding noise: report the last value directly.
    if d12.abs() < noise && d23.abs() < noise {
        return PowerLawFit {
            value: v3,
            exponent: None,
            quality_factor: 1.0,
            error_estimate: noise,
            converged: true,
        };
    }

    let ratio = xs[n - 2] / xs[n - 3];
    let s = d12 / d23;
    if !(s > 1.0) || !((xs[n - 1] / xs[n - 2] - ratio).abs() < 1e-9 * ratio) {
        // Residuals not shrinking (or the ladder is not geometric):
        // flag instead of inventing a limit.
        return PowerLawFit {
            value: v3,
            exponent: None,
            quality_factor: 1.0,
            error_estimate: d12.abs().max(d23.abs()),
            converged: false,
        };
    }

    let p = s.ln() / ratio.ln();
    let v_inf = v3 - d23 / (s - 1.0);

    // Grade the fit by predicting the earlier ladder entries.
    let c = (v3 - v_inf) * xs[n - 1].powf(p);
    let mut rel_dev = 0.0f64;
    for i in 0..n.saturating_sub(3) {
        let pred = v_inf + c * xs[i].powf(-p);
        let denom = (vs[i] - v_inf).abs().max(noise);
        rel_dev = rel_dev.max((pred - vs[i]).abs() / denom);
    }
    let quality = 1.0 + 10.0 * rel_dev.min(10.0);
    let err = (v3 - v_inf).abs() * quality + noise;

    PowerLawFit {
        value: v_inf,
        exponent: Some(p),
        quality_factor: quality,
        error_estimate: err,
        converged: true,
    }
}

/// Pairwise (cascade) summation: deterministic for a fixed element order
/// and far more accurate than naive left-to-right accumulation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}
