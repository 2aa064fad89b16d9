//! Closed-form model metrics with exact first derivatives. Every
//! verification in the crate draws its test geometry from here.
//!
//! Compact fibers are flat tori or circles. Closed-form metrics with
//! special-holonomy fibers do not exist; flat fibers carry parallel
//! spinors, which is the only property the computations use. The one
//! curved-fiber model (`sphere_fiber_product`) exists to exercise
//! curvature identities where both sides are nonzero, not as a mass model.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Chart, FiberCoord, MetricField};

/// Perturbation pattern for `perturbed_product` models, chosen so that
/// base-trace, base-fiber mixing, and fiber-trace terms of the flux
/// integrand are each exercised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbShape {
    PureTrace,
    BaseFiberMix,
    FiberOnly,
}

/// Model selection plus parameters; the deserialization target of the
/// command-line configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Flat {
        k: usize,
    },
    ProductFlat {
        k: usize,
        fiber_periods: Vec<f64>,
    },
    SchwarzschildSlice {
        m: f64,
    },
    EuclideanRn {
        m: f64,
        q: f64,
    },
    PerturbedProduct {
        k: usize,
        tau: f64,
        epsilon: f64,
        shape: PerturbShape,
        fiber_periods: Vec<f64>,
    },
}

impl ModelSpec {
    pub fn label(&self) -> String {
        match self {
            ModelSpec::Flat { k } => format!("flat(k={k})"),
            ModelSpec::ProductFlat { k, fiber_periods } => {
                format!("product_flat(k={k}, periods={fiber_periods:?})")
            }
            ModelSpec::SchwarzschildSlice { m } => format!("schwarzschild_slice(m={m})"),
            ModelSpec::EuclideanRn { m, q } => format!("euclidean_rn(m={m}, q={q})"),
            ModelSpec::PerturbedProduct {
                k,
                tau,
                epsilon,
                shape,
                fiber_periods,
            } => format!(
                "perturbed_product(k={k}, tau={tau}, eps={epsilon}, shape={shape:?}, periods={fiber_periods:?})"
            ),
        }
    }

    /// Closed-form mass when the model has one (used as an oracle).
    pub fn closed_form_mass(&self) -> Option<f64> {
        match self {
            ModelSpec::Flat { .. } | ModelSpec::ProductFlat { .. } => Some(0.0),
            ModelSpec::SchwarzschildSlice { m } => Some(*m),
            ModelSpec::EuclideanRn { m, q } => rn_mass_closed_form(*m, *q).ok(),
            ModelSpec::PerturbedProduct { .. } => None,
        }
    }
}

fn flat_metric(chart: Chart) -> MetricField {
    let n = chart.dim();
    MetricField::new(chart, Arc::new(move |_: &[f64]| DMatrix::identity(n, n)))
        .with_exact_derivatives(Arc::new(move |_: &[f64], _| DMatrix::zeros(n, n)))
}

/// Flat background with the same chart as `chart` (identity metric).
pub fn flat_background(chart: &Chart) -> MetricField {
    flat_metric(chart.clone())
}

/// Outer horizon radius r+ = m + sqrt(m² + q²).
pub fn rn_outer_radius(m: f64, q: f64) -> Result<f64> {
    let disc = m * m + q * q;
    if disc <= 0.0 {
        return Err(Error::InvalidModel(
            "euclidean_rn requires (m, q) != (0, 0)".into(),
        ));
    }
    let r_plus = m + disc.sqrt();
    if !(r_plus > 0.0) || !r_plus.is_finite() {
        return Err(Error::InvalidModel(format!(
            "euclidean_rn outer radius must be positive (m={m}, q={q} gives r+={r_plus})"
        )));
    }
    Ok(r_plus)
}

/// Circumference of the asymptotic circle fixed by smoothness at the
/// horizon: 2π r+² / (r+ - m).
pub fn rn_circle_length(m: f64, q: f64) -> Result<f64> {
    let r_plus = rn_outer_radius(m, q)?;
    Ok(2.0 * PI * r_plus * r_plus / (r_plus - m))
}

/// Closed-form mass of the analytically continued Reissner-Nordström
/// metric: ½ m (r+ - m) / (2π r+²). Equals m/2 divided by the circle
/// circumference, i.e. it is normalized per unit fiber volume.
pub fn rn_mass_closed_form(m: f64, q: f64) -> Result<f64> {
    let r_plus = rn_outer_radius(m, q)?;
    Ok(0.5 * m * (r_plus - m) / (2.0 * PI * r_plus * r_plus))
}

/// Parameters (m, q) of the member of the fixed-circle family with
/// circumference `l` and mass parameter `m`.
pub fn rn_params_for_circle(l: f64, m: f64) -> Result<(f64, f64)> {
    if !(l > 0.0) {
        return Err(Error::InvalidModel("circle length must be positive".into()));
    }
    let disc = l * l - 8.0 * PI * l * m;
    if disc < 0.0 {
        return Err(Error::InvalidModel(format!(
            "no member of the fixed-circle family: need m <= l/(8π), got m={m}, l={l}"
        )));
    }
    let r_plus = (l + disc.sqrt()) / (4.0 * PI);
    let q2 = r_plus * (r_plus - 2.0 * m);
    if q2 <= 0.0 {
        return Err(Error::InvalidModel(format!(
            "fixed-circle family member has q² = {q2} <= 0"
        )));
    }
    Ok((m, q2.sqrt()))
}

fn build_flat(k: usize) -> Result<MetricField> {
    if k == 0 {
        return Err(Error::InvalidDimension(0));
    }
    let chart = Chart::euclidean(k, 0.1);
    let bg = flat_metric(chart.clone());
    Ok(flat_metric(chart).with_background(bg))
}

fn build_product_flat(k: usize, periods: &[f64]) -> Result<MetricField> {
    if k == 0 {
        return Err(Error::InvalidDimension(0));
    }
    if periods.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::InvalidModel(
            "fiber periods must be positive".into(),
        ));
    }
    let chart = Chart::product_torus(k, 0.1, periods);
    let bg = flat_metric(chart.clone());
    Ok(flat_metric(chart).with_background(bg))
}

fn build_schwarzschild(mass: f64) -> Result<MetricField> {
    if !mass.is_finite() {
        return Err(Error::InvalidModel("mass parameter must be finite".into()));
    }
    let r_min = 0.1 + 0.75 * mass.abs();
    let chart = Chart::euclidean(3, r_min);
    let bg = flat_metric(chart.clone());
    let eval = {
        move |x: &[f64]| {
            let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            let u = 1.0 + mass / (2.0 * r);
            DMatrix::identity(3, 3) * u.powi(4)
        }
    };
    let deriv = {
        move |x: &[f64], c: usize| {
            let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            let u = 1.0 + mass / (2.0 * r);
            let du = -mass * x[c] / (2.0 * r * r * r);
            DMatrix::identity(3, 3) * (4.0 * u.powi(3) * du)
        }
    };
    Ok(MetricField::new(chart, Arc::new(eval))
        .with_exact_derivatives(Arc::new(deriv))
        .with_background(bg)
        .with_claimed_decay(1.0))
}

fn rn_potential(m: f64, q: f64, r: f64) -> f64 {
    1.0 - 2.0 * m / r - q * q / (r * r)
}

fn rn_potential_deriv(m: f64, q: f64, r: f64) -> f64 {
    2.0 * m / (r * r) + 2.0 * q * q / (r * r * r)
}

fn build_euclidean_rn(m: f64, q: f64) -> Result<MetricField> {
    let r_plus = rn_outer_radius(m, q)?;
    let length = rn_circle_length(m, q)?;
    let chart = Chart {
        dim_base: 3,
        fiber: vec![FiberCoord::circle(length)],
        fiber_volume: length,
        r_min: 1.1 * r_plus,
    };
    let bg = flat_metric(chart.clone());
    let eval = {
        move |x: &[f64]| {
            let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            let v = rn_potential(m, q, r);
            let f = 1.0 / v - 1.0;
            let mut g = DMatrix::identity(4, 4);
            for i in 0..3 {
                for j in 0..3 {
                    g[(i, j)] += f * x[i] * x[j] / (r * r);
                }
            }
            g[(3, 3)] = v;
            g
        }
    };
    let deriv = {
        move |x: &[f64], c: usize| {
            let mut out = DMatrix::zeros(4, 4);
            if c == 3 {
                return out;
            }
            let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            let n: Vec<f64> = (0..3).map(|i| x[i] / r).collect();
            let v = rn_potential(m, q, r);
            let dv = rn_potential_deriv(m, q, r);
            let f = 1.0 / v - 1.0;
            let df = -dv / (v * v);
            for i in 0..3 {
                for j in 0..3 {
                    let dn_i = (kron(c, i) - n[c] * n[i]) / r;
                    let dn_j = (kron(c, j) - n[c] * n[j]) / r;
                    out[(i, j)] =
                        df * n[c] * n[i] * n[j] + f * (dn_i * n[j] + n[i] * dn_j);
                }
            }
            out[(3, 3)] = dv * n[c];
            out
        }
    };
    Ok(MetricField::new(chart, Arc::new(eval))
        .with_exact_derivatives(Arc::new(deriv))
        .with_background(bg)
        .with_claimed_decay(1.0))
}

fn kron(a: usize, b: usize) -> f64 {
    if a == b {
        1.0
    } else {
        0.0
    }
}

/// Constant matrix pattern of a perturbation shape.
fn shape_pattern(shape: PerturbShape, k: usize, n: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(n, n);
    match shape {
        PerturbShape::PureTrace => {
            for a in 0..n {
                s[(a, a)] = 1.0;
            }
        }
        PerturbShape::BaseFiberMix => {
            s[(0, k)] = 1.0;
            s[(k, 0)] = 1.0;
        }
        PerturbShape::FiberOnly => {
            s[(k, k)] = 1.0;
        }
    }
    s
}

/// Low-degree angular modulation; its sphere average is 1 and it is exactly
/// integrated by the shipped quadrature rules.
fn angular_factor(k: usize, x: &[f64], r: f64) -> f64 {
    if k < 2 {
        1.0
    } else {
        1.0 + 0.5 * (x[0] / r) * (x[1] / r)
    }
}

fn angular_factor_deriv(k: usize, x: &[f64], r: f64, c: usize) -> f64 {
    if k < 2 || c >= k {
        return 0.0;
    }
    let n0 = x[0] / r;
    let n1 = x[1] / r;
    let nc = x[c] / r;
    let d_n0 = (kron(c, 0) - nc * n0) / r;
    let d_n1 = (kron(c, 1) - nc * n1) / r;
    0.5 * (d_n0 * n1 + n0 * d_n1)
}

fn build_perturbed_product(
    k: usize,
    tau: f64,
    epsilon: f64,
    shape: PerturbShape,
    periods: &[f64],
) -> Result<MetricField> {
    if k == 0 {
        return Err(Error::InvalidDimension(0));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidModel("tau must be positive".into()));
    }
    if periods.is_empty() && shape != PerturbShape::PureTrace {
        return Err(Error::InvalidModel(
            "base_fiber_mix and fiber_only shapes need at least one fiber".into(),
        ));
    }
    if periods.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::InvalidModel(
            "fiber periods must be positive".into(),
        ));
    }
    let r_min = 1.0f64;
    if epsilon.abs() * 1.5 * r_min.powf(-tau) >= 0.9 {
        return Err(Error::InvalidModel(format!(
            "epsilon {epsilon} too large for positive definiteness on the chart"
        )));
    }
    let chart = Chart::product_torus(k, r_min, periods);
    let n = chart.dim();
    let bg = flat_metric(chart.clone());
    let pattern = shape_pattern(shape, k, n);

    let eval = {
        let pattern = pattern.clone();
        move |x: &[f64]| {
            let r = x[..k].iter().map(|v| v * v).sum::<f64>().sqrt();
            let amp = epsilon * r.powf(-tau) * angular_factor(k, x, r);
            DMatrix::identity(n, n) + &pattern * amp
        }
    };
    let deriv = {
        move |x: &[f64], c: usize| {
            if c >= k {
                return DMatrix::zeros(n, n);
            }
            let r = x[..k].iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = angular_factor(k, x, r);
            let ds = angular_factor_deriv(k, x, r, c);
            let radial = -tau * r.powf(-tau - 1.0) * (x[c] / r);
            let amp = epsilon * (radial * s + r.powf(-tau) * ds);
            &pattern * amp
        }
    };
    Ok(MetricField::new(chart, Arc::new(eval))
        .with_exact_derivatives(Arc::new(deriv))
        .with_background(bg)
        .with_claimed_decay(tau))
}

/// Build the metric named by a spec.
pub fn build_model(spec: &ModelSpec) -> Result<MetricField> {
    match spec {
        ModelSpec::Flat { k } => build_flat(*k),
        ModelSpec::ProductFlat { k, fiber_periods } => build_product_flat(*k, fiber_periods),
        ModelSpec::SchwarzschildSlice { m } => build_schwarzschild(*m),
        ModelSpec::EuclideanRn { m, q } => build_euclidean_rn(*m, *q),
        ModelSpec::PerturbedProduct {
            k,
            tau,
            epsilon,
            shape,
            fiber_periods,
        } => build_perturbed_product(*k, *tau, *epsilon, *shape, fiber_periods),
    }
}

/// R^k times a round 2-sphere of the given radius: a product metric with a
/// curved fiber, used to exercise curvature identities with nonzero terms.
/// Not a mass model (the fiber carries no parallel spinor).
pub fn sphere_fiber_product(k: usize, radius: f64) -> MetricField {
    let chart = Chart {
        dim_base: k,
        fiber: vec![
            FiberCoord::interval(0.0, PI),
            FiberCoord::circle(2.0 * PI),
        ],
        fiber_volume: 4.0 * PI * radius * radius,
        r_min: 0.5,
    };
    let n = chart.dim();
    let eval = {
        move |x: &[f64]| {
            let theta = x[k];
            let mut g = DMatrix::identity(n, n);
            g[(k, k)] = radius * radius;
            g[(k + 1, k + 1)] = radius * radius * theta.sin().powi(2);
            g
        }
    };
    let deriv = {
        move |x: &[f64], c: usize| {
            let mut out = DMatrix::zeros(n, n);
            if c == k {
                let theta = x[k];
                out[(k + 1, k + 1)] = 2.0 * radius * radius * theta.sin() * theta.cos();
            }
            out
        }
    };
    let bg = MetricField::new(chart.clone(), Arc::new(eval))
        .with_exact_derivatives(Arc::new(deriv));
    bg.clone().with_background(bg)
}
