//! Convergence metrics: log-linear decay fits, upper envelopes, and rigid
//! alignment of point sets.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
// Shadowed by inherent methods whenever std is linked into the build.
#[allow(unused_imports)]
use num_traits::Float;

/// Values at or below this are treated as having hit the round-off floor and
/// are skipped by the log fits.
pub const LOG_FLOOR: f64 = 1e-14;

fn window<'a>(times: &'a [f64], values: &'a [f64], from: f64, to: f64) -> impl Iterator<Item = (f64, f64)> + 'a {
    times
        .iter()
        .zip(values)
        .filter(move |(&t, &v)| t >= from && t <= to && v > LOG_FLOOR && v.is_finite())
        .map(|(&t, &v)| (t, v.ln()))
}

fn regression(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mt = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mt))
}

/// Least-squares slope of `ln(values)` against `times` on `[from, to]`.
/// A decaying signal yields a negative slope; its magnitude is the rate.
pub fn log_slope(times: &[f64], values: &[f64], from: f64, to: f64) -> Option<f64> {
    let pts: Vec<_> = window(times, values, from, to).collect();
    regression(&pts).map(|(s, _)| s)
}

/// A line `ln v ≤ intercept + slope · t` bounding a signal from above.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEnvelope {
    pub slope: f64,
    pub intercept: f64,
}

impl LogEnvelope {
    pub fn at(&self, t: f64) -> f64 {
        (self.intercept + self.slope * t).exp()
    }
}

/// Upper envelope of `ln(values)` on `[from, to]`.
///
/// The slope is the regression slope of per-window maxima (`windows` equal
/// sub-intervals); the intercept is then raised until every sample lies on
/// or below the line.
pub fn log_upper_envelope(times: &[f64], values: &[f64], from: f64, to: f64, windows: usize) -> Option<LogEnvelope> {
    let pts: Vec<_> = window(times, values, from, to).collect();
    if pts.len() < 2 || windows < 2 {
        return None;
    }
    let width = (to - from) / windows as f64;
    let mut maxima = Vec::with_capacity(windows);
    for w in 0..windows {
        let lo = from + w as f64 * width;
        let hi = lo + width;
        let best = pts
            .iter()
            .filter(|p| p.0 >= lo && (p.0 < hi || (w + 1 == windows && p.0 <= hi)))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some(&p) = best {
            maxima.push(p);
        }
    }
    let (slope, _) = regression(&maxima)?;
    let intercept = pts.iter().map(|p| p.1 - slope * p.0).fold(f64::NEG_INFINITY, f64::max);
    Some(LogEnvelope { slope, intercept })
}

/// The linear map sending `d1 ↦ a1`, `d2 ↦ a2` and `d1 × d2 ↦ a1 × a2`.
/// For exact rigid data this is the rotation relating the two sets.
pub fn align_two_displacements(
    d1: &Vector3<f64>,
    d2: &Vector3<f64>,
    a1: &Vector3<f64>,
    a2: &Vector3<f64>,
) -> Option<Matrix3<f64>> {
    let from = Matrix3::from_columns(&[*d1, *d2, d1.cross(d2)]);
    let to = Matrix3::from_columns(&[*a1, *a2, a1.cross(a2)]);
    from.try_inverse().map(|inv| to * inv)
}

/// Rigid transform `achieved ≈ R · reference + t` fitted from the first two
/// non-collinear displacements out of agent 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidFit {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Largest residual `‖achieved_i - (R reference_i + t)‖`.
    pub residual: f64,
}

pub fn fit_rigid_transform(reference: &[Vector3<f64>], achieved: &[Vector3<f64>]) -> Option<RigidFit> {
    assert_eq!(reference.len(), achieved.len(), "point sets differ in size");
    let n = reference.len();
    let d = |k: usize| reference[k] - reference[0];
    let first = (1..n).find(|&k| d(k).norm() > 1e-9)?;
    let second = (first + 1..n).find(|&k| d(first).cross(&d(k)).norm() > 1e-6 * d(first).norm() * d(k).norm())?;
    let rotation = align_two_displacements(
        &d(first),
        &d(second),
        &(achieved[first] - achieved[0]),
        &(achieved[second] - achieved[0]),
    )?;
    let translation = reference.iter().zip(achieved).map(|(r, a)| a - rotation * r).sum::<Vector3<f64>>() / n as f64;
    let residual =
        reference.iter().zip(achieved).map(|(r, a)| (a - (rotation * r + translation)).norm()).fold(0.0, f64::max);
    Some(RigidFit { rotation, translation, residual })
}
