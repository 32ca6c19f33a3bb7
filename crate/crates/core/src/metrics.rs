//! Displacement errors, KDE negative log-likelihood, best-of-N and map
//! violation rates.

use serde::{Deserialize, Serialize};

use crate::data::raster::MapRaster;
use crate::error::{Error, Result};
use crate::nn::logsumexp;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn check_lengths(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<()> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::Shape {
            op: "displacement_errors",
            expected: format!("{} nonempty steps", gt.len()),
            got: pred.len().to_string(),
        });
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// `(ADE, FDE)` of one trajectory.
pub fn displacement_errors(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<(f64, f64)> {
    check_lengths(pred, gt)?;
    let ade = pred.iter().zip(gt).map(|(p, g)| dist(*p, *g)).sum::<f64>() / pred.len() as f64;
    let fde = dist(pred[pred.len() - 1], gt[gt.len() - 1]);
    Ok((ade, fde))
}

/// Per-step displacement, for per-horizon tables.
pub fn step_errors(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<Vec<f64>> {
    check_lengths(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| dist(*p, *g)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdeConfig {
    /// Minimum kernel standard deviation (m) along any axis.
    pub bandwidth_floor: f64,
    /// Lower clip on the per-step log-density.
    pub log_density_floor: f64,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self {
            bandwidth_floor: 1e-3,
            log_density_floor: -20.0,
        }
    }
}

/// Log-density at `x` of a Gaussian KDE over `points` with Scott's-rule
/// bandwidth `n^{-1/6}·Σ̂` (eigenvalues floored at `bandwidth_floor²`).
pub fn kde_log_density(points: &[[f64; 2]], x: [f64; 2], cfg: &KdeConfig) -> f64 {
    let n = points.len() as f64;
    let mean = points
        .iter()
        .fold([0.0, 0.0], |m, p| [m[0] + p[0] / n, m[1] + p[1] / n]);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mean[0], p[1] - mean[1]);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let denom = (n - 1.0).max(1.0);
    let f2 = n.powf(-1.0 / 3.0);
    let (a, d, b) = (f2 * sxx / denom, f2 * syy / denom, f2 * sxy / denom);
    // eigen-decomposition of [[a, b], [b, d]] to floor the spectrum
    let tr = a + d;
    let disc = ((a - d).powi(2) + 4.0 * b * b).sqrt();
    let floor = cfg.bandwidth_floor * cfg.bandwidth_floor;
    let l1 = ((tr + disc) / 2.0).max(floor);
    let l2 = ((tr - disc) / 2.0).max(floor);
    let theta = 0.5 * (2.0 * b).atan2(a - d);
    let (s, c) = theta.sin_cos();
    let log_det = l1.ln() + l2.ln();
    let terms = points.iter().map(|p| {
        let (dx, dy) = (x[0] - p[0], x[1] - p[1]);
        let u = c * dx + s * dy;
        let w = -s * dx + c * dy;
        -LN_2PI - 0.5 * log_det - 0.5 * (u * u / l1 + w * w / l2)
    });
    logsumexp(terms) - n.ln()
}

/// Mean over timesteps of the clipped negative KDE log-density of the
/// ground truth.
pub fn kde_nll(samples: &[Vec<[f64; 2]>], gt: &[[f64; 2]], cfg: &KdeConfig) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidInput("kde_nll needs at least two samples".into()));
    }
    for s in samples {
        check_lengths(s, gt)?;
    }
    let mut total = 0.0;
    let mut points = Vec::with_capacity(samples.len());
    for (t, g) in gt.iter().enumerate() {
        points.clear();
        points.extend(samples.iter().map(|s| s[t]));
        total -= kde_log_density(&points, *g, cfg).max(cfg.log_density_floor);
    }
    Ok(total / gt.len() as f64)
}

/// Minimum ADE and minimum FDE over the first `n` samples, each minimized
/// independently.
pub fn best_of_n(samples: &[Vec<[f64; 2]>], gt: &[[f64; 2]], n: usize) -> Result<(f64, f64)> {
    if n == 0 || samples.len() < n {
        return Err(Error::InvalidInput(format!(
            "best_of_n needs {n} samples, got {}",
            samples.len()
        )));
    }
    let mut best = (f64::INFINITY, f64::INFINITY);
    for s in &samples[..n] {
        let (a, f) = displacement_errors(s, gt)?;
        best = (best.0.min(a), best.1.min(f));
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViolationConfig {
    pub occupied_channel: usize,
    pub threshold: f32,
    /// Whether leaving the map counts as a violation.
    pub outside_is_violation: bool,
}

impl Default for ViolationConfig {
    fn default() -> Self {
        Self {
            occupied_channel: 0,
            threshold: 0.5,
            outside_is_violation: true,
        }
    }
}

/// Whether the polyline through `points` enters an occupied cell, checking
/// every segment at quarter-cell spacing.
pub fn trajectory_violates(points: &[[f64; 2]], map: &MapRaster, cfg: &ViolationConfig) -> bool {
    let occupied = |p: [f64; 2]| match map.cell_of(p) {
        Some((r, c)) => map.get(cfg.occupied_channel, r, c) >= cfg.threshold,
        None => cfg.outside_is_violation,
    };
    if points.iter().any(|&p| occupied(p)) {
        return true;
    }
    let spacing = map.resolution / 4.0;
    points.windows(2).any(|w| {
        let n = (dist(w[0], w[1]) / spacing).ceil() as usize;
        (1..n).any(|k| {
            let a = k as f64 / n as f64;
            occupied([w[0][0] + a * (w[1][0] - w[0][0]), w[0][1] + a * (w[1][1] - w[0][1])])
        })
    })
}

/// Fraction of trajectories that touch an occupied cell.
pub fn violation_rate(trajectories: &[Vec<[f64; 2]>], map: &MapRaster, cfg: &ViolationConfig) -> Result<f64> {
    if cfg.occupied_channel >= map.channels {
        return Err(Error::InvalidInput(format!(
            "map has {} channels, occupied channel is {}",
            map.channels, cfg.occupied_channel
        )));
    }
    if trajectories.is_empty() {
        return Ok(0.0);
    }
    let bad = trajectories.iter().filter(|t| trajectory_violates(t, map, cfg)).count();
    Ok(bad as f64 / trajectories.len() as f64)
}
