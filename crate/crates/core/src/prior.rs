//! Probability of being active as a function of setwise distance to the
//! labelled actives.
//!
//! The curve is `base_rate · p_active(δ) / p_background(δ)`, where both
//! densities are Gaussian kernel density estimates over the samples from
//! [`crate::sampler`] with a shared bandwidth. The bandwidth is calibrated so
//! that the curve reaches 1 at δ = 0, then the curve is clipped to `[0, 1]`
//! and projected onto non-increasing sequences.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabelledSet;
use crate::error::{Error, Result};
use crate::isotonic;

pub const GAMMA_MIN: f64 = 1e-3;
pub const GAMMA_MAX: f64 = 1.0;
const GAMMA_TOL: f64 = 1e-4;
const MAX_BISECTIONS: usize = 60;
/// Background densities below this are treated as unsupported.
const MIN_BACKGROUND_DENSITY: f64 = 1e-12;

/// `n` equispaced points on `[0, 1]`.
pub fn unit_grid(n: usize) -> Vec<f64> {
    assert!(n >= 2);
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Default evaluation grid: 101 points.
pub fn default_grid() -> Vec<f64> {
    unit_grid(101)
}

fn ln_kde_at(samples: &[f64], gamma: f64, x: f64) -> f64 {
    // log-sum-exp of -(x - s)^2 / (2 γ^2)
    let inv = 1.0 / (2.0 * gamma * gamma);
    let max = samples
        .iter()
        .map(|s| -(x - s) * (x - s) * inv)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = samples.iter().map(|s| (-(x - s) * (x - s) * inv - max).exp()).sum();
    max + sum.ln() - (samples.len() as f64).ln() - gamma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Natural log of the Gaussian KDE at each grid point.
pub fn kde_ln_eval(samples: &[f64], gamma: f64, grid: &[f64]) -> Result<Vec<f64>> {
    check_kde_args(samples, gamma)?;
    Ok(grid.par_iter().map(|&x| ln_kde_at(samples, gamma, x)).collect())
}

/// Gaussian kernel density `(1 / (n γ √(2π))) Σ exp(-(x - s)² / (2γ²))` at
/// each grid point.
pub fn kde_eval(samples: &[f64], gamma: f64, grid: &[f64]) -> Result<Vec<f64>> {
    Ok(kde_ln_eval(samples, gamma, grid)?.into_iter().map(f64::exp).collect())
}

fn check_kde_args(samples: &[f64], gamma: f64) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::domain("kernel density of an empty sample"));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::domain(format!("bandwidth must be positive, got {gamma}")));
    }
    Ok(())
}

/// Silverman's rule-of-thumb bandwidth.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    (0.9 * spread * n.powf(-0.2)).clamp(GAMMA_MIN, GAMMA_MAX)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BaseRateMode {
    /// `n / n'` from the screened count.
    Counts,
    /// Ratio of background to active density at δ = 0 with the given
    /// bandwidth (Silverman's rule on the active sample when absent).
    Limit { gamma: Option<f64> },
    /// Externally supplied value.
    Fixed { value: f64 },
}

/// Prior probability that a random compound is active.
pub fn estimate_base_rate(
    mode: BaseRateMode,
    labelled: &LabelledSet,
    active: Option<&[f64]>,
    background: Option<&[f64]>,
) -> Result<f64> {
    let rate = match mode {
        BaseRateMode::Counts => {
            let screened = labelled
                .screened_count
                .ok_or_else(|| Error::config("counts base rate needs screened_count"))?;
            labelled.len() as f64 / screened as f64
        }
        BaseRateMode::Limit { gamma } => {
            let (active, background) = active
                .zip(background)
                .ok_or_else(|| Error::config("limit base rate needs both distance samples"))?;
            let gamma = gamma.unwrap_or_else(|| silverman_bandwidth(active));
            let ln_a = kde_ln_eval(active, gamma, &[0.0])?[0];
            let ln_b = kde_ln_eval(background, gamma, &[0.0])?[0];
            (ln_b - ln_a).exp()
        }
        BaseRateMode::Fixed { value } => value,
    };
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::degenerate(format!("base rate {rate} is outside (0, 1)")));
    }
    Ok(rate)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub gamma: f64,
    /// False when no bandwidth in range brings the curve to 1 at δ = 0; the
    /// returned bandwidth then minimizes the gap.
    pub converged: bool,
    /// `base_rate · f̂(0) - 1` at the returned bandwidth.
    pub residual: f64,
    pub iterations: usize,
}

/// `ln(base_rate · f̂(0))`; zero at the calibrated bandwidth.
fn ln_prob_at_zero(active: &[f64], background: &[f64], base_rate: f64, gamma: f64) -> f64 {
    base_rate.ln() + (ln_kde_at(active, gamma, 0.0) - ln_kde_at(background, gamma, 0.0))
}

/// A user-supplied bandwidth, with the residual it leaves at δ = 0.
pub fn fixed_bandwidth(active: &[f64], background: &[f64], base_rate: f64, gamma: f64) -> Result<Calibration> {
    check_kde_args(active, gamma)?;
    check_kde_args(background, gamma)?;
    Ok(Calibration {
        gamma,
        converged: true,
        residual: ln_prob_at_zero(active, background, base_rate, gamma).exp() - 1.0,
        iterations: 0,
    })
}

/// Bisection for the bandwidth at which the prior curve equals 1 at δ = 0.
pub fn calibrate_bandwidth(active: &[f64], background: &[f64], base_rate: f64) -> Result<Calibration> {
    check_kde_args(active, 1.0)?;
    check_kde_args(background, 1.0)?;
    let h = |g: f64| ln_prob_at_zero(active, background, base_rate, g);
    let residual = |g: f64| (h(g)).exp() - 1.0;

    let (mut lo, mut hi) = (GAMMA_MIN, GAMMA_MAX);
    let (h_lo, h_hi) = (h(lo), h(hi));
    if h_lo == 0.0 {
        return Ok(Calibration { gamma: lo, converged: true, residual: 0.0, iterations: 0 });
    }
    if h_lo.signum() != h_hi.signum() && h_hi != 0.0 && h_lo.is_finite() && h_hi.is_finite() {
        let lo_positive = h_lo > 0.0;
        let mut iterations = 0;
        while hi - lo > GAMMA_TOL && iterations < MAX_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            let hm = h(mid);
            iterations += 1;
            if hm == 0.0 {
                lo = mid;
                hi = mid;
                break;
            }
            if (hm > 0.0) == lo_positive {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let gamma = 0.5 * (lo + hi);
        return Ok(Calibration {
            gamma,
            converged: true,
            residual: residual(gamma),
            iterations,
        });
    }

    // No sign change: scan a log-spaced grid for the smallest gap. Ties keep
    // the smallest bandwidth.
    let steps = 200;
    let mut best = (GAMMA_MIN, f64::INFINITY);
    for i in 0..=steps {
        let g = GAMMA_MIN * (GAMMA_MAX / GAMMA_MIN).powf(i as f64 / steps as f64);
        let r = residual(g).abs();
        if r < best.1 {
            best = (g, r);
        }
    }
    log::warn!(
        "bandwidth calibration found no root in [{GAMMA_MIN}, {GAMMA_MAX}]; using gamma={} (|residual| {})",
        best.0,
        best.1
    );
    Ok(Calibration {
        gamma: best.0,
        converged: false,
        residual: residual(best.0),
        iterations: steps + 1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorCurve {
    pub grid: Vec<f64>,
    pub prob: Vec<f64>,
    /// Unprojected `base_rate · f̂(δ)` (before clipping), for diagnostics.
    pub raw: Vec<f64>,
    pub gamma: f64,
    pub base_rate: f64,
    /// Grid indices where the background density was unsupported.
    pub masked: Vec<usize>,
    pub n_active: usize,
    pub n_background: usize,
    #[serde(default)]
    pub flags: Vec<String>,
}

/// Evaluate, clip and monotonize the density-ratio curve on `grid`.
pub fn fit_prior_curve(
    active: &[f64],
    background: &[f64],
    gamma: f64,
    base_rate: f64,
    grid: &[f64],
) -> Result<PriorCurve> {
    if grid.len() < 2 || grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] < 0.0 || grid[grid.len() - 1] > 1.0 {
        return Err(Error::domain("prior grid must be strictly increasing within [0, 1]"));
    }
    if !(base_rate > 0.0 && base_rate < 1.0) {
        return Err(Error::domain(format!("base rate {base_rate} is outside (0, 1)")));
    }
    let ln_a = kde_ln_eval(active, gamma, grid)?;
    let ln_b = kde_ln_eval(background, gamma, grid)?;
    let ln_floor = MIN_BACKGROUND_DENSITY.ln();

    let mut raw = Vec::with_capacity(grid.len());
    let mut masked = Vec::new();
    for (i, (a, b)) in ln_a.iter().zip(&ln_b).enumerate() {
        if *b < ln_floor {
            masked.push(i);
        }
        raw.push((base_rate.ln() + (a - b)).exp());
    }
    let kept: Vec<usize> = (0..grid.len()).filter(|i| !masked.contains(i)).collect();
    if kept.is_empty() {
        return Err(Error::degenerate("background density unsupported on the whole grid"));
    }
    let mut flags = Vec::new();
    if !masked.is_empty() {
        log::warn!("prior curve: {} grid points masked for unsupported background", masked.len());
        flags.push(format!("masked {} grid points", masked.len()));
    }

    let clipped: Vec<f64> = kept.iter().map(|&i| raw[i].clamp(0.0, 1.0)).collect();
    let projected = isotonic::non_increasing(&clipped, &vec![1.0; clipped.len()]);
    let kept_grid: Vec<f64> = kept.iter().map(|&i| grid[i]).collect();
    let prob = grid.iter().map(|&x| interpolate(&kept_grid, &projected, x)).collect();

    Ok(PriorCurve {
        grid: grid.to_vec(),
        prob,
        raw,
        gamma,
        base_rate,
        masked,
        n_active: active.len(),
        n_background: background.len(),
        flags,
    })
}

/// Piecewise-linear interpolation with constant extrapolation.
pub(crate) fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    debug_assert!(!xs.is_empty() && xs.len() == ys.len());
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let hi = xs.partition_point(|&g| g <= x);
    let lo = hi - 1;
    let t = (x - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] + t * (ys[hi] - ys[lo])
}

impl PriorCurve {
    /// `P[active | d(x, L) = δ]`.
    pub fn prob_active(&self, delta: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::domain(format!("distance {delta} outside [0, 1]")));
        }
        Ok(interpolate(&self.grid, &self.prob, delta).clamp(0.0, 1.0))
    }

    /// CSV `delta,prob` plus a JSON metadata sidecar.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("prior.csv"))?;
        w.write_record(["delta", "prob"])?;
        for (d, p) in self.grid.iter().zip(&self.prob) {
            w.write_record([format!("{d}"), format!("{p}")])?;
        }
        w.flush()?;
        let mut f = std::fs::File::create(dir.join("prior.json"))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(dir.join("prior.json"))?)?)
    }
}

pub fn prob_active(curve: &PriorCurve, delta: f64) -> Result<f64> {
    curve.prob_active(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn kernel_peak() {
        let g = 0.1;
        let d = kde_eval(&[0.5], g, &[0.5]).unwrap()[0];
        assert!((d - 1.0 / (g * (2.0 * std::f64::consts::PI).sqrt())).abs() < 1e-12);
    }

    #[test]
    fn kde_is_symmetric() {
        let grid: Vec<f64> = (0..20).map(|i| i as f64 * 0.01).collect();
        let left: Vec<f64> = grid.iter().map(|t| 0.5 - t).collect();
        let right: Vec<f64> = grid.iter().map(|t| 0.5 + t).collect();
        let a = kde_eval(&[0.4, 0.6], 0.07, &left).unwrap();
        let b = kde_eval(&[0.4, 0.6], 0.07, &right).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kde_integrates_to_one() {
        // trapezoid quadrature on a wide, fine grid
        let samples = [0.1, 0.15, 0.4, 0.9, 0.95];
        let h = 1e-4;
        let grid: Vec<f64> = (0..=20_000).map(|i| -0.5 + i as f64 * h).collect();
        let dens = kde_eval(&samples, 0.05, &grid).unwrap();
        let integral: f64 = dens.windows(2).map(|w| 0.5 * (w[0] + w[1]) * h).sum();
        assert!((integral - 1.0).abs() < 1e-3, "{integral}");
    }

    #[test]
    fn kde_rejects_bad_arguments() {
        assert!(kde_eval(&[], 0.1, &[0.0]).is_err());
        assert!(kde_eval(&[0.1], 0.0, &[0.0]).is_err());
    }

    fn set_with(n: usize, screened: Option<u64>) -> LabelledSet {
        use crate::dataset::LabelledCompound;
        use crate::fingerprint::Fingerprint;
        let compounds = (0..n)
            .map(|i| LabelledCompound {
                id: format!("c{i}"),
                fp: Fingerprint::zeros(8).unwrap(),
                activity: 1.0,
            })
            .collect();
        LabelledSet {
            compounds,
            l_min: 0.0,
            screened_count: screened,
        }
    }

    #[test]
    fn counts_base_rate() {
        let r = estimate_base_rate(BaseRateMode::Counts, &set_with(1, Some(2)), None, None).unwrap();
        assert_eq!(r, 0.5);
        let err = estimate_base_rate(BaseRateMode::Counts, &set_with(1, None), None, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = estimate_base_rate(BaseRateMode::Limit { gamma: None }, &set_with(1, None), None, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn identical_samples_return_smallest_bandwidth() {
        let s: Vec<f64> = (0..50).map(|i| 0.3 + 0.01 * i as f64).collect();
        let c = calibrate_bandwidth(&s, &s, 0.01).unwrap();
        assert!(!c.converged);
        assert_eq!(c.gamma, GAMMA_MIN);
        assert!((c.residual - (0.01 - 1.0)).abs() < 1e-9);
    }

    #[test]
    fn calibration_brings_curve_to_one_at_zero() {
        let mut rng = crate::seed::rng(3);
        let active: Vec<f64> = (0..2000).map(|_| (rng.gen::<f64>().powi(3) * 0.8).min(1.0)).collect();
        let bg: Normal<f64> = Normal::new(0.6, 0.1).unwrap();
        let background: Vec<f64> = (0..5000).map(|_| bg.sample(&mut rng).clamp(0.0, 1.0)).collect();
        let c = calibrate_bandwidth(&active, &background, 0.01).unwrap();
        assert!(c.converged);
        let curve = fit_prior_curve(&active, &background, c.gamma, 0.01, &default_grid()).unwrap();
        assert!((curve.prob[0] - 1.0).abs() < 0.05, "{}", curve.prob[0]);
        assert!(curve.prob.windows(2).all(|w| w[0] >= w[1]));
        assert!(curve.prob.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn fixed_bandwidth_matches_calibration_residual_at_the_calibrated_gamma() {
        let mut rng = crate::seed::rng(4);
        let active: Vec<f64> = (0..500).map(|_| rng.gen::<f64>().powi(2) * 0.7).collect();
        let background: Vec<f64> = (0..1500).map(|_| rng.gen_range(0.3..1.0)).collect();
        let c = calibrate_bandwidth(&active, &background, 0.02).unwrap();
        let fixed = fixed_bandwidth(&active, &background, 0.02, c.gamma).unwrap();
        assert_eq!(fixed.gamma, c.gamma);
        assert!((fixed.residual - c.residual).abs() < 1e-12);
        assert!(fixed_bandwidth(&active, &background, 0.02, 0.0).is_err());
    }

    #[test]
    fn interpolation_contract() {
        let curve = PriorCurve {
            grid: vec![0.2, 0.4, 0.6],
            prob: vec![0.9, 0.5, 0.1],
            raw: vec![0.9, 0.5, 0.1],
            gamma: 0.1,
            base_rate: 0.01,
            masked: vec![],
            n_active: 1,
            n_background: 1,
            flags: vec![],
        };
        assert_eq!(curve.prob_active(0.4).unwrap(), 0.5);
        assert!((curve.prob_active(0.3).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(curve.prob_active(0.1).unwrap(), 0.9);
        assert_eq!(curve.prob_active(0.9).unwrap(), 0.1);
        assert!(curve.prob_active(1.1).is_err());
        assert!(curve.prob_active(-0.1).is_err());
    }

    #[test]
    fn unsupported_background_points_are_masked() {
        let active = vec![0.05, 0.1, 0.2];
        let background = vec![0.9, 0.95];
        let curve = fit_prior_curve(&active, &background, 0.01, 0.01, &unit_grid(11)).unwrap();
        assert!(!curve.masked.is_empty());
        assert!(curve.prob.windows(2).all(|w| w[0] >= w[1]));
    }

    proptest! {
        #[test]
        fn curve_is_monotone_and_bounded(
            active in proptest::collection::vec(0.0..1.0f64, 5..40),
            background in proptest::collection::vec(0.0..1.0f64, 5..40),
            gamma in 0.02..0.5f64,
            rate in 0.001..0.5f64,
            probes in proptest::collection::vec(0.0..=1.0f64, 1..20),
        ) {
            let curve = fit_prior_curve(&active, &background, gamma, rate, &default_grid()).unwrap();
            let mut probes = probes;
            probes.sort_by(f64::total_cmp);
            let vals: Vec<f64> = probes.iter().map(|&d| curve.prob_active(d).unwrap()).collect();
            prop_assert!(vals.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
