//! Loss of predictive accuracy with distance from the training data.
//!
//! For a target compound `x_i` and radius `δ`, the model is refit on every
//! labelled compound at distance at least `δ` from `x_i` and asked to predict
//! `x_i`. Regressing the true activities on these out-of-ball predictions
//! through the origin gives a slope `β̂(δ)` and a residual scale `ε̂(δ)`.
//! Ten such estimates are then smoothed with the decreasing family
//! `g(δ) = a / (1 + exp(-b δ^c))`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabelledSet;
use crate::error::{Error, Result};
use crate::fingerprint::{distance_unchecked, Fingerprint};
use crate::optim::NelderMead;
use crate::regressors::{self, FittedModel, RegressorKind, RegressorSpec, RidgeGram};
use crate::seed;

pub const DEFAULT_MAX_TARGETS: usize = 500;
pub const MIN_TRAINING_SIZE: usize = 50;
pub const MIN_PAIRS: usize = 10;
pub const GRID_POINTS: usize = 10;
pub const CURVE_STARTS: usize = 16;

const A_MAX: f64 = 10.0;
const B_MIN: f64 = -50.0;
const C_MAX: f64 = 5.0;
const FLAT_RANGE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationParams {
    pub max_targets: usize,
    pub min_training_size: usize,
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            max_targets: DEFAULT_MAX_TARGETS,
            min_training_size: MIN_TRAINING_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaBallResult {
    pub delta: f64,
    /// Index into the labelled set of each used target.
    pub targets: Vec<usize>,
    pub y_true: Vec<f64>,
    pub y_pred: Vec<f64>,
    pub n_train: Vec<usize>,
    pub n_attempted: usize,
    pub n_skipped: usize,
}

impl DeltaBallResult {
    pub fn len(&self) -> usize {
        self.y_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_true.is_empty()
    }
}

fn check_standardized(ys: &[f64]) -> Result<()> {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if mean.abs() > 1e-6 || (sd - 1.0).abs() > 1e-6 {
        return Err(Error::domain(format!(
            "activities must be standardized (mean {mean:.3e}, sd {sd:.6})"
        )));
    }
    Ok(())
}

/// Indices of the targets used for every radius: all compounds, or a seeded
/// uniform subsample of `max_targets` in increasing order.
pub fn select_targets(n: usize, max_targets: usize, seed: u64) -> Vec<usize> {
    if n <= max_targets {
        return (0..n).collect();
    }
    let mut rng = seed::rng(seed::substream(seed, "delta-ball-targets"));
    let mut picked = rand::seq::index::sample(&mut rng, n, max_targets).into_vec();
    picked.sort_unstable();
    picked
}

pub fn delta_ball_residuals(
    set: &LabelledSet,
    spec: &RegressorSpec,
    delta: f64,
    params: &DegradationParams,
    seed: u64,
) -> Result<DeltaBallResult> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::domain(format!("radius {delta} outside [0, 1]")));
    }
    if set.len() < 2 {
        return Err(Error::domain("need at least 2 labelled compounds"));
    }
    let xs = set.fingerprints();
    let ys = set.activities();
    check_standardized(&ys)?;
    let p = xs[0].len();
    let targets = select_targets(xs.len(), params.max_targets, seed);
    let full_gram = match spec.kind {
        RegressorKind::Ridge => Some(RidgeGram::from_rows(p, xs.iter().zip(ys.iter().copied()))),
        RegressorKind::RandomForest => None,
    };

    let outcomes: Vec<Option<(usize, f64, usize)>> = targets
        .par_iter()
        .map(|&t| -> Result<Option<(usize, f64, usize)>> {
            let inside: Vec<bool> = xs.iter().map(|x| distance_unchecked(&xs[t], x) < delta).collect();
            let n_train = inside.iter().filter(|&&b| !b).count();
            if n_train < params.min_training_size.max(2) {
                return Ok(None);
            }
            let pred = match &full_gram {
                Some(full) => {
                    let n_out = xs.len() - n_train;
                    let gram = if n_out <= n_train {
                        let mut g = full.clone();
                        for (i, _) in inside.iter().enumerate().filter(|(_, &b)| b) {
                            g.remove(&xs[i], ys[i]);
                        }
                        g
                    } else {
                        RidgeGram::from_rows(
                            p,
                            inside
                                .iter()
                                .enumerate()
                                .filter(|(_, &b)| !b)
                                .map(|(i, _)| (&xs[i], ys[i])),
                        )
                    };
                    gram.solve(spec.ridge_lambda)?.predict(&xs[t])
                }
                None => {
                    let (tx, ty): (Vec<Fingerprint>, Vec<f64>) = inside
                        .iter()
                        .enumerate()
                        .filter(|(_, &b)| !b)
                        .map(|(i, _)| (xs[i].clone(), ys[i]))
                        .unzip();
                    regressors::fit(spec, &tx, &ty)?.predict(&xs[t])?
                }
            };
            Ok(Some((t, pred, n_train)))
        })
        .collect::<Result<_>>()?;

    let mut result = DeltaBallResult {
        delta,
        targets: Vec::new(),
        y_true: Vec::new(),
        y_pred: Vec::new(),
        n_train: Vec::new(),
        n_attempted: targets.len(),
        n_skipped: 0,
    };
    for outcome in outcomes {
        match outcome {
            Some((t, pred, n_train)) => {
                result.targets.push(t);
                result.y_true.push(ys[t]);
                result.y_pred.push(pred);
                result.n_train.push(n_train);
            }
            None => result.n_skipped += 1,
        }
    }
    if result.is_empty() {
        return Err(Error::degenerate(format!(
            "radius {delta}: all {} targets have fewer than {} compounds outside the ball",
            result.n_attempted, params.min_training_size
        )));
    }
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaEpsilon {
    pub beta: f64,
    pub epsilon: f64,
    /// Standard error of the slope, `ε̂ / sqrt(Σ ŷ²)`.
    pub beta_se: f64,
    pub n: usize,
    /// Set when every prediction was zero and the slope is undefined.
    pub degenerate: bool,
}

/// Through-origin least squares of `y` on `y_hat`.
pub fn through_origin(y: &[f64], y_hat: &[f64]) -> Result<BetaEpsilon> {
    if y.len() != y_hat.len() {
        return Err(Error::domain(format!("{} responses but {} predictions", y.len(), y_hat.len())));
    }
    if y.len() < MIN_PAIRS {
        return Err(Error::domain(format!("need at least {MIN_PAIRS} pairs, got {}", y.len())));
    }
    let n = y.len() as f64;
    let sxy: f64 = y.iter().zip(y_hat).map(|(a, b)| a * b).sum();
    let sxx: f64 = y_hat.iter().map(|b| b * b).sum();
    if sxx == 0.0 {
        let rms = (y.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
        return Ok(BetaEpsilon {
            beta: 0.0,
            epsilon: rms,
            beta_se: f64::INFINITY,
            n: y.len(),
            degenerate: true,
        });
    }
    let beta = sxy / sxx;
    let epsilon = (y.iter().zip(y_hat).map(|(a, b)| (a - beta * b).powi(2)).sum::<f64>() / n).sqrt();
    Ok(BetaEpsilon {
        beta,
        epsilon,
        beta_se: epsilon / sxx.sqrt(),
        n: y.len(),
        degenerate: false,
    })
}

pub fn fit_beta_epsilon(result: &DeltaBallResult) -> Result<BetaEpsilon> {
    through_origin(&result.y_true, &result.y_pred)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothCurve {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub fitted_points: Vec<(f64, f64)>,
    pub rss: f64,
    /// The fitted curve is nearly flat on `[0, 1]`, so `a` and `b` trade off.
    pub poorly_identified: bool,
}

impl SmoothCurve {
    pub fn eval(&self, delta: f64) -> f64 {
        curve_value(self.a, self.b, self.c, delta)
    }
}

fn curve_value(a: f64, b: f64, c: f64, delta: f64) -> f64 {
    a / (1.0 + (-b * delta.max(0.0).powf(c)).exp())
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(v: f64) -> f64 {
    (v / (1.0 - v)).ln()
}

/// Map unconstrained coordinates into the open parameter box.
fn to_params(u: &[f64]) -> (f64, f64, f64) {
    (A_MAX * logistic(u[0]), B_MIN * logistic(u[1]), C_MAX * logistic(u[2]))
}

fn from_params(a: f64, b: f64, c: f64) -> [f64; 3] {
    let inner = |v: f64| logit(v.clamp(1e-9, 1.0 - 1e-9));
    [inner(a / A_MAX), inner(b / B_MIN), inner(c / C_MAX)]
}

fn rss(points: &[(f64, f64)], a: f64, b: f64, c: f64) -> f64 {
    points.iter().map(|&(d, v)| (v - curve_value(a, b, c, d)).powi(2)).sum()
}

/// Multistart least squares fit of `g(δ) = a / (1 + exp(-b δ^c))` with
/// `a > 0`, `b < 0`, `c > 0`.
pub fn fit_smooth_curve(points: &[(f64, f64)]) -> Result<SmoothCurve> {
    if points.len() < 4 {
        return Err(Error::domain(format!("need at least 4 points, got {}", points.len())));
    }
    if let Some(&(d, v)) = points.iter().find(|(d, v)| !d.is_finite() || !v.is_finite()) {
        return Err(Error::domain(format!("non-finite point ({d}, {v})")));
    }
    let top = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let mut starts = vec![from_params((2.0 * top).clamp(1e-3, A_MAX * 0.99), -3.0, 1.0)];
    let mut rng = seed::rng(seed::substream(0, "smooth-curve-starts"));
    while starts.len() < CURVE_STARTS {
        let a = rng.gen_range(1e-3..A_MAX);
        let b = rng.gen_range(B_MIN..-1e-3);
        let c = rng.gen_range(1e-2..C_MAX);
        starts.push(from_params(a, b, c));
    }

    let objective = |u: &[f64]| {
        let (a, b, c) = to_params(u);
        rss(points, a, b, c)
    };
    let nm = NelderMead {
        max_iter: 4000,
        step: 0.5,
        ..Default::default()
    };
    let mut best: Option<(f64, [f64; 3])> = None;
    let mut diagnostics = Vec::new();
    for start in &starts {
        let first = nm.minimize(objective, start);
        let polished = nm.minimize(objective, &first.x);
        let value = polished.value;
        if !value.is_finite() {
            diagnostics.push(format!("start {start:?} ended at non-finite rss"));
            continue;
        }
        if best.as_ref().is_none_or(|(v, _)| value < *v) {
            best = Some((value, [polished.x[0], polished.x[1], polished.x[2]]));
        }
    }
    let Some((value, u)) = best else {
        return Err(Error::Optimizer(diagnostics.join("; ")));
    };
    let (a, b, c) = to_params(&u);
    let g0 = curve_value(a, b, c, 0.0);
    let g1 = curve_value(a, b, c, 1.0);
    Ok(SmoothCurve {
        a,
        b,
        c,
        fitted_points: points.to_vec(),
        rss: value,
        poorly_identified: (g0 - g1) <= FLAT_RANGE * g0.abs().max(1e-12),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEstimate {
    pub delta: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub beta_se: f64,
    pub n_pairs: usize,
    pub n_attempted: usize,
    pub n_skipped: usize,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationCurves {
    pub beta: SmoothCurve,
    /// Fitted to `1 - ε̂(δ)`.
    pub strength: SmoothCurve,
    pub model_kind: RegressorKind,
    pub estimates: Vec<GridEstimate>,
    /// Grid radii without a usable estimate.
    pub skipped: Vec<f64>,
    /// Grid runs from 0 to 1 inclusive.
    pub grid_includes_endpoints: bool,
}

impl DegradationCurves {
    pub fn beta_at(&self, delta: f64) -> f64 {
        self.beta.eval(delta)
    }

    /// Residual standard deviation, `1 - strength(δ)` floored at zero.
    pub fn epsilon_at(&self, delta: f64) -> f64 {
        (1.0 - self.strength.eval(delta)).max(0.0)
    }

    /// CSV of the per-radius estimates plus a JSON file with the curves.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("degradation.csv"))?;
        w.write_record([
            "delta",
            "beta_hat",
            "epsilon_hat",
            "beta_se",
            "n_pairs",
            "n_attempted",
            "n_skipped",
            "beta_fit",
            "epsilon_fit",
        ])?;
        for e in &self.estimates {
            w.write_record([
                format!("{}", e.delta),
                format!("{}", e.beta),
                format!("{}", e.epsilon),
                format!("{}", e.beta_se),
                e.n_pairs.to_string(),
                e.n_attempted.to_string(),
                e.n_skipped.to_string(),
                format!("{}", self.beta_at(e.delta)),
                format!("{}", self.epsilon_at(e.delta)),
            ])?;
        }
        w.flush()?;
        let mut f = std::fs::File::create(dir.join("degradation.json"))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(dir.join("degradation.json"))?)?)
    }
}

pub fn default_grid() -> Vec<f64> {
    crate::prior::unit_grid(GRID_POINTS)
}

pub fn build_degradation(
    set: &LabelledSet,
    spec: &RegressorSpec,
    grid: &[f64],
    params: &DegradationParams,
    seed: u64,
) -> Result<DegradationCurves> {
    let mut estimates = Vec::new();
    let mut skipped = Vec::new();
    for &delta in grid {
        let result = match delta_ball_residuals(set, spec, delta, params, seed) {
            Ok(r) => r,
            Err(Error::Degenerate(msg)) => {
                log::info!("skipping radius {delta}: {msg}");
                skipped.push(delta);
                continue;
            }
            Err(e) => return Err(e),
        };
        let Ok(fit) = fit_beta_epsilon(&result) else {
            log::info!("skipping radius {delta}: only {} pairs", result.len());
            skipped.push(delta);
            continue;
        };
        estimates.push(GridEstimate {
            delta,
            beta: fit.beta,
            epsilon: fit.epsilon,
            beta_se: fit.beta_se,
            n_pairs: fit.n,
            n_attempted: result.n_attempted,
            n_skipped: result.n_skipped,
            degenerate: fit.degenerate,
        });
    }
    if estimates.len() < 4 {
        return Err(Error::degenerate(format!(
            "only {} usable radii on the grid, need at least 4",
            estimates.len()
        )));
    }
    let beta_points: Vec<(f64, f64)> = estimates.iter().map(|e| (e.delta, e.beta)).collect();
    let strength_points: Vec<(f64, f64)> = estimates.iter().map(|e| (e.delta, 1.0 - e.epsilon)).collect();
    let endpoints = grid.first() == Some(&0.0) && grid.last() == Some(&1.0);
    Ok(DegradationCurves {
        beta: fit_smooth_curve(&beta_points)?,
        strength: fit_smooth_curve(&strength_points)?,
        model_kind: spec.kind,
        estimates,
        skipped,
        grid_includes_endpoints: endpoints,
    })
}

/// Model fit on the whole labelled set with the given regressor.
pub fn fit_full(set: &LabelledSet, spec: &RegressorSpec) -> Result<FittedModel> {
    regressors::fit(spec, &set.fingerprints(), &set.activities())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{standardize_activities, LabelledCompound};
    use rand_distr::{Distribution, StandardNormal};

    fn landscape(n: usize, p: usize, seed: u64, activity: impl Fn(&Fingerprint, &mut seed::Rng) -> f64) -> LabelledSet {
        let mut rng = seed::rng(seed);
        let compounds = (0..n)
            .map(|i| {
                let bits: Vec<bool> = (0..p).map(|_| rng.gen_bool(0.3)).collect();
                let fp = Fingerprint::from_bits(&bits).unwrap();
                let y = activity(&fp, &mut rng);
                LabelledCompound {
                    id: format!("c{i}"),
                    fp,
                    activity: y,
                }
            })
            .collect();
        let raw = LabelledSet::new(compounds, f64::NEG_INFINITY, None).unwrap();
        standardize_activities(&raw).unwrap().0
    }

    /// Bit-by-bit Tanimoto distance.
    fn naive_distance(a: &Fingerprint, b: &Fingerprint) -> f64 {
        let (mut both, mut either) = (0, 0);
        for j in 0..a.len() {
            both += (a.get(j) && b.get(j)) as u32;
            either += (a.get(j) || b.get(j)) as u32;
        }
        if either == 0 {
            0.0
        } else {
            1.0 - both as f64 / either as f64
        }
    }

    #[test]
    fn closed_form_examples() {
        let mut y = vec![1.0, 2.0];
        let mut yh = vec![1.0, 1.0];
        // pad with exact zeros so the minimum pair count is met without
        // changing either sum
        y.extend([0.0; 8]);
        yh.extend([0.0; 8]);
        let fit = through_origin(&y, &yh).unwrap();
        assert_eq!(fit.beta, 1.5);
        let rms = ((0.25 + 0.25) / 10.0f64).sqrt();
        assert!((fit.epsilon - rms).abs() < 1e-15);

        let y: Vec<f64> = (0..12).map(|i| i as f64 - 5.0).collect();
        let fit = through_origin(&y, &y).unwrap();
        assert_eq!((fit.beta, fit.epsilon), (1.0, 0.0));
    }

    #[test]
    fn two_pair_example_residuals() {
        // unpadded version of the closed form: residuals (-0.5, 0.5)
        let (y, yh) = ([1.0, 2.0], [1.0, 1.0]);
        let beta = (y[0] * yh[0] + y[1] * yh[1]) / (yh[0] * yh[0] + yh[1] * yh[1]);
        assert_eq!(beta, 1.5);
        assert_eq!([y[0] - beta * yh[0], y[1] - beta * yh[1]], [-0.5, 0.5]);
        assert!(through_origin(&y, &yh).is_err());
    }

    #[test]
    fn zero_predictions_are_flagged() {
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let fit = through_origin(&y, &[0.0; 10]).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.beta, 0.0);
        let rms = (y.iter().map(|v| v * v).sum::<f64>() / 10.0).sqrt();
        assert_eq!(fit.epsilon, rms);
    }

    #[test]
    fn independent_predictions_give_flat_slope() {
        let mut rng = seed::rng(5);
        let y: Vec<f64> = (0..20_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let yh: Vec<f64> = (0..20_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let fit = through_origin(&y, &yh).unwrap();
        assert!(fit.beta.abs() < 0.03, "{fit:?}");
        assert!((fit.epsilon - 1.0).abs() < 0.03);
    }

    #[test]
    fn zero_radius_fits_in_sample() {
        let set = landscape(120, 32, 1, |fp, _| fp.count_ones() as f64);
        let spec = RegressorSpec::ridge(1.0);
        let r = delta_ball_residuals(&set, &spec, 0.0, &DegradationParams::default(), 0).unwrap();
        assert_eq!(r.n_skipped, 0);
        assert!(r.n_train.iter().all(|&n| n == 120));
        let full = fit_full(&set, &spec).unwrap();
        for (&t, &pred) in r.targets.iter().zip(&r.y_pred) {
            assert!((full.predict(&set.compounds[t].fp).unwrap() - pred).abs() < 1e-9);
        }
    }

    #[test]
    fn training_size_shrinks_with_radius() {
        let set = landscape(150, 32, 2, |fp, _| fp.count_ones() as f64);
        let spec = RegressorSpec::ridge(1.0);
        let params = DegradationParams {
            max_targets: 40,
            min_training_size: 2,
        };
        let mut previous: Option<DeltaBallResult> = None;
        for delta in [0.0, 0.3, 0.5, 0.6, 0.7] {
            let r = delta_ball_residuals(&set, &spec, delta, &params, 3).unwrap();
            assert_eq!(r.n_attempted, r.len() + r.n_skipped);
            if let Some(prev) = &previous {
                for (t, n) in r.targets.iter().zip(&r.n_train) {
                    let k = prev.targets.iter().position(|x| x == t).unwrap();
                    assert!(*n <= prev.n_train[k]);
                }
            }
            previous = Some(r);
        }
    }

    #[test]
    fn residuals_match_naive_refits() {
        let set = landscape(200, 24, 4, |fp, rng| fp.ones().filter(|&j| j < 8).count() as f64 + rng.gen_range(-0.5..0.5));
        let params = DegradationParams {
            max_targets: 30,
            min_training_size: MIN_TRAINING_SIZE,
        };
        let specs = [
            RegressorSpec::ridge(1.0),
            RegressorSpec::random_forest(Default::default(), 8),
        ];
        for spec in specs {
            for delta in [0.0, 0.4, 0.6] {
                let fast = delta_ball_residuals(&set, &spec, delta, &params, 9).unwrap();
                let mut used = 0;
                for &t in &select_targets(200, 30, 9) {
                    let target = &set.compounds[t];
                    let (tx, ty): (Vec<_>, Vec<_>) = set
                        .compounds
                        .iter()
                        .filter(|c| naive_distance(&target.fp, &c.fp) >= delta)
                        .map(|c| (c.fp.clone(), c.activity))
                        .unzip();
                    if tx.len() < MIN_TRAINING_SIZE {
                        continue;
                    }
                    let pred = regressors::fit(&spec, &tx, &ty).unwrap().predict(&target.fp).unwrap();
                    assert_eq!(fast.targets[used], t);
                    assert_eq!(fast.n_train[used], tx.len());
                    assert!((fast.y_pred[used] - pred).abs() < 1e-9, "{} vs {pred}", fast.y_pred[used]);
                    used += 1;
                }
                assert_eq!(used, fast.len());
            }
        }
    }

    #[test]
    fn unstandardized_input_is_rejected() {
        let compounds = (0..60)
            .map(|i| LabelledCompound {
                id: format!("c{i}"),
                fp: Fingerprint::from_indices(16, [i % 16]).unwrap(),
                activity: 5.0 + (i % 7) as f64,
            })
            .collect();
        let raw = LabelledSet::new(compounds, 0.0, None).unwrap();
        let r = delta_ball_residuals(&raw, &RegressorSpec::default(), 0.0, &Default::default(), 0);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn all_targets_skipped_is_degenerate() {
        let set = landscape(60, 16, 6, |fp, _| fp.count_ones() as f64);
        let r = delta_ball_residuals(&set, &RegressorSpec::default(), 1.0, &Default::default(), 0);
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn recovers_curve_parameters() {
        let mut rng = seed::rng(17);
        let points: Vec<(f64, f64)> = crate::prior::unit_grid(10)
            .into_iter()
            .map(|d| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                (d, curve_value(1.0, -3.0, 1.0, d) + 1e-4 * noise)
            })
            .collect();
        let curve = fit_smooth_curve(&points).unwrap();
        assert!((curve.a - 1.0).abs() < 0.01, "{curve:?}");
        assert!((curve.b + 3.0).abs() < 0.03, "{curve:?}");
        assert!((curve.c - 1.0).abs() < 0.01, "{curve:?}");
        assert!(!curve.poorly_identified);
        assert!(curve.rss <= rss(&points, 1.0, -3.0, 1.0));
    }

    #[test]
    fn constant_points_are_poorly_identified() {
        let points: Vec<(f64, f64)> = crate::prior::unit_grid(10).into_iter().map(|d| (d, 0.4)).collect();
        let curve = fit_smooth_curve(&points).unwrap();
        assert!(curve.poorly_identified, "{curve:?}");
        assert!((curve.a - 0.8).abs() < 1e-3, "{curve:?}");
        assert!(curve.b.abs() < 1e-2);
    }

    #[test]
    fn too_few_points() {
        assert!(fit_smooth_curve(&[(0.0, 1.0), (0.5, 0.5), (1.0, 0.2)]).is_err());
    }

    #[test]
    fn smooth_landscape_degrades() {
        // activity is the fraction of ones in the first 16 bits
        let set = landscape(800, 64, 7, |fp, _| fp.ones().filter(|&j| j < 16).count() as f64 / 16.0);
        let params = DegradationParams {
            max_targets: 200,
            ..Default::default()
        };
        let curves = build_degradation(&set, &RegressorSpec::ridge(1.0), &default_grid(), &params, 1).unwrap();
        let first = curves.estimates[0];
        assert_eq!(first.delta, 0.0);
        assert!(first.beta > 0.9, "{:?}", curves.estimates);
        assert!((curves.beta_at(0.0) - first.beta).abs() < 0.1);
        for w in curves.estimates.windows(2) {
            assert!(curves.beta_at(w[0].delta) > curves.beta_at(w[1].delta));
            assert!(curves.epsilon_at(w[0].delta) <= curves.epsilon_at(w[1].delta));
        }
        for e in &curves.estimates {
            assert_eq!(e.n_attempted, e.n_pairs + e.n_skipped);
        }
    }

    #[test]
    fn curves_round_trip_through_files() {
        let set = landscape(300, 32, 8, |fp, _| fp.count_ones() as f64);
        let params = DegradationParams {
            max_targets: 50,
            ..Default::default()
        };
        let curves = build_degradation(&set, &RegressorSpec::ridge(1.0), &default_grid(), &params, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        curves.write(dir.path()).unwrap();
        assert_eq!(DegradationCurves::read(dir.path()).unwrap(), curves);
        let csv = std::fs::read_to_string(dir.path().join("degradation.csv")).unwrap();
        assert_eq!(csv.lines().count(), curves.estimates.len() + 1);
    }

    proptest::proptest! {
        #[test]
        fn slope_matches_scalar_recomputation(pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 10..60)) {
            let (y, yh): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let fit = through_origin(&y, &yh).unwrap();
            let mut sxy = 0.0;
            let mut sxx = 0.0;
            for i in 0..y.len() {
                sxy += y[i] * yh[i];
                sxx += yh[i] * yh[i];
            }
            let beta = sxy / sxx;
            let mut ss = 0.0;
            for i in 0..y.len() {
                ss += (y[i] - beta * yh[i]) * (y[i] - beta * yh[i]);
            }
            proptest::prop_assert!((fit.beta - beta).abs() <= 1e-12 * beta.abs().max(1.0));
            proptest::prop_assert!((fit.epsilon - (ss / y.len() as f64).sqrt()).abs() <= 1e-12);
        }

        #[test]
        fn fitted_family_is_decreasing(a in 0.01f64..10.0, b in -50.0f64..-0.01, c in 0.01f64..5.0, d1 in 0.0f64..1.0, d2 in 0.0f64..1.0) {
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            proptest::prop_assume!(hi - lo > 1e-6);
            let g = |d| curve_value(a, b, c, d);
            proptest::prop_assert!(g(lo) >= g(hi));
            proptest::prop_assert!(g(hi) >= 0.0);
        }
    }
}
