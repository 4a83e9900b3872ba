//! End-to-end fit of every scoring stage on one training set.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::covariance::{self, SigmaCurve};
use crate::dataset::{standardize_activities, ActivityTransform, LabelledSet, UnlabelledPool};
use crate::degradation::{self, DegradationCurves, DegradationParams};
use crate::error::{Error, Result};
use crate::fingerprint::SetwiseIndex;
use crate::mixture::{self, MixtureDistribution};
use crate::prior::{self, BaseRateMode, Calibration, PriorCurve};
use crate::regressors::{self, FittedModel, RegressorSpec};
use crate::sampler::{self, DistanceSample};
use crate::scoring::{MeanSource, Scorer};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    pub folds: usize,
    pub repetitions: usize,
    pub delta_weight: f64,
    /// Background sample size; `None` takes 10,000 capped by the number of
    /// pool compounds in segments with nonzero selection weight.
    pub background_size: Option<usize>,
    pub bin_width: f64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            folds: 2,
            repetitions: 5,
            delta_weight: 0.15,
            background_size: None,
            bin_width: sampler::DEFAULT_BIN_WIDTH,
        }
    }
}

impl SamplingParams {
    pub fn background_size_for(&self, pool: &UnlabelledPool, distances: &[f64]) -> usize {
        self.background_size.unwrap_or_else(|| {
            let segments = pool.segments();
            let counts =
                sampler::segment_counts(distances, &segments, pool.segment_count, self.delta_weight, self.bin_width);
            let drawable = segments.iter().filter(|&&s| counts[s] > 0).count();
            drawable.min(10_000)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorParams {
    pub base_rate: BaseRateMode,
    pub grid_points: usize,
    /// Fixed KDE bandwidth; skips calibration.
    pub gamma: Option<f64>,
}

impl Default for PriorParams {
    fn default() -> Self {
        Self {
            base_rate: BaseRateMode::Counts,
            grid_points: 101,
            gamma: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovarianceParams {
    pub bin_width: f64,
    pub min_pairs: u64,
    pub max_pairs: u64,
}

impl Default for CovarianceParams {
    fn default() -> Self {
        Self {
            bin_width: covariance::DEFAULT_BIN_WIDTH,
            min_pairs: covariance::DEFAULT_MIN_PAIRS,
            max_pairs: covariance::DEFAULT_MAX_PAIRS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineParams {
    #[serde(default)]
    pub regressor: RegressorSpec,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default)]
    pub prior: PriorParams,
    #[serde(default)]
    pub degradation: DegradationParams,
    #[serde(default)]
    pub covariance: CovarianceParams,
    /// Activity threshold on the original scale.
    pub threshold: f64,
    #[serde(default)]
    pub mean_source: MeanSource,
}

impl PipelineParams {
    pub fn new(threshold: f64) -> Self {
        Self {
            regressor: RegressorSpec::default(),
            sampling: SamplingParams::default(),
            prior: PriorParams::default(),
            degradation: DegradationParams::default(),
            covariance: CovarianceParams::default(),
            threshold,
            mean_source: MeanSource::S1,
        }
    }
}

/// Every fitted stage, in standardized activity units.
#[derive(Clone, Debug)]
pub struct FittedPipeline {
    pub transform: ActivityTransform,
    pub standardized: LabelledSet,
    pub model: FittedModel,
    pub active_sample: DistanceSample,
    pub background_sample: DistanceSample,
    pub calibration: Calibration,
    pub prior: PriorCurve,
    pub degradation: DegradationCurves,
    pub covariance: SigmaCurve,
    pub mixture: MixtureDistribution,
    pub threshold: f64,
    pub mean_source: MeanSource,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Domain(m) => Error::Domain(format!("{name}: {m}")),
        Error::Degenerate(m) => Error::Degenerate(format!("{name}: {m}")),
        Error::Config(m) => Error::Config(format!("{name}: {m}")),
        Error::Optimizer(m) => Error::Optimizer(format!("{name}: {m}")),
        other => other,
    })
}

pub fn fit_prior_stage(
    train: &LabelledSet,
    active: &DistanceSample,
    background: &DistanceSample,
    params: &PriorParams,
) -> Result<(Calibration, PriorCurve)> {
    let base_rate = prior::estimate_base_rate(
        params.base_rate,
        train,
        Some(&active.values),
        Some(&background.values),
    )?;
    let calibration = match params.gamma {
        Some(gamma) => prior::fixed_bandwidth(&active.values, &background.values, base_rate, gamma)?,
        None => prior::calibrate_bandwidth(&active.values, &background.values, base_rate)?,
    };
    let grid = prior::unit_grid(params.grid_points);
    let mut curve = prior::fit_prior_curve(&active.values, &background.values, calibration.gamma, base_rate, &grid)?;
    if !calibration.converged {
        curve.flags.push(format!(
            "bandwidth calibration did not converge (residual {:.3e})",
            calibration.residual
        ));
    }
    Ok((calibration, curve))
}

#[derive(Clone, Debug)]
pub struct PriorStage {
    pub active_sample: DistanceSample,
    pub background_sample: DistanceSample,
    pub calibration: Calibration,
    pub prior: PriorCurve,
}

/// Cross-predicted active distances and the segment-weighted background
/// sample.
pub fn sample_distances(
    train: &LabelledSet,
    pool: &UnlabelledPool,
    sampling: &SamplingParams,
    seed: u64,
) -> Result<(DistanceSample, DistanceSample)> {
    let s = sampling;
    let active_sample = stage(
        "sample",
        sampler::sample_active_setwise(train, s.folds, s.repetitions, seed::substream(seed, "active-sample")),
    )?;
    let index = SetwiseIndex::new(train.fingerprints())?;
    let distances = index.distances(&pool.fingerprints())?;
    let background_sample = stage(
        "sample",
        sampler::sample_background_from_distances(
            pool,
            &distances,
            s.delta_weight,
            s.background_size_for(pool, &distances),
            s.bin_width,
            seed::substream(seed, "background-sample"),
        ),
    )?;
    Ok((active_sample, background_sample))
}

/// Draw both distance samples and fit the prior curve, with the same seed
/// substreams as [`fit_pipeline`].
pub fn fit_prior_from_pool(
    train: &LabelledSet,
    pool: &UnlabelledPool,
    sampling: &SamplingParams,
    params: &PriorParams,
    seed: u64,
) -> Result<PriorStage> {
    let (active_sample, background_sample) = sample_distances(train, pool, sampling, seed)?;
    let (calibration, prior) = stage("prior", fit_prior_stage(train, &active_sample, &background_sample, params))?;
    Ok(PriorStage {
        active_sample,
        background_sample,
        calibration,
        prior,
    })
}

/// The regressor spec actually fitted: `regressor` with its seed replaced by
/// the pipeline's model substream.
pub fn model_spec(regressor: &RegressorSpec, seed: u64) -> RegressorSpec {
    RegressorSpec {
        seed: seed::substream(seed, "model"),
        ..*regressor
    }
}

/// Fit the regressor on standardized activities.
pub fn fit_model(standardized: &LabelledSet, regressor: &RegressorSpec, seed: u64) -> Result<FittedModel> {
    let spec = model_spec(regressor, seed);
    stage("fit", regressors::fit(&spec, &standardized.fingerprints(), &standardized.activities()))
}

pub fn fit_degradation_stage(
    standardized: &LabelledSet,
    regressor: &RegressorSpec,
    params: &DegradationParams,
    seed: u64,
) -> Result<DegradationCurves> {
    stage(
        "degrade",
        degradation::build_degradation(
            standardized,
            &model_spec(regressor, seed),
            &degradation::default_grid(),
            params,
            seed::substream(seed, "degradation"),
        ),
    )
}

pub fn fit_covariance_stage(standardized: &LabelledSet, params: &CovarianceParams, seed: u64) -> Result<SigmaCurve> {
    let c = params;
    stage(
        "covariance",
        covariance::collect_pair_bins(standardized, c.bin_width, c.max_pairs, seed::substream(seed, "covariance"))
            .and_then(|bins| covariance::fit_sigma_curve(&bins, c.min_pairs)),
    )
}

pub fn fit_mixture_stage(standardized: &LabelledSet, seed: u64) -> Result<MixtureDistribution> {
    stage(
        "mixture",
        mixture::fit_mixture(&standardized.activities(), seed::substream(seed, "mixture")),
    )
}

/// Fit the model, prior, degradation, covariance and mixture stages on
/// `train` with background distances drawn from `pool`.
pub fn fit_pipeline(
    train: &LabelledSet,
    pool: &UnlabelledPool,
    params: &PipelineParams,
    seed: u64,
) -> Result<FittedPipeline> {
    if !params.threshold.is_finite() {
        return Err(Error::config(format!("threshold must be finite, got {}", params.threshold)));
    }
    let (standardized, transform) = stage("ingest", standardize_activities(train))?;
    let model = fit_model(&standardized, &params.regressor, seed)?;
    let PriorStage {
        active_sample,
        background_sample,
        calibration,
        prior,
    } = fit_prior_from_pool(&standardized, pool, &params.sampling, &params.prior, seed)?;
    let degradation = fit_degradation_stage(&standardized, &params.regressor, &params.degradation, seed)?;
    let covariance = fit_covariance_stage(&standardized, &params.covariance, seed)?;
    let mixture = fit_mixture_stage(&standardized, seed)?;
    Ok(FittedPipeline {
        threshold: transform.apply(params.threshold),
        transform,
        standardized,
        model,
        active_sample,
        background_sample,
        calibration,
        prior,
        degradation,
        covariance,
        mixture,
        mean_source: params.mean_source,
    })
}

impl FittedPipeline {
    pub fn scorer(&self) -> Result<Scorer> {
        let index = SetwiseIndex::new(self.standardized.fingerprints())?;
        let mut scorer = Scorer::new(self.model.clone(), index, self.threshold)?;
        scorer.prior = Some(self.prior.clone());
        scorer.degradation = Some(self.degradation.clone());
        scorer.covariance = Some(self.covariance.clone());
        scorer.mixture = Some(self.mixture.clone());
        scorer.mean_source = self.mean_source;
        Ok(scorer)
    }

    /// Write every fitted artifact under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("model.json"), self.model.to_json()?)?;
        sampler::write_sample(dir, "active_sample", &self.active_sample)?;
        sampler::write_sample(dir, "background_sample", &self.background_sample)?;
        self.prior.write(dir)?;
        self.degradation.write(dir)?;
        self.covariance.write(dir)?;
        self.mixture.write(dir)?;
        std::fs::write(dir.join("transform.json"), serde_json::to_string_pretty(&self.transform)?)?;
        Ok(())
    }
}
