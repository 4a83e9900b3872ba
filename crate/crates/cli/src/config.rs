//! Pipeline configuration: one JSON document shared by every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use domainrank::degradation::DegradationParams;
use domainrank::evaluation::{self, PoolMode, SplitSpec};
use domainrank::pipeline::{CovarianceParams, PipelineParams, PriorParams, SamplingParams};
use domainrank::prior::BaseRateMode;
use domainrank::regressors::{RegressorKind, RegressorSpec};
use domainrank::scoring::{MeanSource, ScoreVariant};
use domainrank::synthetic::LandscapeSpec;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Labelled CSV. When absent, `ingest` reads the output of `synth`.
    pub labelled: Option<PathBuf>,
    /// Unlabelled segment CSVs, in segment order.
    pub unlabelled: Vec<PathBuf>,
    pub workdir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// `landscape.seed` is replaced by a substream of the root seed.
    pub landscape: LandscapeSpec,
    pub n_screened: usize,
    pub n_unlabelled: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            landscape: LandscapeSpec::default(),
            n_screened: 20_000,
            n_unlabelled: 20_000,
        }
    }
}

/// A cross product of thresholds and pool modes; the defaults give all
/// four threshold pairs in both pool modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitGrid {
    pub q_train: Vec<f64>,
    pub q_test: Vec<f64>,
    pub pool_modes: Vec<PoolMode>,
    pub pool_size: usize,
    pub delta_ref: f64,
    pub seed: u64,
}

impl Default for SplitGrid {
    fn default() -> Self {
        Self {
            q_train: evaluation::BENCHMARK_Q_TRAIN.to_vec(),
            q_test: evaluation::BENCHMARK_Q_TEST.to_vec(),
            pool_modes: vec![PoolMode::Near, PoolMode::Far],
            pool_size: evaluation::DEFAULT_POOL_SIZE,
            delta_ref: evaluation::DEFAULT_DELTA_REF,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub splits: Vec<SplitSpec>,
    /// Expanded and appended to `splits`.
    pub grid: Option<SplitGrid>,
    /// Defaults to the pipeline regressor alone.
    pub models: Vec<RegressorSpec>,
    /// Defaults to all four variants.
    pub variants: Vec<ScoreVariant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub fingerprint_bits: Option<usize>,
    /// Reporting cutoff. Required with `paths.labelled`; taken from the
    /// generator otherwise.
    #[serde(default)]
    pub l_min: Option<f64>,
    #[serde(default)]
    pub screened_count: Option<u64>,
    #[serde(default)]
    pub seed: u64,
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
    /// Activity threshold I on the original scale.
    pub threshold: f64,
    #[serde(default)]
    pub mean_source: MeanSource,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub synth: SynthConfig,
}

/// Render a `serde_path_to_error` path as a JSON pointer.
fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let message = e.inner().to_string();
            CliError::config(pointer(e.path()), message)
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Read, validate, and resolve relative input paths against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        config.paths.labelled = config.paths.labelled.as_ref().map(resolve);
        config.paths.unlabelled = config.paths.unlabelled.iter().map(resolve).collect();
        config.paths.workdir = config.paths.workdir.as_ref().map(resolve);
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |pointer: &str, message: String| Err(CliError::config(pointer, message));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let width = |x: f64| x > 0.0 && x <= 1.0;

        if self.paths.labelled.is_some() {
            if self.paths.unlabelled.is_empty() {
                return fail("/paths/unlabelled", "at least one segment file is required".into());
            }
            if self.l_min.is_none() {
                return fail("/l_min", "required when paths.labelled is set".into());
            }
        } else if !self.paths.unlabelled.is_empty() {
            return fail("/paths/labelled", "required when paths.unlabelled is set".into());
        }
        if let Some(l) = self.l_min {
            if !l.is_finite() {
                return fail("/l_min", format!("must be finite, got {l}"));
            }
        }
        if self.fingerprint_bits == Some(0) {
            return fail("/fingerprint_bits", "must be positive".into());
        }
        if self.screened_count == Some(0) {
            return fail("/screened_count", "must be positive".into());
        }
        if !self.threshold.is_finite() {
            return fail("/threshold", format!("must be finite, got {}", self.threshold));
        }

        validate_regressor("/regressor", &self.regressor)?;

        let s = &self.sampling;
        if s.folds < 2 {
            return fail("/sampling/folds", format!("need at least 2 folds, got {}", s.folds));
        }
        if s.repetitions == 0 {
            return fail("/sampling/repetitions", "must be positive".into());
        }
        if !unit(s.delta_weight) {
            return fail("/sampling/delta_weight", format!("must lie in [0, 1], got {}", s.delta_weight));
        }
        if s.background_size == Some(0) {
            return fail("/sampling/background_size", "must be positive".into());
        }
        if !width(s.bin_width) {
            return fail("/sampling/bin_width", format!("must lie in (0, 1], got {}", s.bin_width));
        }

        let p = &self.prior;
        if p.grid_points < 2 {
            return fail("/prior/grid_points", format!("need at least 2 points, got {}", p.grid_points));
        }
        if let Some(g) = p.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return fail("/prior/gamma", format!("must be positive, got {g}"));
            }
        }
        match p.base_rate {
            BaseRateMode::Fixed { value } if !(value > 0.0 && value < 1.0) => {
                return fail("/prior/base_rate/value", format!("must lie in (0, 1), got {value}"));
            }
            BaseRateMode::Limit { gamma: Some(g) } if !(g > 0.0 && g.is_finite()) => {
                return fail("/prior/base_rate/gamma", format!("must be positive, got {g}"));
            }
            _ => {}
        }

        if self.degradation.max_targets == 0 {
            return fail("/degradation/max_targets", "must be positive".into());
        }
        if self.degradation.min_training_size < 2 {
            return fail("/degradation/min_training_size", "must be at least 2".into());
        }

        let c = &self.covariance;
        if !width(c.bin_width) {
            return fail("/covariance/bin_width", format!("must lie in (0, 1], got {}", c.bin_width));
        }
        if c.min_pairs == 0 {
            return fail("/covariance/min_pairs", "must be positive".into());
        }
        if c.max_pairs < c.min_pairs {
            return fail(
                "/covariance/max_pairs",
                format!("must be at least min_pairs ({}), got {}", c.min_pairs, c.max_pairs),
            );
        }

        for (i, split) in self.evaluation.splits.iter().enumerate() {
            if let Err(e) = split.validate() {
                return fail(&format!("/evaluation/splits/{i}"), e.to_string());
            }
            if !unit(split.delta_ref) {
                return fail(
                    &format!("/evaluation/splits/{i}/delta_ref"),
                    format!("must lie in [0, 1], got {}", split.delta_ref),
                );
            }
        }
        if let Some(grid) = &self.evaluation.grid {
            if grid.q_train.iter().chain(&grid.q_test).any(|q| !q.is_finite()) {
                return fail("/evaluation/grid", "thresholds must be finite".into());
            }
            if grid.pool_modes.is_empty() {
                return fail("/evaluation/grid/pool_modes", "at least one mode is required".into());
            }
            if !unit(grid.delta_ref) {
                return fail("/evaluation/grid/delta_ref", format!("must lie in [0, 1], got {}", grid.delta_ref));
            }
            if self.splits().len() == self.evaluation.splits.len() {
                return fail("/evaluation/grid", "no threshold pair satisfies q_train <= q_test".into());
            }
        }
        for (i, model) in self.evaluation.models.iter().enumerate() {
            validate_regressor(&format!("/evaluation/models/{i}"), model)?;
        }

        let synth = &self.synth;
        if synth.n_screened == 0 {
            return fail("/synth/n_screened", "must be positive".into());
        }
        if synth.landscape.p == 0 {
            return fail("/synth/landscape/p", "must be positive".into());
        }
        let a = synth.landscape.active_fraction;
        if !(a > 0.0 && a < 1.0) {
            return fail("/synth/landscape/active_fraction", format!("must lie in (0, 1), got {a}"));
        }
        if synth.landscape.segments == 0 {
            return fail("/synth/landscape/segments", "must be positive".into());
        }
        Ok(())
    }

    pub fn pipeline_params(&self) -> PipelineParams {
        PipelineParams {
            regressor: self.regressor,
            sampling: self.sampling.clone(),
            prior: self.prior.clone(),
            degradation: self.degradation,
            covariance: self.covariance.clone(),
            threshold: self.threshold,
            mean_source: self.mean_source,
        }
    }

    /// Explicit splits followed by the expanded grid.
    pub fn splits(&self) -> Vec<SplitSpec> {
        let mut out = self.evaluation.splits.clone();
        if let Some(g) = &self.evaluation.grid {
            let seeded = evaluation::split_grid(&g.q_train, &g.q_test, &g.pool_modes, g.pool_size, g.delta_ref);
            out.extend(seeded.into_iter().map(|s| SplitSpec { seed: g.seed, ..s }));
        }
        out
    }

    pub fn models(&self) -> Vec<RegressorSpec> {
        if self.evaluation.models.is_empty() {
            vec![self.regressor]
        } else {
            self.evaluation.models.clone()
        }
    }

    pub fn variants(&self) -> Vec<ScoreVariant> {
        if self.evaluation.variants.is_empty() {
            ScoreVariant::ALL.to_vec()
        } else {
            self.evaluation.variants.clone()
        }
    }
}

fn validate_regressor(at: &str, spec: &RegressorSpec) -> Result<()> {
    match spec.kind {
        RegressorKind::Ridge if !(spec.ridge_lambda > 0.0 && spec.ridge_lambda.is_finite()) => Err(CliError::config(
            format!("{at}/ridge_lambda"),
            format!("must be positive, got {}", spec.ridge_lambda),
        )),
        RegressorKind::RandomForest if spec.rf.n_trees == 0 => {
            Err(CliError::config(format!("{at}/rf/n_trees"), "must be positive"))
        }
        RegressorKind::RandomForest if spec.rf.max_features == Some(0) => {
            Err(CliError::config(format!("{at}/rf/max_features"), "must be positive"))
        }
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_pointer(text: &str) -> String {
        match PipelineConfig::parse(text) {
            Err(CliError::Config { pointer, .. }) => pointer,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let c = PipelineConfig::parse(r#"{"threshold": 7.0}"#).unwrap();
        assert_eq!(c.sampling, SamplingParams::default());
        assert_eq!(c.models(), vec![RegressorSpec::default()]);
        assert_eq!(c.variants().len(), 4);
    }

    #[test]
    fn unknown_keys_are_reported_with_a_pointer() {
        assert_eq!(err_pointer(r#"{"threshold": 7, "sampling": {"fold": 2}}"#), "/sampling/fold");
        assert_eq!(err_pointer(r#"{"threshold": 7, "bogus": 1}"#), "/bogus");
    }

    #[test]
    fn type_errors_are_reported_with_a_pointer() {
        assert_eq!(
            err_pointer(r#"{"threshold": 7, "evaluation": {"splits": [{"q_train": "x"}]}}"#),
            "/evaluation/splits/0/q_train"
        );
        assert_eq!(err_pointer(r#"{"threshold": 7, "sampling": {"folds": -1}}"#), "/sampling/folds");
    }

    #[test]
    fn value_errors_are_reported_with_a_pointer() {
        assert_eq!(err_pointer(r#"{"threshold": 7, "sampling": {"folds": 1}}"#), "/sampling/folds");
        assert_eq!(err_pointer(r#"{"threshold": 7, "prior": {"gamma": 0}}"#), "/prior/gamma");
        assert_eq!(
            err_pointer(r#"{"threshold": 7, "paths": {"labelled": "a.csv", "unlabelled": ["b.csv"]}}"#),
            "/l_min"
        );
        assert_eq!(
            err_pointer(
                r#"{"threshold": 7, "evaluation": {"splits": [{"q_train": 8, "q_test": 7, "pool_mode": "near"}]}}"#
            ),
            "/evaluation/splits/0"
        );
        assert_eq!(
            err_pointer(r#"{"threshold": 7, "regressor": {"kind": "ridge", "ridge_lambda": 0}}"#),
            "/regressor/ridge_lambda"
        );
    }

    #[test]
    fn default_grid_expands_to_every_threshold_pair() {
        let c = PipelineConfig::parse(r#"{"threshold": 7, "evaluation": {"grid": {}}}"#).unwrap();
        let labels: Vec<String> = c.splits().iter().map(SplitSpec::label).collect();
        assert_eq!(
            labels,
            [
                "q7-7.5_near",
                "q7-7.5_far",
                "q7-8_near",
                "q7-8_far",
                "q7.5-7.5_near",
                "q7.5-7.5_far",
                "q7.5-8_near",
                "q7.5-8_far"
            ]
        );
        assert_eq!(
            err_pointer(r#"{"threshold": 7, "evaluation": {"grid": {"q_train": [9], "q_test": [8]}}}"#),
            "/evaluation/grid"
        );
    }

    #[test]
    fn missing_threshold_is_a_config_error() {
        assert_eq!(err_pointer(r#"{}"#), "/");
    }

    #[test]
    fn relative_paths_resolve_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"threshold": 7, "l_min": 5, "paths": {"labelled": "l.csv", "unlabelled": ["/abs/u.csv"], "workdir": "w"}}"#,
        )
        .unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.paths.labelled, Some(dir.path().join("l.csv")));
        assert_eq!(c.paths.unlabelled, vec![PathBuf::from("/abs/u.csv")]);
        assert_eq!(c.paths.workdir, Some(dir.path().join("w")));
    }
}
