//! Supervised activity models over fingerprint bits.

mod forest;
mod ridge;

use serde::{Deserialize, Serialize};

pub use forest::{ForestModel, ForestParams, Node, RegressionTree};
pub use ridge::{RidgeGram, RidgeModel};

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;

/// Serialization format version of [`FittedModel`] blobs.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorKind {
    Ridge,
    RandomForest,
}

impl RegressorKind {
    pub fn name(self) -> &'static str {
        match self {
            RegressorKind::Ridge => "ridge",
            RegressorKind::RandomForest => "random_forest",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorSpec {
    pub kind: RegressorKind,
    pub ridge_lambda: f64,
    pub rf: ForestParams,
    pub seed: u64,
}

impl Default for RegressorSpec {
    fn default() -> Self {
        Self {
            kind: RegressorKind::Ridge,
            ridge_lambda: 1.0,
            rf: ForestParams::default(),
            seed: 0,
        }
    }
}

impl RegressorSpec {
    pub fn ridge(lambda: f64) -> Self {
        Self {
            kind: RegressorKind::Ridge,
            ridge_lambda: lambda,
            ..Default::default()
        }
    }

    pub fn random_forest(rf: ForestParams, seed: u64) -> Self {
        Self {
            kind: RegressorKind::RandomForest,
            rf,
            seed,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelParams {
    Ridge(RidgeModel),
    RandomForest(ForestModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub format_version: u32,
    pub spec: RegressorSpec,
    pub nbits: usize,
    pub params: ModelParams,
}

fn check_training_data(xs: &[Fingerprint], ys: &[f64]) -> Result<usize> {
    if xs.len() != ys.len() {
        return Err(Error::domain(format!(
            "{} fingerprints but {} responses",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::domain(format!("need at least 2 training rows, got {}", xs.len())));
    }
    let p = xs[0].len();
    if let Some(x) = xs.iter().find(|x| x.len() != p) {
        return Err(Error::Dimension {
            expected: p,
            found: x.len(),
        });
    }
    if let Some(y) = ys.iter().find(|y| !y.is_finite()) {
        return Err(Error::domain(format!("non-finite response {y}")));
    }
    Ok(p)
}

pub fn fit(spec: &RegressorSpec, xs: &[Fingerprint], ys: &[f64]) -> Result<FittedModel> {
    let p = check_training_data(xs, ys)?;
    let params = match spec.kind {
        RegressorKind::Ridge => {
            if !(spec.ridge_lambda >= 0.0) {
                return Err(Error::config(format!("ridge_lambda must be >= 0, got {}", spec.ridge_lambda)));
            }
            let gram = RidgeGram::from_rows(p, xs.iter().zip(ys.iter().copied()));
            ModelParams::Ridge(gram.solve(spec.ridge_lambda)?)
        }
        RegressorKind::RandomForest => ModelParams::RandomForest(ForestModel::fit(xs, ys, &spec.rf, spec.seed)),
    };
    Ok(FittedModel {
        format_version: MODEL_FORMAT_VERSION,
        spec: *spec,
        nbits: p,
        params,
    })
}

impl FittedModel {
    pub fn predict(&self, x: &Fingerprint) -> Result<f64> {
        if x.len() != self.nbits {
            return Err(Error::Dimension {
                expected: self.nbits,
                found: x.len(),
            });
        }
        Ok(self.predict_unchecked(x))
    }

    pub(crate) fn predict_unchecked(&self, x: &Fingerprint) -> f64 {
        match &self.params {
            ModelParams::Ridge(m) => m.predict(x),
            ModelParams::RandomForest(f) => f.predict(x),
        }
    }

    pub fn kind(&self) -> RegressorKind {
        self.spec.kind
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: FittedModel = serde_json::from_str(text)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::config(format!(
                "model format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
                model.format_version
            )));
        }
        Ok(model)
    }
}
