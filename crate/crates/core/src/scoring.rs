//! Candidate scores and rankings.
//!
//! With `δ` the distance from a candidate to the training set:
//!
//! * `S0` is the model prediction,
//! * `S1 = β(δ)·S0`,
//! * `S2 = P[active | δ]·S1`,
//! * `S3 = P[y ≥ I | active, δ]·P[active | δ]`, where the conditional tail
//!   uses the fitted activity mixture centred on `S1` (or `S2`) with scale
//!   `σ(δ)`.
//!
//! `S0` to `S2` are in standardized activity units, `S3` is a probability.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::SigmaCurve;
use crate::dataset::{LabelledSet, UnlabelledPool};
use crate::degradation::DegradationCurves;
use crate::error::{Error, Result};
use crate::fingerprint::{Fingerprint, SetwiseIndex};
use crate::mixture::MixtureDistribution;
use crate::prior::PriorCurve;
use crate::regressors::FittedModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreVariant {
    S0,
    S1,
    S2,
    S3,
}

impl ScoreVariant {
    pub const ALL: [ScoreVariant; 4] = [ScoreVariant::S0, ScoreVariant::S1, ScoreVariant::S2, ScoreVariant::S3];

    pub fn name(self) -> &'static str {
        match self {
            ScoreVariant::S0 => "S0",
            ScoreVariant::S1 => "S1",
            ScoreVariant::S2 => "S2",
            ScoreVariant::S3 => "S3",
        }
    }
}

/// Centre of the conditional activity distribution used by `S3`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeanSource {
    #[default]
    S1,
    S2,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Scores {
    pub delta: f64,
    pub s0: f64,
    pub s1: Option<f64>,
    pub s2: Option<f64>,
    pub s3: Option<f64>,
}

impl Scores {
    pub fn get(&self, variant: ScoreVariant) -> Option<f64> {
        match variant {
            ScoreVariant::S0 => Some(self.s0),
            ScoreVariant::S1 => self.s1,
            ScoreVariant::S2 => self.s2,
            ScoreVariant::S3 => self.s3,
        }
    }
}

/// Fitted stages needed to score candidates against one training set.
/// Stages left as `None` disable the scores that depend on them.
#[derive(Clone, Debug)]
pub struct Scorer {
    pub model: FittedModel,
    pub train: SetwiseIndex,
    pub prior: Option<PriorCurve>,
    pub degradation: Option<DegradationCurves>,
    pub covariance: Option<SigmaCurve>,
    pub mixture: Option<MixtureDistribution>,
    /// Activity threshold in standardized units.
    pub threshold: f64,
    pub mean_source: MeanSource,
}

fn require<'a, T>(stage: Option<&'a T>, name: &str, variant: ScoreVariant) -> Result<&'a T> {
    stage.ok_or_else(|| Error::config(format!("score {} requires the `{name}` stage", variant.name())))
}

impl Scorer {
    pub fn new(model: FittedModel, train: SetwiseIndex, threshold: f64) -> Result<Self> {
        if train.nbits() != model.nbits {
            return Err(Error::Dimension {
                expected: model.nbits,
                found: train.nbits(),
            });
        }
        if !threshold.is_finite() {
            return Err(Error::config(format!("threshold must be finite, got {threshold}")));
        }
        Ok(Self {
            model,
            train,
            prior: None,
            degradation: None,
            covariance: None,
            mixture: None,
            threshold,
            mean_source: MeanSource::S1,
        })
    }

    /// Error naming the first missing stage that `variant` depends on.
    pub fn check(&self, variant: ScoreVariant) -> Result<()> {
        if variant != ScoreVariant::S0 {
            require(self.degradation.as_ref(), "degrade", variant)?;
        }
        if matches!(variant, ScoreVariant::S2 | ScoreVariant::S3) {
            require(self.prior.as_ref(), "prior", variant)?;
        }
        if variant == ScoreVariant::S3 {
            require(self.covariance.as_ref(), "covariance", variant)?;
            require(self.mixture.as_ref(), "mixture", variant)?;
        }
        Ok(())
    }

    /// Every score whose stages are available.
    pub fn score_all(&self, x: &Fingerprint) -> Result<Scores> {
        let s0 = self.model.predict(x)?;
        let delta = self.train.distance(x)?;
        let mut scores = Scores {
            delta,
            s0,
            ..Default::default()
        };
        let Some(degradation) = &self.degradation else {
            return Ok(scores);
        };
        let s1 = degradation.beta_at(delta) * s0;
        scores.s1 = Some(s1);
        let Some(prior) = &self.prior else {
            return Ok(scores);
        };
        let p_active = prior.prob_active(delta)?;
        let s2 = p_active * s1;
        scores.s2 = Some(s2);
        if let (Some(sig), Some(mixture)) = (&self.covariance, &self.mixture) {
            let mu = match self.mean_source {
                MeanSource::S1 => s1,
                MeanSource::S2 => s2,
            };
            let sigma = sig.sigma(delta)?;
            let tail = if sigma > 0.0 {
                mixture.tail_prob(mu, sigma, self.threshold)?
            } else if mu >= self.threshold {
                1.0
            } else {
                0.0
            };
            scores.s3 = Some(tail * p_active);
        }
        Ok(scores)
    }

    pub fn score_compound(&self, x: &Fingerprint, variant: ScoreVariant) -> Result<f64> {
        self.check(variant)?;
        Ok(self.score_all(x)?.get(variant).expect("stages checked"))
    }

    pub fn rank(&self, candidates: &[Candidate], variant: ScoreVariant) -> Result<RankedList> {
        if candidates.is_empty() {
            return Err(Error::domain("no candidates to rank"));
        }
        self.check(variant)?;
        let scores: Vec<Scores> = candidates
            .par_iter()
            .map(|c| self.score_all(&c.fp))
            .collect::<Result<_>>()?;
        Ok(RankedList::from_scores(candidates, scores, variant))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub fp: Fingerprint,
}

impl Candidate {
    pub fn from_pool(pool: &UnlabelledPool) -> Vec<Candidate> {
        pool.compounds
            .iter()
            .map(|c| Candidate {
                id: c.id.clone(),
                fp: c.fp.clone(),
            })
            .collect()
    }

    pub fn from_labelled(set: &LabelledSet) -> Vec<Candidate> {
        set.compounds
            .iter()
            .map(|c| Candidate {
                id: c.id.clone(),
                fp: c.fp.clone(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedEntry {
    /// 1-based.
    pub rank: usize,
    pub id: String,
    pub score: f64,
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedList {
    pub variant: ScoreVariant,
    pub entries: Vec<RankedEntry>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

impl RankedList {
    /// Sort by the chosen score, descending, ties by id.
    pub fn from_scores(candidates: &[Candidate], scores: Vec<Scores>, variant: ScoreVariant) -> Self {
        let mut rows: Vec<(f64, &str, Scores)> = candidates
            .iter()
            .zip(scores)
            .map(|(c, s)| (s.get(variant).unwrap_or(f64::NAN), c.id.as_str(), s))
            .collect();
        rows.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let entries = rows
            .into_iter()
            .enumerate()
            .map(|(i, (score, id, scores))| RankedEntry {
                rank: i + 1,
                id: id.to_string(),
                score,
                scores,
            })
            .collect();
        RankedList { variant, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    /// CSV `rank,id,score,delta,s0,s1,s2,s3`; unavailable scores are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "id", "score", "delta", "s0", "s1", "s2", "s3"])?;
        for e in &self.entries {
            let s = &e.scores;
            w.write_record([
                e.rank.to_string(),
                e.id.clone(),
                format!("{}", e.score),
                format!("{}", s.delta),
                format!("{}", s.s0),
                cell(s.s1),
                cell(s.s2),
                cell(s.s3),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, variant: ScoreVariant) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let parse = |field: &str, row: usize| -> Result<Option<f64>> {
            if field.is_empty() {
                return Ok(None);
            }
            field
                .parse()
                .map(Some)
                .map_err(|_| Error::domain(format!("ranking row {row}: bad number {field:?}")))
        };
        let mut entries = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != 8 {
                return Err(Error::domain(format!("ranking row {}: expected 8 fields", i + 1)));
            }
            let num = |k: usize| parse(&rec[k], i + 1);
            entries.push(RankedEntry {
                rank: rec[0]
                    .parse()
                    .map_err(|_| Error::domain(format!("ranking row {}: bad rank", i + 1)))?,
                id: rec[1].to_string(),
                score: num(2)?.unwrap_or(f64::NAN),
                scores: Scores {
                    delta: num(3)?.unwrap_or(f64::NAN),
                    s0: num(4)?.unwrap_or(f64::NAN),
                    s1: num(5)?,
                    s2: num(6)?,
                    s3: num(7)?,
                },
            });
        }
        Ok(RankedList { variant, entries })
    }
}
