//! Seeded synthetic activity landscapes with known ground truth.
//!
//! Fingerprints are drawn around random cluster centres. A screened set is
//! labelled by a reporting cutoff, and an independent unlabelled pool is
//! split into segments by distance decile to the labelled actives, with
//! jitter, so that segment order correlates with distance.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, LabelledCompound, LabelledSet, UnlabelledCompound, UnlabelledPool};
use crate::error::{Error, Result};
use crate::fingerprint::{distance_unchecked, Fingerprint, SetwiseIndex};
use crate::seed;

/// Bits carrying the signal of the smooth kind.
pub const SMOOTH_BITS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandscapeKind {
    /// Affine in a weighted popcount over the first 16 bits.
    Smooth,
    /// Activity peaks around a few planted cluster centres.
    Clustered,
    /// Independent of structure.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeSpec {
    pub p: usize,
    pub kind: LandscapeKind,
    /// Fraction of the screened set at or above the cutoff.
    pub active_fraction: f64,
    pub noise_sd: f64,
    pub seed: u64,
    pub clusters: usize,
    /// Cluster centres are scattered around this many family centres.
    pub families: usize,
    /// Bit flip rate from a family centre to its cluster centres.
    pub family_flip_rate: f64,
    pub active_clusters: usize,
    /// Fraction of compounds drawn uniformly rather than around a centre.
    pub scatter_fraction: f64,
    /// Bit density of centres and scattered compounds.
    pub density: f64,
    /// Range of per-cluster bit flip rates.
    pub flip_rate: (f64, f64),
    /// Distance scale of the activity peaks of the clustered kind.
    pub peak_width: f64,
    pub segments: usize,
    /// Standard deviation, in deciles, of the noise added before segmenting.
    pub segment_jitter: f64,
    /// Overrides the cutoff implied by `active_fraction`.
    pub cutoff: Option<f64>,
}

impl Default for LandscapeSpec {
    fn default() -> Self {
        Self {
            p: 256,
            kind: LandscapeKind::Clustered,
            active_fraction: 0.01,
            noise_sd: 0.1,
            seed: 0,
            clusters: 40,
            families: 8,
            family_flip_rate: 0.2,
            active_clusters: 4,
            scatter_fraction: 0.1,
            density: 0.3,
            flip_rate: (0.05, 0.15),
            peak_width: 0.15,
            segments: 10,
            segment_jitter: 2.0,
            cutoff: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: String,
    pub fp: Fingerprint,
    pub activity: f64,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticData {
    pub spec: LandscapeSpec,
    pub cutoff: f64,
    /// Every screened compound, labelled or not.
    pub screened: Vec<TruthRecord>,
    /// Screened compounds at or above the cutoff.
    pub labelled: LabelledSet,
    pub unlabelled: UnlabelledPool,
    /// Ground truth for `unlabelled`, in the same order.
    pub truth: Vec<TruthRecord>,
}

struct Universe {
    centres: Vec<Vec<bool>>,
    flip: Vec<f64>,
    /// Centres of the clustered kind's peaks with their heights.
    peaks: Vec<(Fingerprint, f64)>,
    weights: Vec<f64>,
}

impl Universe {
    fn new(spec: &LandscapeSpec) -> Result<Self> {
        if spec.clusters == 0 && spec.scatter_fraction < 1.0 {
            return Err(Error::config("need at least one cluster unless every compound is scattered"));
        }
        if spec.active_clusters > spec.clusters {
            return Err(Error::config("active_clusters exceeds clusters"));
        }
        let mut rng = seed::rng(seed::substream(spec.seed, "universe"));
        let families: Vec<Vec<bool>> = (0..spec.families.max(1))
            .map(|_| (0..spec.p).map(|_| rng.gen_bool(spec.density)).collect())
            .collect();
        let centres: Vec<Vec<bool>> = (0..spec.clusters)
            .map(|c| perturb(&families[c % families.len()], spec.family_flip_rate, spec.density, &mut rng))
            .collect();
        let (lo, hi) = spec.flip_rate;
        let flip = (0..spec.clusters).map(|_| rng.gen_range(lo..=hi)).collect();
        let peaks = centres[..spec.active_clusters]
            .iter()
            .map(|c| Ok((Fingerprint::from_bits(c)?, rng.gen_range(3.0..5.0))))
            .collect::<Result<_>>()?;
        let weighted = spec.p.min(SMOOTH_BITS);
        let weights = (0..spec.p)
            .map(|j| if j < weighted { rng.gen_range(0.5..1.5) } else { 0.0 })
            .collect();
        Ok(Self {
            centres,
            flip,
            peaks,
            weights,
        })
    }

    fn compound(&self, spec: &LandscapeSpec, rng: &mut seed::Rng) -> Result<(Fingerprint, f64)> {
        let bits: Vec<bool> = if self.centres.is_empty() || rng.gen_bool(spec.scatter_fraction) {
            (0..spec.p).map(|_| rng.gen_bool(spec.density)).collect()
        } else {
            let c = rng.gen_range(0..self.centres.len());
            perturb(&self.centres[c], self.flip[c], spec.density, rng)
        };
        let fp = Fingerprint::from_bits(&bits)?;
        let noise: f64 = StandardNormal.sample(rng);
        let activity = match spec.kind {
            LandscapeKind::Smooth => {
                let total: f64 = self.weights.iter().sum();
                let score: f64 = fp.ones().map(|j| self.weights[j]).sum();
                5.0 + 2.0 * score / total + spec.noise_sd * noise
            }
            LandscapeKind::Clustered => {
                let peak = self
                    .peaks
                    .iter()
                    .map(|(centre, height)| height * (-distance_unchecked(&fp, centre) / spec.peak_width).exp())
                    .fold(0.0, f64::max);
                4.0 + peak + spec.noise_sd * noise
            }
            LandscapeKind::Noise => 5.0 + noise,
        };
        Ok((fp, activity))
    }

    fn draw(&self, spec: &LandscapeSpec, stream: &str, prefix: &str, n: usize) -> Result<Vec<(String, Fingerprint, f64)>> {
        let base = seed::substream(spec.seed, stream);
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = seed::rng(seed::indexed(base, i as u64));
                let (fp, y) = self.compound(spec, &mut rng)?;
                Ok((format!("{prefix}{i:06}"), fp, y))
            })
            .collect()
    }
}

/// Turn ones off at rate `off` and zeros on at the rate that keeps the
/// expected density unchanged.
fn perturb(bits: &[bool], off: f64, density: f64, rng: &mut seed::Rng) -> Vec<bool> {
    let on = (off * density / (1.0 - density)).min(1.0);
    bits.iter()
        .map(|&b| if b { !rng.gen_bool(off) } else { rng.gen_bool(on) })
        .collect()
}

/// Cutoff leaving `fraction` of `values` at or above it.
fn upper_quantile(values: &[f64], fraction: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((fraction * values.len() as f64).round() as usize).clamp(1, values.len());
    sorted[k - 1]
}

/// Segment by decile of `distances` plus Gaussian jitter measured in deciles.
fn assign_segments(distances: &[f64], segments: usize, jitter: f64, seed: u64) -> Vec<usize> {
    let n = distances.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let mut rank = vec![0usize; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let mut rng = seed::rng(seed);
    (0..n)
        .map(|i| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let position = segments as f64 * (rank[i] as f64 + 0.5) / n as f64 + jitter * noise;
            (position.floor().max(0.0) as usize).min(segments - 1)
        })
        .collect()
}

pub fn generate(spec: &LandscapeSpec, n_screened: usize, n_unlabelled: usize) -> Result<SyntheticData> {
    if n_screened == 0 || n_unlabelled == 0 {
        return Err(Error::config("sizes must be positive"));
    }
    if spec.p == 0 || !spec.p.is_multiple_of(8) {
        return Err(Error::config(format!("fingerprint length {} must be a positive multiple of 8", spec.p)));
    }
    if !(spec.density > 0.0 && spec.density < 1.0) || spec.segments == 0 {
        return Err(Error::config("density must lie in (0, 1) and segments must be positive"));
    }
    let universe = Universe::new(spec)?;
    let screened_raw = universe.draw(spec, "screened", "s", n_screened)?;
    let cutoff = match spec.cutoff {
        Some(c) => c,
        None => {
            if !(spec.active_fraction > 0.0 && spec.active_fraction <= 1.0) {
                return Err(Error::config(format!("active_fraction {} outside (0, 1]", spec.active_fraction)));
            }
            upper_quantile(&screened_raw.iter().map(|r| r.2).collect::<Vec<_>>(), spec.active_fraction)
        }
    };
    let to_truth = |(id, fp, activity): (String, Fingerprint, f64)| TruthRecord {
        id,
        fp,
        activity,
        active: activity >= cutoff,
    };
    let screened: Vec<TruthRecord> = screened_raw.into_iter().map(to_truth).collect();
    let compounds: Vec<LabelledCompound> = screened
        .iter()
        .filter(|r| r.active)
        .map(|r| LabelledCompound {
            id: r.id.clone(),
            fp: r.fp.clone(),
            activity: r.activity,
        })
        .collect();
    if compounds.is_empty() {
        return Err(Error::degenerate(format!("no screened compound reaches the cutoff {cutoff}")));
    }
    let labelled = LabelledSet::new(compounds, cutoff, Some(n_screened as u64))?;

    let known: std::collections::HashSet<&Fingerprint> = labelled.compounds.iter().map(|c| &c.fp).collect();
    let truth: Vec<TruthRecord> = universe
        .draw(spec, "unlabelled", "u", n_unlabelled)?
        .into_iter()
        .map(to_truth)
        .filter(|r| !known.contains(&r.fp))
        .collect();
    if truth.is_empty() {
        return Err(Error::degenerate("every unlabelled compound duplicates a labelled one"));
    }
    let index = SetwiseIndex::new(labelled.fingerprints())?;
    let distances = index.distances(&truth.iter().map(|r| r.fp.clone()).collect::<Vec<_>>())?;
    let segments = assign_segments(
        &distances,
        spec.segments,
        spec.segment_jitter,
        seed::substream(spec.seed, "segments"),
    );
    let unlabelled = UnlabelledPool {
        compounds: truth
            .iter()
            .zip(&segments)
            .map(|(r, &segment)| UnlabelledCompound {
                id: r.id.clone(),
                fp: r.fp.clone(),
                segment,
            })
            .collect(),
        segment_count: spec.segments,
    };
    Ok(SyntheticData {
        spec: spec.clone(),
        cutoff,
        screened,
        labelled,
        unlabelled,
        truth,
    })
}

pub fn write_truth<W: Write>(out: W, records: &[TruthRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "fingerprint", "activity", "active"])?;
    for r in records {
        w.write_record([
            r.id.clone(),
            r.fp.to_hex(),
            format!("{}", r.activity),
            (r.active as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    spec: &'a LandscapeSpec,
    cutoff: f64,
    n_screened: usize,
    n_labelled: usize,
    n_unlabelled: usize,
    n_unlabelled_active: usize,
}

impl SyntheticData {
    /// `labelled.csv`, `unlabelled/segment_NN.csv`, `truth.csv` (pool
    /// ground truth), `screened_truth.csv` and `synthetic.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        dataset::write_labelled(std::fs::File::create(dir.join("labelled.csv"))?, &self.labelled)?;
        dataset::write_unlabelled_segments(&dir.join("unlabelled"), &self.unlabelled)?;
        write_truth(std::fs::File::create(dir.join("truth.csv"))?, &self.truth)?;
        write_truth(std::fs::File::create(dir.join("screened_truth.csv"))?, &self.screened)?;
        let summary = Summary {
            spec: &self.spec,
            cutoff: self.cutoff,
            n_screened: self.screened.len(),
            n_labelled: self.labelled.len(),
            n_unlabelled: self.truth.len(),
            n_unlabelled_active: self.truth.iter().filter(|r| r.active).count(),
        };
        let mut f = std::fs::File::create(dir.join("synthetic.json"))?;
        serde_json::to_writer_pretty(&mut f, &summary)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}
