//! Empirical distance samples behind the activity prior.
//!
//! * Active sample: setwise distances of labelled compounds to the other
//!   folds of a random partition ("cross-prediction"), which approximates
//!   the distribution of `d(x, L)` for active `x`.
//! * Background sample: setwise distances to `L` of unlabelled compounds
//!   drawn segment by segment, each segment weighted by how many of its
//!   compounds sit at a chosen reference distance.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bins;
use crate::dataset::{LabelledSet, UnlabelledPool};
use crate::error::{Error, Result};
use crate::fingerprint::SetwiseIndex;
use crate::seed;

/// Width of the distance bin used to count compounds "at" a distance.
pub const DEFAULT_BIN_WIDTH: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Active,
    Background,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleParams {
    Active {
        v: usize,
        k: usize,
    },
    Background {
        delta_weight: f64,
        m: usize,
        bin_width: f64,
        segment_counts: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceSample {
    pub values: Vec<f64>,
    pub kind: SampleKind,
    pub seed: u64,
    pub params: SampleParams,
}

impl DistanceSample {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Cross-prediction sample: `k` random partitions of `L` into `v` folds of
/// near-equal size; each compound contributes its setwise distance to the
/// union of the other folds (for `v = 2`, the opposite fold).
///
/// Values are ordered repetition-major, then by compound position in `L`,
/// so `values[r * n + i]` belongs to compound `i` in repetition `r`.
pub fn sample_active_setwise(set: &LabelledSet, v: usize, k: usize, seed: u64) -> Result<DistanceSample> {
    let n = set.len();
    if v < 2 || k < 1 {
        return Err(Error::domain(format!("need v >= 2 and k >= 1, got v={v}, k={k}")));
    }
    if n < 2 * v {
        return Err(Error::domain(format!(
            "cross-prediction with v={v} needs at least {} compounds, got {n}",
            2 * v
        )));
    }
    let mut rng = seed::rng(seed);
    let mut values = vec![0.0; n * k];
    for rep in 0..k {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut fold_of = vec![0usize; n];
        for (pos, &i) in order.iter().enumerate() {
            fold_of[i] = pos % v;
        }
        for fold in 0..v {
            let (members, others): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fold_of[i] == fold);
            let index = SetwiseIndex::new(others.iter().map(|&i| set.compounds[i].fp.clone()).collect())?;
            let queries: Vec<_> = members.iter().map(|&i| set.compounds[i].fp.clone()).collect();
            for (&i, d) in members.iter().zip(index.distances(&queries)?) {
                values[rep * n + i] = d;
            }
        }
    }
    Ok(DistanceSample {
        values,
        kind: SampleKind::Active,
        seed,
        params: SampleParams::Active { v, k },
    })
}

/// Per-segment number of items whose distance falls in the bin containing
/// `delta`.
pub fn segment_counts(
    distances: &[f64],
    segments: &[usize],
    segment_count: usize,
    delta: f64,
    bin_width: f64,
) -> Vec<usize> {
    let target = bins::index(delta, bin_width);
    let mut counts = vec![0usize; segment_count];
    for (&d, &s) in distances.iter().zip(segments) {
        if bins::index(d, bin_width) == target {
            counts[s] += 1;
        }
    }
    counts
}

/// Normalized segment-selection probabilities.
pub fn segment_probabilities(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// Draw `m` distinct items: each draw picks a segment with probability
/// proportional to its weight (renormalized over segments that still have
/// items), then a uniform remaining item of that segment. Returns item
/// indices in draw order.
pub fn draw_by_segment(
    segments: &[usize],
    weights: &[f64],
    m: usize,
    rng: &mut seed::Rng,
) -> Result<Vec<usize>> {
    let mut remaining: Vec<Vec<usize>> = vec![Vec::new(); weights.len()];
    for (i, &s) in segments.iter().enumerate() {
        let bucket = remaining
            .get_mut(s)
            .ok_or_else(|| Error::domain(format!("segment {s} out of range")))?;
        bucket.push(i);
    }
    let mut drawn = Vec::with_capacity(m);
    for _ in 0..m {
        let total: f64 = remaining
            .iter()
            .zip(weights)
            .filter(|(r, _)| !r.is_empty())
            .map(|(_, &w)| w)
            .sum();
        if !(total > 0.0) {
            return Err(Error::domain(format!(
                "segments with positive weight exhausted after {} of {m} draws",
                drawn.len()
            )));
        }
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = None;
        for (s, (r, &w)) in remaining.iter().zip(weights).enumerate() {
            if r.is_empty() || w <= 0.0 {
                continue;
            }
            chosen = Some(s);
            if u < w {
                break;
            }
            u -= w;
        }
        let s = chosen.expect("positive total implies a segment");
        let pos = rng.gen_range(0..remaining[s].len());
        drawn.push(remaining[s].swap_remove(pos));
    }
    Ok(drawn)
}

/// Background sample from precomputed pool-to-`L` setwise distances.
pub fn sample_background_from_distances(
    pool: &UnlabelledPool,
    distances: &[f64],
    delta_weight: f64,
    m: usize,
    bin_width: f64,
    seed: u64,
) -> Result<DistanceSample> {
    if distances.len() != pool.len() {
        return Err(Error::domain("distance vector does not match pool size"));
    }
    if !(delta_weight > 0.0 && delta_weight < 1.0) {
        return Err(Error::domain(format!("delta_weight must lie in (0, 1), got {delta_weight}")));
    }
    if m > pool.len() {
        return Err(Error::domain(format!(
            "requested {m} background compounds from a pool of {}",
            pool.len()
        )));
    }
    let segments = pool.segments();
    let counts = segment_counts(distances, &segments, pool.segment_count, delta_weight, bin_width);
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::domain(format!(
            "no pool compounds at distance {delta_weight} (bin width {bin_width})"
        )));
    }
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let mut rng = seed::rng(seed);
    let drawn = draw_by_segment(&segments, &weights, m, &mut rng)?;
    Ok(DistanceSample {
        values: drawn.iter().map(|&i| distances[i]).collect(),
        kind: SampleKind::Background,
        seed,
        params: SampleParams::Background {
            delta_weight,
            m,
            bin_width,
            segment_counts: counts,
        },
    })
}

/// Segment-weighted background sample of setwise distances to `L`.
pub fn sample_background(
    pool: &UnlabelledPool,
    labelled: &LabelledSet,
    delta_weight: f64,
    m: usize,
    seed: u64,
) -> Result<DistanceSample> {
    let index = SetwiseIndex::new(labelled.fingerprints())?;
    let distances = index.distances(&pool.fingerprints())?;
    sample_background_from_distances(pool, &distances, delta_weight, m, DEFAULT_BIN_WIDTH, seed)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    kind: SampleKind,
    seed: u64,
    params: SampleParams,
    count: usize,
}

/// Persist as `<stem>.csv` (single column `distance`) and `<stem>.json`.
pub fn write_sample(dir: &Path, stem: &str, sample: &DistanceSample) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
    w.write_record(["distance"])?;
    for v in &sample.values {
        w.write_record([format!("{v}")])?;
    }
    w.flush()?;
    let sidecar = Sidecar {
        kind: sample.kind,
        seed: sample.seed,
        params: sample.params.clone(),
        count: sample.values.len(),
    };
    let mut f = std::fs::File::create(dir.join(format!("{stem}.json")))?;
    serde_json::to_writer_pretty(&mut f, &sidecar)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_sample(dir: &Path, stem: &str) -> Result<DistanceSample> {
    let sidecar: Sidecar = serde_json::from_reader(std::fs::File::open(dir.join(format!("{stem}.json")))?)?;
    let mut rdr = csv::Reader::from_path(dir.join(format!("{stem}.csv")))?;
    let mut values = Vec::with_capacity(sidecar.count);
    for rec in rdr.records() {
        let rec = rec?;
        values.push(
            rec[0]
                .parse::<f64>()
                .map_err(|e| Error::domain(format!("bad distance {:?}: {e}", &rec[0])))?,
        );
    }
    if values.len() != sidecar.count {
        return Err(Error::domain(format!(
            "sample {stem}: sidecar says {} values, csv has {}",
            sidecar.count,
            values.len()
        )));
    }
    Ok(DistanceSample {
        values,
        kind: sidecar.kind,
        seed: sidecar.seed,
        params: sidecar.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{LabelledCompound, UnlabelledCompound};
    use crate::fingerprint::Fingerprint;

    fn labelled(fps: Vec<Fingerprint>) -> LabelledSet {
        let compounds = fps
            .into_iter()
            .enumerate()
            .map(|(i, fp)| LabelledCompound {
                id: format!("l{i}"),
                fp,
                activity: 1.0,
            })
            .collect();
        LabelledSet::new(compounds, 0.0, None).unwrap()
    }

    fn fp(ones: &[usize]) -> Fingerprint {
        Fingerprint::from_indices(16, ones.iter().copied()).unwrap()
    }

    #[test]
    fn active_sample_v2_small() {
        let set = labelled(vec![fp(&[0]), fp(&[0, 1]), fp(&[2]), fp(&[3, 4])]);
        let s = sample_active_setwise(&set, 2, 1, 3).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.values.iter().all(|d| (0.0..=1.0).contains(d)));
    }

    #[test]
    fn active_sample_each_compound_contributes_k() {
        let fps: Vec<_> = (0..13).map(|i| fp(&[i % 16, (i * 3) % 16])).collect();
        let set = labelled(fps.clone());
        let s = sample_active_setwise(&set, 2, 5, 9).unwrap();
        assert_eq!(s.len(), 65);
        // Every value must equal the compound's distance to some fold that
        // excludes it, hence at least its distance to L \ {self}.
        for rep in 0..5 {
            for i in 0..13 {
                let others: Vec<_> = fps.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, f)| f.clone()).collect();
                let loo = crate::fingerprint::setwise_distance(&fps[i], &others).unwrap();
                assert!(s.values[rep * 13 + i] >= loo);
            }
        }
    }

    #[test]
    fn split_duplicates_give_zero_distances() {
        let set = labelled(vec![fp(&[1]); 6]);
        let s = sample_active_setwise(&set, 2, 2, 1).unwrap();
        assert!(s.values.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn active_sample_too_small() {
        let set = labelled(vec![fp(&[1]), fp(&[2]), fp(&[3])]);
        assert!(matches!(sample_active_setwise(&set, 2, 1, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn active_sample_is_deterministic() {
        let set = labelled((0..20).map(|i| fp(&[i % 16, (i * 7) % 16, (i * 5) % 16])).collect());
        let a = sample_active_setwise(&set, 3, 4, 77).unwrap();
        let b = sample_active_setwise(&set, 3, 4, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selection_probabilities_normalize() {
        assert_eq!(segment_probabilities(&[9.0, 1.0]), vec![0.9, 0.1]);
    }

    #[test]
    fn draws_follow_segment_weights() {
        let segments: Vec<usize> = (0..20_000).map(|i| i % 2).collect();
        let mut rng = seed::rng(5);
        let mut hits = [0usize; 2];
        for _ in 0..400 {
            for i in draw_by_segment(&segments, &[9.0, 1.0], 10, &mut rng).unwrap() {
                hits[segments[i]] += 1;
            }
        }
        let frac = hits[0] as f64 / 4000.0;
        assert!((frac - 0.9).abs() < 0.02, "{frac}");
    }

    #[test]
    fn exhausted_segment_mass_is_renormalized() {
        let segments = vec![0, 1, 1, 1];
        let mut rng = seed::rng(1);
        let mut drawn = draw_by_segment(&segments, &[100.0, 1.0], 4, &mut rng).unwrap();
        drawn.sort();
        assert_eq!(drawn, vec![0, 1, 2, 3]);
        assert!(draw_by_segment(&segments, &[1.0, 0.0], 2, &mut rng).is_err());
    }

    fn pool(fps: Vec<(Fingerprint, usize)>, segment_count: usize) -> UnlabelledPool {
        UnlabelledPool {
            compounds: fps
                .into_iter()
                .enumerate()
                .map(|(i, (fp, segment))| UnlabelledCompound {
                    id: format!("u{i}"),
                    fp,
                    segment,
                })
                .collect(),
            segment_count,
        }
    }

    #[test]
    fn single_segment_is_uniform_without_replacement() {
        let set = labelled(vec![fp(&[0, 1])]);
        let p = pool((2..12).map(|i| (fp(&[0, i]), 0)).collect(), 1);
        // every pool compound is at distance 2/3 from L
        let s = sample_background(&p, &set, 0.665, 10, 3).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.values.iter().all(|&d| d > 0.0));
        assert!(sample_background(&p, &set, 0.665, 11, 3).is_err());
    }

    #[test]
    fn no_compounds_at_reference_distance_is_an_error() {
        let set = labelled(vec![fp(&[0, 1])]);
        let p = pool((2..12).map(|i| (fp(&[0, i]), 0)).collect(), 1);
        assert!(matches!(sample_background(&p, &set, 0.15, 5, 3), Err(Error::Domain(_))));
    }

    #[test]
    fn sample_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = DistanceSample {
            values: vec![0.1, 0.25, 1.0 / 3.0],
            kind: SampleKind::Background,
            seed: 4,
            params: SampleParams::Background {
                delta_weight: 0.15,
                m: 3,
                bin_width: 0.01,
                segment_counts: vec![2, 1],
            },
        };
        write_sample(dir.path(), "background", &s).unwrap();
        assert_eq!(read_sample(dir.path(), "background").unwrap(), s);
    }
}
