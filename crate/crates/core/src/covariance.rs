//! Spread of activity differences between labelled compounds as a function
//! of their pairwise distance.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bins;
use crate::dataset::LabelledSet;
use crate::error::{Error, Result};
use crate::fingerprint::distance_unchecked;
use crate::isotonic;
use crate::prior::interpolate;
use crate::seed;

pub const DEFAULT_BIN_WIDTH: f64 = 0.02;
pub const DEFAULT_MIN_PAIRS: u64 = 100;
pub const DEFAULT_MAX_PAIRS: u64 = 5_000_000;

const ROW_CHUNK: usize = 64;
const SAMPLE_CHUNK: u64 = 1 << 16;

/// Per-bin count and sum of squared activity differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairBins {
    pub bin_width: f64,
    pub counts: Vec<u64>,
    pub sum_sq: Vec<f64>,
    /// All distinct pairs were enumerated rather than sampled.
    pub exhaustive: bool,
}

impl PairBins {
    pub fn new(bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0 && bin_width <= 1.0) {
            return Err(Error::config(format!("bin width {bin_width} outside (0, 1]")));
        }
        let k = bins::count_unit(bin_width);
        Ok(Self {
            bin_width,
            counts: vec![0; k],
            sum_sq: vec![0.0; k],
            exhaustive: true,
        })
    }

    pub fn push(&mut self, distance: f64, difference: f64) {
        let k = bins::index_unit(distance, self.bin_width);
        self.counts[k] += 1;
        self.sum_sq[k] += difference * difference;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn merge(mut self, other: &PairBins) -> Self {
        for (k, (&c, &s)) in other.counts.iter().zip(&other.sum_sq).enumerate() {
            self.counts[k] += c;
            self.sum_sq[k] += s;
        }
        self
    }
}

/// Bin distinct unordered pairs of `set` by distance. Every pair is visited
/// when there are at most `max_pairs` of them; otherwise `max_pairs` pairs
/// are drawn uniformly with replacement.
pub fn collect_pair_bins(set: &LabelledSet, bin_width: f64, max_pairs: u64, seed: u64) -> Result<PairBins> {
    let n = set.len();
    if n < 2 {
        return Err(Error::domain(format!("need at least 2 compounds, got {n}")));
    }
    let empty = PairBins::new(bin_width)?;
    let fps = set.fingerprints();
    let ys = set.activities();
    let total_pairs = (n as u64) * (n as u64 - 1) / 2;

    // Chunks are reduced in index order so sums do not depend on scheduling.
    let partials: Vec<PairBins> = if total_pairs <= max_pairs {
        (0..n)
            .collect::<Vec<_>>()
            .par_chunks(ROW_CHUNK)
            .map(|rows| {
                let mut local = empty.clone();
                for &i in rows {
                    for j in i + 1..n {
                        local.push(distance_unchecked(&fps[i], &fps[j]), ys[i] - ys[j]);
                    }
                }
                local
            })
            .collect()
    } else {
        let base = seed::substream(seed, "pair-sample");
        let chunks = max_pairs.div_ceil(SAMPLE_CHUNK);
        (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = seed::rng(seed::indexed(base, c));
                let mut local = empty.clone();
                let size = SAMPLE_CHUNK.min(max_pairs - c * SAMPLE_CHUNK);
                for _ in 0..size {
                    let i = rng.gen_range(0..n);
                    let mut j = rng.gen_range(0..n - 1);
                    if j >= i {
                        j += 1;
                    }
                    local.push(distance_unchecked(&fps[i], &fps[j]), ys[i] - ys[j]);
                }
                local
            })
            .collect()
    };
    let mut out = partials.iter().fold(empty, PairBins::merge);
    out.exhaustive = total_pairs <= max_pairs;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaCurve {
    pub bin_width: f64,
    pub bin_centers: Vec<f64>,
    /// Per-bin estimate before pooling.
    pub raw_sigma: Vec<f64>,
    /// Non-decreasing in distance.
    pub sigma: Vec<f64>,
    pub counts: Vec<u64>,
    pub min_pairs: u64,
}

/// Root mean squared difference per bin with at least `min_pairs` pairs,
/// pooled so that the variance is non-decreasing in distance.
pub fn fit_sigma_curve(pairs: &PairBins, min_pairs: u64) -> Result<SigmaCurve> {
    let mut centers = Vec::new();
    let mut raw_var = Vec::new();
    let mut counts = Vec::new();
    for (k, (&c, &s)) in pairs.counts.iter().zip(&pairs.sum_sq).enumerate() {
        if c >= min_pairs.max(1) {
            centers.push(bins::center(k, pairs.bin_width).min(1.0));
            raw_var.push(s / c as f64);
            counts.push(c);
        }
    }
    if centers.is_empty() {
        return Err(Error::degenerate(format!("no distance bin has at least {min_pairs} pairs")));
    }
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let pooled = isotonic::non_decreasing(&raw_var, &weights);
    Ok(SigmaCurve {
        bin_width: pairs.bin_width,
        bin_centers: centers,
        raw_sigma: raw_var.iter().map(|v| v.sqrt()).collect(),
        sigma: pooled.iter().map(|v| v.max(0.0).sqrt()).collect(),
        counts,
        min_pairs,
    })
}

impl SigmaCurve {
    /// Standard deviation of the activity difference between two compounds at
    /// distance `delta`.
    pub fn sigma(&self, delta: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::domain(format!("distance {delta} outside [0, 1]")));
        }
        Ok(interpolate(&self.bin_centers, &self.sigma, delta))
    }

    /// `covariance.csv` (pooled) and `covariance_raw.csv`, both
    /// `delta,sigma,count`, plus `covariance.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, values) in [("covariance.csv", &self.sigma), ("covariance_raw.csv", &self.raw_sigma)] {
            let mut w = csv::Writer::from_path(dir.join(name))?;
            w.write_record(["delta", "sigma", "count"])?;
            for ((d, s), c) in self.bin_centers.iter().zip(values).zip(&self.counts) {
                w.write_record([format!("{d}"), format!("{s}"), c.to_string()])?;
            }
            w.flush()?;
        }
        let mut f = std::fs::File::create(dir.join("covariance.json"))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(dir.join("covariance.json"))?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabelledCompound;
    use crate::fingerprint::Fingerprint;
    use rand_distr::{Distribution, Normal};

    fn random_set(n: usize, p: usize, seed: u64) -> LabelledSet {
        let mut rng = seed::rng(seed);
        let compounds = (0..n)
            .map(|i| LabelledCompound {
                id: format!("c{i}"),
                fp: Fingerprint::from_bits(&(0..p).map(|_| rng.gen_bool(0.3)).collect::<Vec<_>>()).unwrap(),
                activity: rng.gen_range(5.0..8.0),
            })
            .collect();
        LabelledSet::new(compounds, 5.0, None).unwrap()
    }

    #[test]
    fn four_compounds_give_six_pairs() {
        let set = random_set(4, 16, 1);
        let b = collect_pair_bins(&set, DEFAULT_BIN_WIDTH, DEFAULT_MAX_PAIRS, 0).unwrap();
        assert_eq!(b.total(), 6);
        assert!(b.exhaustive);
    }

    #[test]
    fn identical_fingerprints_land_at_zero() {
        let fp = Fingerprint::from_indices(16, [1, 4]).unwrap();
        let compounds = vec![
            LabelledCompound {
                id: "a".into(),
                fp: fp.clone(),
                activity: 6.0,
            },
            LabelledCompound {
                id: "b".into(),
                fp,
                activity: 7.0,
            },
        ];
        let set = LabelledSet::new(compounds, 5.0, None).unwrap();
        let b = collect_pair_bins(&set, DEFAULT_BIN_WIDTH, DEFAULT_MAX_PAIRS, 0).unwrap();
        assert_eq!(b.counts[0], 1);
        assert_eq!(b.sum_sq[0], 1.0);
    }

    #[test]
    fn sampled_bins_track_exhaustive_proportions() {
        let set = random_set(500, 32, 2);
        let full = collect_pair_bins(&set, DEFAULT_BIN_WIDTH, DEFAULT_MAX_PAIRS, 0).unwrap();
        let m = 60_000;
        let sampled = collect_pair_bins(&set, DEFAULT_BIN_WIDTH, m, 3).unwrap();
        assert!(!sampled.exhaustive);
        assert_eq!(sampled.total(), m);
        let total = full.total() as f64;
        for (&c_full, &c_sample) in full.counts.iter().zip(&sampled.counts) {
            let p = c_full as f64 / total;
            let expected = p * m as f64;
            let sd = (m as f64 * p * (1.0 - p)).sqrt();
            assert!((c_sample as f64 - expected).abs() <= 3.0 * sd + 1e-9, "{c_sample} vs {expected} ± {sd}");
        }
    }

    #[test]
    fn closed_form_bins() {
        let mut b = PairBins::new(DEFAULT_BIN_WIDTH).unwrap();
        b.push(0.3, 1.0);
        b.push(0.3, -1.0);
        let c = fit_sigma_curve(&b, 1).unwrap();
        assert_eq!(c.sigma, vec![1.0]);

        let mut b = PairBins::new(DEFAULT_BIN_WIDTH).unwrap();
        for _ in 0..10 {
            b.push(0.5, 0.0);
        }
        assert_eq!(fit_sigma_curve(&b, 1).unwrap().sigma, vec![0.0]);
        assert!(fit_sigma_curve(&b, 11).is_err());
    }

    #[test]
    fn known_difference_spread() {
        let mut rng = seed::rng(4);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let mut b = PairBins::new(DEFAULT_BIN_WIDTH).unwrap();
        for _ in 0..20_000 {
            b.push(0.41, normal.sample(&mut rng));
        }
        let s = fit_sigma_curve(&b, DEFAULT_MIN_PAIRS).unwrap().sigma(0.41).unwrap();
        assert!((s - 0.5).abs() < 0.02, "{s}");
    }

    #[test]
    fn evaluation_contract() {
        let mut b = PairBins::new(0.1).unwrap();
        for (d, diff) in [(0.15, 1.0), (0.45, 3.0), (0.55, 2.0), (0.85, 4.0)] {
            for _ in 0..5 {
                b.push(d, diff);
            }
        }
        let c = fit_sigma_curve(&b, 5).unwrap();
        // bins at 0.45 and 0.55 are pooled to the mean variance (9 + 4) / 2
        let pooled = 6.5f64.sqrt();
        assert!((c.sigma(0.45).unwrap() - pooled).abs() < 1e-12);
        assert_eq!(c.sigma(0.0).unwrap(), 1.0);
        assert_eq!(c.sigma(1.0).unwrap(), 4.0);
        assert!(c.sigma(1.5).is_err());
        assert_eq!(c.raw_sigma[1], 3.0);
    }

    #[test]
    fn file_outputs() {
        let set = random_set(80, 16, 5);
        let b = collect_pair_bins(&set, DEFAULT_BIN_WIDTH, DEFAULT_MAX_PAIRS, 0).unwrap();
        let c = fit_sigma_curve(&b, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        assert_eq!(SigmaCurve::read(dir.path()).unwrap(), c);
        let text = std::fs::read_to_string(dir.path().join("covariance_raw.csv")).unwrap();
        assert!(text.starts_with("delta,sigma,count\n"));
    }

    proptest::proptest! {
        #[test]
        fn pooled_curve_is_monotone_and_mean_preserving(
            rows in proptest::collection::vec((0.0f64..=1.0, -3.0f64..3.0), 20..200),
            probes in proptest::collection::vec(0.0f64..=1.0, 2..10),
        ) {
            let mut b = PairBins::new(0.1).unwrap();
            let mut flipped = PairBins::new(0.1).unwrap();
            for &(d, diff) in &rows {
                b.push(d, diff);
                flipped.push(d, -diff);
            }
            let c = fit_sigma_curve(&b, 1).unwrap();
            proptest::prop_assert_eq!(&c, &fit_sigma_curve(&flipped, 1).unwrap());
            let mut probes = probes;
            probes.sort_by(f64::total_cmp);
            for w in probes.windows(2) {
                proptest::prop_assert!(c.sigma(w[0]).unwrap() <= c.sigma(w[1]).unwrap() + 1e-12);
            }
            let mean = |s: &[f64]| -> f64 {
                s.iter().zip(&c.counts).map(|(v, &n)| v * v * n as f64).sum::<f64>()
            };
            proptest::prop_assert!((mean(&c.sigma) - mean(&c.raw_sigma)).abs() < 1e-9 * mean(&c.raw_sigma).max(1.0));
        }
    }
}
