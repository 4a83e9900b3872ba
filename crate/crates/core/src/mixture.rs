//! Heavy-tailed model of active-compound activities: an equal-weight average
//! of a fitted normal and a fitted Student-t distribution.

use std::f64::consts::{PI, SQRT_2};
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::optim::NelderMead;
use crate::seed;

pub const MIN_VALUES: usize = 30;
const T_STARTS: usize = 8;
const DF_MIN: f64 = 1e-2;
const DF_MAX: f64 = 1e8;
/// Beyond this many degrees of freedom the t CDF is evaluated as a normal.
const DF_NORMAL: f64 = 1e7;
/// Interquartile range of the standard normal.
const NORMAL_IQR: f64 = 1.348_979_500_392_163_5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalComponent {
    pub mean: f64,
    pub sd: f64,
}

impl NormalComponent {
    pub fn cdf(&self, x: f64) -> f64 {
        0.5 * erfc(-(x - self.mean) / (self.sd * SQRT_2))
    }

    pub fn sf(&self, x: f64) -> f64 {
        0.5 * erfc((x - self.mean) / (self.sd * SQRT_2))
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        (-0.5 * z * z).exp() / (self.sd * (2.0 * PI).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentTComponent {
    pub df: f64,
    pub loc: f64,
    pub scale: f64,
}

impl StudentTComponent {
    fn upper_tail_std(&self, z: f64) -> f64 {
        if self.df > DF_NORMAL {
            return 0.5 * erfc(z / SQRT_2);
        }
        let half = 0.5 * beta_reg(0.5 * self.df, 0.5, self.df / (self.df + z * z));
        if z >= 0.0 {
            half
        } else {
            1.0 - half
        }
    }

    pub fn sf(&self, x: f64) -> f64 {
        self.upper_tail_std((x - self.loc) / self.scale)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.upper_tail_std(-(x - self.loc) / self.scale)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let z = (x - self.loc) / self.scale;
        let v = self.df;
        ln_gamma(0.5 * (v + 1.0)) - ln_gamma(0.5 * v) - 0.5 * (v * PI).ln() - self.scale.ln()
            - 0.5 * (v + 1.0) * (z * z / v).ln_1p()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardizationMethod {
    /// Mixture mean and standard deviation.
    Moments,
    /// Median and interquartile range, used when the variance is infinite.
    Quantiles,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub location: f64,
    pub scale: f64,
    pub method: StandardizationMethod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureDistribution {
    pub normal: NormalComponent,
    /// `None` when the t fit failed and only the normal is used.
    pub student_t: Option<StudentTComponent>,
    pub standardization: Standardization,
    pub n: usize,
}

fn population_moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn neg_log_likelihood(values: &[f64], t: &StudentTComponent) -> f64 {
    let v = t.df;
    let constant = ln_gamma(0.5 * (v + 1.0)) - ln_gamma(0.5 * v) - 0.5 * (v * PI).ln() - t.scale.ln();
    let kernel: f64 = values
        .iter()
        .map(|x| {
            let z = (x - t.loc) / t.scale;
            (z * z / v).ln_1p()
        })
        .sum();
    -(values.len() as f64 * constant - 0.5 * (v + 1.0) * kernel)
}

fn quantile_of_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Maximum-likelihood Student-t fit, multistart over `(ln df, loc, ln scale)`
/// on data rescaled to unit spread.
pub fn fit_student_t(values: &[f64], seed: u64) -> Option<StudentTComponent> {
    let (mean, sd) = population_moments(values);
    if !(sd > 0.0) {
        return None;
    }
    let z: Vec<f64> = values.iter().map(|v| (v - mean) / sd).collect();
    let mut sorted = z.clone();
    sorted.sort_by(f64::total_cmp);
    let median = quantile_of_sorted(&sorted, 0.5);
    let iqr_scale = ((quantile_of_sorted(&sorted, 0.75) - quantile_of_sorted(&sorted, 0.25)) / NORMAL_IQR).max(1e-3);

    let unpack = |u: &[f64]| StudentTComponent {
        df: u[0].exp().clamp(DF_MIN, DF_MAX),
        loc: u[1],
        scale: u[2].exp(),
    };
    let objective = |u: &[f64]| neg_log_likelihood(&z, &unpack(u));

    let mut starts: Vec<[f64; 3]> = [1.0f64, 4.0, 30.0]
        .iter()
        .flat_map(|&df| [[df.ln(), median, iqr_scale.ln()], [df.ln(), 0.0, 0.0]])
        .collect();
    let mut rng = seed::rng(seed::substream(seed, "student-t-starts"));
    while starts.len() < T_STARTS {
        starts.push([rng.gen_range(-1.0..6.0), rng.gen_range(-0.5..0.5), rng.gen_range(-1.0..0.5)]);
    }
    let nm = NelderMead {
        max_iter: 3000,
        step: 0.3,
        ..Default::default()
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for s in &starts {
        let first = nm.minimize(objective, s);
        let m = nm.minimize(objective, &first.x);
        if m.value.is_finite() && best.as_ref().is_none_or(|(v, _)| m.value < *v) {
            best = Some((m.value, m.x));
        }
    }
    let (_, mut u) = best?;
    // the likelihood is nearly flat in df for light tails, which stalls the
    // simplex before loc and scale are resolved
    let ln_df = u[0];
    let inner = nm.minimize(|w: &[f64]| objective(&[ln_df, w[0], w[1]]), &u[1..]);
    if inner.value.is_finite() {
        u[1] = inner.x[0];
        u[2] = inner.x[1];
    }
    let t = unpack(&u);
    Some(StudentTComponent {
        df: t.df,
        loc: mean + sd * t.loc,
        scale: sd * t.scale,
    })
}

pub fn fit_mixture(values: &[f64], seed: u64) -> Result<MixtureDistribution> {
    if values.len() < MIN_VALUES {
        return Err(Error::domain(format!(
            "need at least {MIN_VALUES} activity values, got {}",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::domain(format!("non-finite activity {v}")));
    }
    let (mean, sd) = population_moments(values);
    if !(sd > 0.0) {
        return Err(Error::domain("activities have zero variance"));
    }
    let normal = NormalComponent { mean, sd };
    let student_t = fit_student_t(values, seed);
    if student_t.is_none() {
        log::warn!("Student-t fit failed; using the normal component alone");
    }
    let mut dist = MixtureDistribution {
        normal,
        student_t,
        standardization: Standardization {
            location: mean,
            scale: sd,
            method: StandardizationMethod::Moments,
        },
        n: values.len(),
    };
    dist.standardization = dist.compute_standardization();
    Ok(dist)
}

impl MixtureDistribution {
    pub fn cdf(&self, x: f64) -> f64 {
        match &self.student_t {
            Some(t) => 0.5 * (self.normal.cdf(x) + t.cdf(x)),
            None => self.normal.cdf(x),
        }
    }

    pub fn sf(&self, x: f64) -> f64 {
        match &self.student_t {
            Some(t) => 0.5 * (self.normal.sf(x) + t.sf(x)),
            None => self.normal.sf(x),
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match &self.student_t {
            Some(t) => 0.5 * (self.normal.pdf(x) + t.pdf(x)),
            None => self.normal.pdf(x),
        }
    }

    /// Mean and variance of the mixture, when finite.
    pub fn moments(&self) -> Option<(f64, f64)> {
        let n = &self.normal;
        match &self.student_t {
            None => Some((n.mean, n.sd * n.sd)),
            Some(t) if t.df > 2.0 => {
                let mean = 0.5 * (n.mean + t.loc);
                let t_var = t.scale * t.scale * t.df / (t.df - 2.0);
                let second = 0.5 * (n.sd * n.sd + n.mean * n.mean) + 0.5 * (t_var + t.loc * t.loc);
                Some((mean, second - mean * mean))
            }
            Some(_) => None,
        }
    }

    /// Smallest `x` with `cdf(x) >= p`, by bisection.
    pub fn quantile(&self, p: f64) -> f64 {
        let spread = self.normal.sd.max(self.student_t.map_or(0.0, |t| t.scale));
        let (mut lo, mut hi) = (self.normal.mean - spread, self.normal.mean + spread);
        while self.cdf(lo) > p {
            lo -= 2.0 * (hi - lo);
        }
        while self.cdf(hi) < p {
            hi += 2.0 * (hi - lo);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-13 * (1.0 + mid.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    fn compute_standardization(&self) -> Standardization {
        match self.moments() {
            Some((mean, var)) => Standardization {
                location: mean,
                scale: var.sqrt(),
                method: StandardizationMethod::Moments,
            },
            None => Standardization {
                location: self.quantile(0.5),
                scale: (self.quantile(0.75) - self.quantile(0.25)) / NORMAL_IQR,
                method: StandardizationMethod::Quantiles,
            },
        }
    }

    /// `P[Y >= threshold]` for `Y = mu + sigma·Z`, where `Z` is the fitted
    /// mixture shifted and scaled to zero location and unit scale.
    pub fn tail_prob(&self, mu: f64, sigma: f64, threshold: f64) -> Result<f64> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::domain(format!("scale must be positive and finite, got {sigma}")));
        }
        let z = (threshold - mu) / sigma;
        let s = &self.standardization;
        Ok(self.sf(s.location + s.scale * z).clamp(0.0, 1.0))
    }

    /// `mixture.json` plus `mixture_density.csv` (`x,density,normal,student_t`).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("mixture.json"))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        let mut w = csv::Writer::from_path(dir.join("mixture_density.csv"))?;
        w.write_record(["x", "density", "normal", "student_t"])?;
        let (lo, hi) = (self.normal.mean - 6.0 * self.normal.sd, self.normal.mean + 6.0 * self.normal.sd);
        for i in 0..=240 {
            let x = lo + (hi - lo) * i as f64 / 240.0;
            let t = self.student_t.map_or(f64::NAN, |t| t.pdf(x));
            w.write_record([x, self.pdf(x), self.normal.pdf(x), t].map(|v| format!("{v}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(dir.join("mixture.json"))?)?)
    }
}

pub fn tail_prob(dist: &MixtureDistribution, mu: f64, sigma: f64, threshold: f64) -> Result<f64> {
    dist.tail_prob(mu, sigma, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal, StudentT};

    fn phi(x: f64) -> f64 {
        0.5 * erfc(-x / SQRT_2)
    }

    fn normal_sample(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Trapezoid integral of the t density, an independent route to the CDF.
    fn t_cdf_by_quadrature(t: &StudentTComponent, x: f64) -> f64 {
        let lo = t.loc - 2000.0 * t.scale;
        let n = 400_000;
        let h = (x - lo) / n as f64;
        let mut s = 0.5 * (t.pdf(lo) + t.pdf(x));
        for i in 1..n {
            s += t.pdf(lo + i as f64 * h);
        }
        s * h
    }

    #[test]
    fn t_cdf_matches_quadrature() {
        for df in [1.5, 3.0, 12.0] {
            let t = StudentTComponent {
                df,
                loc: 0.3,
                scale: 0.7,
            };
            for x in [-2.0, 0.3, 1.1, 3.0] {
                let q = t_cdf_by_quadrature(&t, x);
                assert!((t.cdf(x) - q).abs() < 2e-3, "df {df} x {x}: {} vs {q}", t.cdf(x));
                assert!((t.cdf(x) + t.sf(x) - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn normal_data_gives_normal_mixture() {
        let values = normal_sample(100_000, 1);
        let dist = fit_mixture(&values, 0).unwrap();
        let t = dist.student_t.unwrap();
        assert!(t.df > 30.0, "{t:?}");
        for i in 0..=80 {
            let x = -4.0 + 0.1 * i as f64;
            assert!((dist.cdf(x) - phi(x)).abs() < 0.01, "x {x}: {}", dist.cdf(x));
        }
    }

    #[test]
    fn recovers_heavy_tails() {
        let mut rng = seed::rng(2);
        let t = StudentT::new(3.0).unwrap();
        let values: Vec<f64> = (0..20_000).map(|_| 5.0 + 0.5 * t.sample(&mut rng)).collect();
        let fit = fit_student_t(&values, 1).unwrap();
        assert!((fit.df - 3.0).abs() < 0.4, "{fit:?}");
        assert!((fit.loc - 5.0).abs() < 0.02);
        assert!((fit.scale - 0.5).abs() < 0.02);
        let dist = fit_mixture(&values, 1).unwrap();
        let far = dist.normal.mean + 4.5 * dist.normal.sd;
        assert!(dist.sf(far) > 100.0 * dist.normal.sf(far));
    }

    #[test]
    fn symmetric_data_is_centered() {
        let half = normal_sample(500, 3);
        let values: Vec<f64> = half.iter().flat_map(|&v| [4.0 + v, 4.0 - v]).collect();
        let dist = fit_mixture(&values, 0).unwrap();
        assert!((dist.cdf(4.0) - 0.5).abs() < 1e-6);
        assert!((dist.tail_prob(1.0, 2.0, 1.0).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn tail_limits_and_errors() {
        let dist = fit_mixture(&normal_sample(300, 4), 0).unwrap();
        assert_eq!(dist.tail_prob(0.0, 1.0, 1e6).unwrap(), 0.0);
        assert_eq!(dist.tail_prob(0.0, 1.0, -1e6).unwrap(), 1.0);
        assert!(dist.tail_prob(0.0, 0.0, 1.0).is_err());
        assert!(fit_mixture(&[1.0; 40], 0).is_err());
        assert!(fit_mixture(&normal_sample(29, 4), 0).is_err());
    }

    #[test]
    fn infinite_variance_uses_quantiles() {
        let dist = MixtureDistribution {
            normal: NormalComponent { mean: 0.0, sd: 1.0 },
            student_t: Some(StudentTComponent {
                df: 1.5,
                loc: 0.0,
                scale: 1.0,
            }),
            standardization: Standardization {
                location: 0.0,
                scale: 1.0,
                method: StandardizationMethod::Moments,
            },
            n: 0,
        };
        let s = dist.compute_standardization();
        assert_eq!(s.method, StandardizationMethod::Quantiles);
        assert!(s.location.abs() < 1e-9);
        let q75 = dist.quantile(0.75);
        assert!((dist.cdf(q75) - 0.75).abs() < 1e-9);
        assert!((s.scale - 2.0 * q75 / NORMAL_IQR).abs() < 1e-9);
    }

    #[test]
    fn moments_match_quadrature() {
        let dist = MixtureDistribution {
            normal: NormalComponent { mean: 6.2, sd: 0.4 },
            student_t: Some(StudentTComponent {
                df: 8.0,
                loc: 6.5,
                scale: 0.3,
            }),
            standardization: Standardization {
                location: 0.0,
                scale: 1.0,
                method: StandardizationMethod::Moments,
            },
            n: 0,
        };
        let (mean, var) = dist.moments().unwrap();
        let (lo, hi, n) = (-40.0, 52.0, 400_000);
        let h = (hi - lo) / n as f64;
        let (mut m1, mut m2) = (0.0, 0.0);
        for i in 0..n {
            let x = lo + (i as f64 + 0.5) * h;
            let d = dist.pdf(x) * h;
            m1 += x * d;
            m2 += x * x * d;
        }
        assert!((mean - m1).abs() < 1e-6, "{mean} vs {m1}");
        assert!((var - (m2 - m1 * m1)).abs() < 1e-4, "{var} vs {}", m2 - m1 * m1);
        let s = dist.compute_standardization();
        assert_eq!(s.method, StandardizationMethod::Moments);
        assert_eq!((s.location, s.scale), (mean, var.sqrt()));
    }

    #[test]
    fn file_round_trip() {
        let dist = fit_mixture(&normal_sample(200, 6), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dist.write(dir.path()).unwrap();
        assert_eq!(MixtureDistribution::read(dir.path()).unwrap(), dist);
    }

    proptest::proptest! {
        #[test]
        fn tail_is_monotone_and_scale_consistent(
            mu in -3.0f64..3.0,
            sigma in 0.05f64..3.0,
            a in -6.0f64..6.0,
            b in -6.0f64..6.0,
        ) {
            let dist = MixtureDistribution {
                normal: NormalComponent { mean: 6.2, sd: 0.4 },
                student_t: Some(StudentTComponent { df: 4.0, loc: 6.1, scale: 0.3 }),
                standardization: Standardization { location: 0.0, scale: 1.0, method: StandardizationMethod::Moments },
                n: 0,
            };
            let dist = MixtureDistribution { standardization: dist.compute_standardization(), ..dist };
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let p_lo = dist.tail_prob(mu, sigma, lo).unwrap();
            let p_hi = dist.tail_prob(mu, sigma, hi).unwrap();
            proptest::prop_assert!(p_lo >= p_hi);
            proptest::prop_assert!((0.0..=1.0).contains(&p_lo));
            let direct = dist.tail_prob(mu, sigma, a).unwrap();
            let unit = dist.tail_prob(0.0, 1.0, (a - mu) / sigma).unwrap();
            proptest::prop_assert!((direct - unit).abs() < 1e-12);
        }
    }
}
