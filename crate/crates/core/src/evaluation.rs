//! Quantile-activity split benchmark: train on the low-activity compounds,
//! hide the high-activity ones in a near or far slice of the unlabelled pool
//! and measure how quickly each score recovers them.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelledSet, UnlabelledPool};
use crate::error::{Error, Result};
use crate::fingerprint::{Fingerprint, SetwiseIndex};
use crate::pipeline::{self, FittedPipeline, PipelineParams};
use crate::regressors::RegressorSpec;
use crate::sampler;
use crate::scoring::{Candidate, RankedList, ScoreVariant, Scores};
use crate::seed;

pub const DEFAULT_POOL_SIZE: usize = 500_000;
pub const DEFAULT_DELTA_REF: f64 = 0.19;
/// Selection size singled out in reports.
pub const HEADLINE_N: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Near,
    Far,
}

impl PoolMode {
    pub fn name(self) -> &'static str {
        match self {
            PoolMode::Near => "near",
            PoolMode::Far => "far",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub q_train: f64,
    pub q_test: f64,
    pub pool_mode: PoolMode,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    #[serde(default = "default_delta_ref")]
    pub delta_ref: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_pool_size() -> usize {
    DEFAULT_POOL_SIZE
}

fn default_delta_ref() -> f64 {
    DEFAULT_DELTA_REF
}

impl SplitSpec {
    pub fn new(q_train: f64, q_test: f64, pool_mode: PoolMode) -> Self {
        Self {
            q_train,
            q_test,
            pool_mode,
            pool_size: DEFAULT_POOL_SIZE,
            delta_ref: DEFAULT_DELTA_REF,
            seed: 0,
        }
    }

    pub fn label(&self) -> String {
        format!("q{}-{}_{}", self.q_train, self.q_test, self.pool_mode.name())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q_train.is_finite() && self.q_test.is_finite()) || self.q_train > self.q_test {
            return Err(Error::config(format!(
                "split needs finite q_train <= q_test, got {} and {}",
                self.q_train, self.q_test
            )));
        }
        Ok(())
    }
}

/// Default benchmark thresholds.
pub const BENCHMARK_Q_TRAIN: [f64; 2] = [7.0, 7.5];
pub const BENCHMARK_Q_TEST: [f64; 2] = [7.5, 8.0];

/// Every `(q_train, q_test, mode)` combination with `q_train <= q_test`, in
/// that nesting order.
pub fn split_grid(q_train: &[f64], q_test: &[f64], modes: &[PoolMode], pool_size: usize, delta_ref: f64) -> Vec<SplitSpec> {
    let mut out = Vec::new();
    for &qt in q_train {
        for &qs in q_test.iter().filter(|&&qs| qt <= qs) {
            for &mode in modes {
                out.push(SplitSpec {
                    pool_size,
                    delta_ref,
                    ..SplitSpec::new(qt, qs, mode)
                });
            }
        }
    }
    out
}

/// `(train, test_actives)`: activities below `q_train`, and at or above
/// `q_test`. The band in between is dropped.
pub fn quantile_split(set: &LabelledSet, q_train: f64, q_test: f64) -> Result<(LabelledSet, LabelledSet)> {
    if !(q_train <= q_test) {
        return Err(Error::domain(format!("q_train {q_train} exceeds q_test {q_test}")));
    }
    let ys = set.activities();
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for q in [q_train, q_test] {
        if !(q >= lo && q <= hi) {
            return Err(Error::domain(format!("threshold {q} outside the activity range [{lo}, {hi}]")));
        }
    }
    let train = set.filter(|y| y < q_train);
    let test = set.filter(|y| y >= q_test);
    if train.is_empty() {
        return Err(Error::domain(format!("no training compounds below {q_train}")));
    }
    if test.is_empty() {
        return Err(Error::domain(format!("no test compounds at or above {q_test}")));
    }
    Ok((train, test))
}

/// Normalized segment weights: near is proportional to the counts, far to
/// `1 / max(count, 1)`.
pub fn pool_weights(counts: &[usize], mode: PoolMode) -> Vec<f64> {
    let raw: Vec<f64> = match mode {
        PoolMode::Near => counts.iter().map(|&c| c as f64).collect(),
        PoolMode::Far => counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect(),
    };
    sampler::segment_probabilities(&raw)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestPool {
    /// Drawn pool compounds in draw order, then the test actives.
    pub candidates: Vec<Candidate>,
    pub drawn: usize,
    pub segment_counts: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Draw `size` pool compounds without replacement by segment weight and add
/// `test_actives` after them.
pub fn build_test_pool(
    pool: &UnlabelledPool,
    train: &SetwiseIndex,
    mode: PoolMode,
    delta_ref: f64,
    size: usize,
    test_actives: &[Candidate],
    seed: u64,
) -> Result<TestPool> {
    if size > pool.len() {
        return Err(Error::domain(format!("requested {size} compounds from a pool of {}", pool.len())));
    }
    if !(delta_ref > 0.0 && delta_ref < 1.0) {
        return Err(Error::domain(format!("delta_ref must lie in (0, 1), got {delta_ref}")));
    }
    let mut candidates = Vec::with_capacity(size + test_actives.len());
    let (segment_counts, weights) = if size == 0 {
        (vec![0; pool.segment_count], vec![0.0; pool.segment_count])
    } else {
        let distances = train.distances(&pool.fingerprints())?;
        let segments = pool.segments();
        let counts = sampler::segment_counts(
            &distances,
            &segments,
            pool.segment_count,
            delta_ref,
            sampler::DEFAULT_BIN_WIDTH,
        );
        if mode == PoolMode::Near && counts.iter().all(|&c| c == 0) {
            return Err(Error::domain(format!("no pool compounds at distance {delta_ref}")));
        }
        let weights = pool_weights(&counts, mode);
        let mut rng = seed::rng(seed);
        for i in sampler::draw_by_segment(&segments, &weights, size, &mut rng)? {
            let c = &pool.compounds[i];
            candidates.push(Candidate {
                id: c.id.clone(),
                fp: c.fp.clone(),
            });
        }
        (counts, weights)
    };
    let ids: HashSet<&str> = candidates.iter().map(|c| c.id.as_str()).collect();
    if let Some(dup) = test_actives.iter().find(|c| ids.contains(c.id.as_str())) {
        return Err(Error::domain(format!("test compound id {} also occurs in the pool", dup.id)));
    }
    candidates.extend_from_slice(test_actives);
    Ok(TestPool {
        drawn: size,
        candidates,
        segment_counts,
        weights,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub n_selected: usize,
    pub pct_found: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub points: Vec<RecallPoint>,
    pub n_truth: usize,
    pub n_ranked: usize,
}

impl RecallCurve {
    pub fn at(&self, n_selected: usize) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.n_selected == n_selected)
            .map(|p| p.pct_found)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n_selected", "pct_found"])?;
        for p in &self.points {
            w.write_record([p.n_selected.to_string(), format!("{}", p.pct_found)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// 1, 2, 5, 10, 20, 50, ... up to `n`, plus `HEADLINE_N` and `n` itself.
pub fn recall_grid(n: usize) -> Vec<usize> {
    let mut grid = Vec::new();
    let mut decade = 1usize;
    'outer: loop {
        for m in [1, 2, 5] {
            let v = m * decade;
            if v > n {
                break 'outer;
            }
            grid.push(v);
        }
        decade *= 10;
    }
    if HEADLINE_N <= n {
        grid.push(HEADLINE_N);
    }
    grid.push(n);
    grid.sort_unstable();
    grid.dedup();
    grid
}

pub fn recall_curve(ranking: &RankedList, truth: &HashSet<String>) -> Result<RecallCurve> {
    let n = ranking.len();
    let hits: Vec<bool> = ranking.ids().map(|id| truth.contains(id)).collect();
    let found = hits.iter().filter(|&&h| h).count();
    if truth.is_empty() || found == 0 {
        return Err(Error::domain("no truth id occurs in the ranking"));
    }
    if found < truth.len() {
        return Err(Error::domain(format!(
            "{} truth ids are missing from the ranking",
            truth.len() - found
        )));
    }
    let mut cumulative = Vec::with_capacity(n + 1);
    cumulative.push(0usize);
    for h in &hits {
        cumulative.push(cumulative.last().unwrap() + *h as usize);
    }
    let points = recall_grid(n)
        .into_iter()
        .map(|k| RecallPoint {
            n_selected: k,
            pct_found: 100.0 * cumulative[k] as f64 / truth.len() as f64,
        })
        .collect();
    Ok(RecallCurve {
        points,
        n_truth: truth.len(),
        n_ranked: n,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CellReport {
    pub split: SplitSpec,
    pub label: String,
    pub model: RegressorSpec,
    pub variant: ScoreVariant,
    pub seed: u64,
    pub n_train: usize,
    pub n_test_actives: usize,
    pub n_candidates: usize,
    pub curve: RecallCurve,
    #[serde(skip)]
    pub ranking: RankedList,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkReport {
    pub version: &'static str,
    pub seed: u64,
    pub params: PipelineParams,
    pub cells: Vec<CellReport>,
}

impl BenchmarkReport {
    pub fn cell(&self, label: &str, model: crate::regressors::RegressorKind, variant: ScoreVariant) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.label == label && c.model.kind == model && c.variant == variant)
    }
}

/// Everything fitted for one `(split, model)` pair.
pub struct FittedCell {
    pub split: SplitSpec,
    pub model: RegressorSpec,
    pub seed: u64,
    pub pipeline: FittedPipeline,
    pub test_pool: TestPool,
    pub test_ids: HashSet<String>,
    pub scores: Vec<Scores>,
}

/// Fails if any test compound could reach a fitting stage.
fn assert_isolated(train: &LabelledSet, test: &LabelledSet, pool: &UnlabelledPool, split: &SplitSpec) -> Result<()> {
    let train_ids: HashSet<&str> = train.compounds.iter().map(|c| c.id.as_str()).collect();
    let pool_fps: HashSet<&Fingerprint> = pool.compounds.iter().map(|c| &c.fp).collect();
    for c in &test.compounds {
        if c.activity < split.q_test || train_ids.contains(c.id.as_str()) {
            return Err(Error::domain(format!("leakage: test compound {} overlaps the training set", c.id)));
        }
        if pool_fps.contains(&c.fp) {
            return Err(Error::domain(format!("leakage: test compound {} also sits in the pool", c.id)));
        }
    }
    if train.compounds.iter().any(|c| c.activity >= split.q_train) {
        return Err(Error::domain("leakage: training compound above q_train"));
    }
    Ok(())
}

/// Fit every stage on the training part of `split` and score the test pool.
/// Only ids and fingerprints of the test actives leave this function's
/// split step; their activities never reach a fitting stage.
pub fn fit_cell(
    labelled: &LabelledSet,
    pool: &UnlabelledPool,
    split: &SplitSpec,
    model: &RegressorSpec,
    params: &PipelineParams,
    seed: u64,
) -> Result<FittedCell> {
    split.validate()?;
    let (train, test) = quantile_split(labelled, split.q_train, split.q_test)?;
    assert_isolated(&train, &test, pool, split)?;
    let test_candidates = Candidate::from_labelled(&test);
    let test_ids: HashSet<String> = test_candidates.iter().map(|c| c.id.clone()).collect();
    drop(test);

    let cell_params = PipelineParams {
        regressor: *model,
        threshold: split.q_test,
        ..params.clone()
    };
    let pipeline = pipeline::fit_pipeline(&train, pool, &cell_params, seed)?;
    let index = SetwiseIndex::new(train.fingerprints())?;
    let test_pool = build_test_pool(
        pool,
        &index,
        split.pool_mode,
        split.delta_ref,
        split.pool_size,
        &test_candidates,
        seed::substream(seed, "test-pool"),
    )?;
    let scorer = pipeline.scorer()?;
    let scores = test_pool
        .candidates
        .par_iter()
        .map(|c| scorer.score_all(&c.fp))
        .collect::<Result<Vec<_>>>()?;
    Ok(FittedCell {
        split: split.clone(),
        model: *model,
        seed,
        pipeline,
        test_pool,
        test_ids,
        scores,
    })
}

fn cell_seed(root: u64, split: usize, model: usize) -> u64 {
    seed::indexed(seed::indexed(seed::substream(root, "benchmark"), split as u64), model as u64)
}

/// Every `(split, model, variant)` cell. When `out` is given, fitted
/// artifacts, rankings, recall tables, plots and a manifest are written
/// there.
pub fn run_benchmark(
    labelled: &LabelledSet,
    pool: &UnlabelledPool,
    splits: &[SplitSpec],
    models: &[RegressorSpec],
    variants: &[ScoreVariant],
    params: &PipelineParams,
    seed: u64,
    out: Option<&Path>,
) -> Result<BenchmarkReport> {
    if splits.is_empty() || models.is_empty() || variants.is_empty() {
        return Err(Error::config("benchmark needs at least one split, model and variant"));
    }
    let jobs: Vec<(usize, usize)> = (0..splits.len())
        .flat_map(|s| (0..models.len()).map(move |m| (s, m)))
        .collect();
    let per_job = jobs
        .par_iter()
        .map(|&(s, m)| -> Result<Vec<CellReport>> {
            let split = &splits[s];
            let model = &models[m];
            let derived = seed::indexed(cell_seed(seed, s, m), split.seed);
            let fitted = fit_cell(labelled, pool, split, model, params, derived)
                .map_err(|e| annotate(e, &format!("{} / {}", split.label(), model.kind.name())))?;
            let scorer = fitted.pipeline.scorer()?;
            let mut cells = Vec::with_capacity(variants.len());
            for &variant in variants {
                scorer.check(variant)?;
                let ranking = RankedList::from_scores(&fitted.test_pool.candidates, fitted.scores.clone(), variant);
                let curve = recall_curve(&ranking, &fitted.test_ids)?;
                cells.push(CellReport {
                    split: split.clone(),
                    label: split.label(),
                    model: *model,
                    variant,
                    seed: derived,
                    n_train: fitted.pipeline.standardized.len(),
                    n_test_actives: fitted.test_ids.len(),
                    n_candidates: fitted.test_pool.candidates.len(),
                    curve,
                    ranking,
                });
            }
            if let Some(dir) = out {
                write_cell(&cell_dir(dir, split, model), &fitted, &cells)?;
            }
            Ok(cells)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = BenchmarkReport {
        version: env!("CARGO_PKG_VERSION"),
        seed,
        params: params.clone(),
        cells: per_job.into_iter().flatten().collect(),
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}

fn annotate(e: Error, cell: &str) -> Error {
    match e {
        Error::Domain(m) => Error::Domain(format!("{cell}: {m}")),
        Error::Degenerate(m) => Error::Degenerate(format!("{cell}: {m}")),
        Error::Config(m) => Error::Config(format!("{cell}: {m}")),
        Error::Optimizer(m) => Error::Optimizer(format!("{cell}: {m}")),
        other => other,
    }
}

pub fn cell_dir(root: &Path, split: &SplitSpec, model: &RegressorSpec) -> PathBuf {
    root.join(split.label()).join(model.kind.name())
}

fn write_cell(dir: &Path, fitted: &FittedCell, cells: &[CellReport]) -> Result<()> {
    fitted.pipeline.write(&dir.join("pipeline"))?;
    for cell in cells {
        let name = cell.variant.name();
        cell.ranking
            .write_csv(std::fs::File::create(dir.join(format!("ranking_{name}.csv")))?)?;
        cell.curve
            .write_csv(std::fs::File::create(dir.join(format!("recall_{name}.csv")))?)?;
    }
    let series: Vec<(&str, &RecallCurve)> = cells.iter().map(|c| (c.variant.name(), &c.curve)).collect();
    let title = format!("{} {}", fitted.split.label(), fitted.model.kind.name());
    std::fs::write(dir.join("recall.svg"), recall_svg(&title, &series))?;
    Ok(())
}

const COLOURS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

/// Line chart of recall against a logarithmic selection size axis.
pub fn recall_svg(title: &str, series: &[(&str, &RecallCurve)]) -> String {
    let (width, height) = (640.0, 420.0);
    let (left, right, top, bottom) = (60.0, 110.0, 30.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let n_max = series
        .iter()
        .flat_map(|(_, c)| c.points.iter().map(|p| p.n_selected))
        .max()
        .unwrap_or(1)
        .max(10);
    let log_max = (n_max as f64).log10();
    let x = |n: usize| left + plot_w * (n.max(1) as f64).log10() / log_max;
    let y = |pct: f64| top + plot_h * (1.0 - pct / 100.0);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, left + plot_w / 2.0, escape(title));
    let mut decade = 1usize;
    while decade <= n_max {
        let xv = x(decade);
        let _ = writeln!(
            svg,
            r##"<line x1="{xv:.1}" y1="{top}" x2="{xv:.1}" y2="{:.1}" stroke="#ddd"/><text x="{xv:.1}" y="{:.1}" text-anchor="middle">{decade}</text>"##,
            top + plot_h,
            top + plot_h + 16.0
        );
        decade *= 10;
    }
    for pct in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let yv = y(pct);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{yv:.1}" x2="{:.1}" y2="{yv:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{pct}</text>"##,
            left + plot_w,
            left - 6.0,
            yv + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">compounds selected</text>"#,
        left + plot_w / 2.0,
        height - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">% actives found</text>"#,
        top + plot_h / 2.0
    );
    for (i, (name, curve)) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.1},{:.1}", x(p.n_selected), y(p.pct_found)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 16.0 * (i as f64 + 1.0);
        let lx = left + plot_w + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{colour}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
