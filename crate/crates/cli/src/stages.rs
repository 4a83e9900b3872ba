//! One function per subcommand. Each reads its predecessors' artifacts from
//! the workdir and writes its own through [`StageRun::execute`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use domainrank::covariance::SigmaCurve;
use domainrank::dataset::{self, ActivityTransform, LabelledReport, LabelledSet, UnlabelledPool, UnlabelledReport};
use domainrank::degradation::DegradationCurves;
use domainrank::evaluation;
use domainrank::mixture::MixtureDistribution;
use domainrank::pipeline;
use domainrank::prior::PriorCurve;
use domainrank::regressors::FittedModel;
use domainrank::sampler;
use domainrank::scoring::{Candidate, Scorer, ScoreVariant};
use domainrank::seed;
use domainrank::synthetic;

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::stage::{hash_file, sha256_hex, Outcome, Stage, StageRun, Workdir};

pub struct Context {
    pub config: PipelineConfig,
    pub config_hash: String,
    pub workdir: Workdir,
}

impl Context {
    pub fn new(config: PipelineConfig, workdir: Workdir) -> Result<Self> {
        let config_hash = sha256_hex(&serde_json::to_vec(&config)?);
        Ok(Self {
            config,
            config_hash,
            workdir,
        })
    }

    fn stage(&self, stage: Stage, deps: &[Stage], inputs: serde_json::Value) -> Result<StageRun<'_>> {
        let upstream = self.workdir.require(stage, deps)?;
        Ok(StageRun {
            workdir: &self.workdir,
            stage,
            config_hash: self.config_hash.clone(),
            seed: self.config.seed,
            upstream,
            inputs,
        })
    }

    fn dir(&self, stage: Stage) -> PathBuf {
        self.workdir.stage_dir(stage)
    }
}

pub fn run(ctx: &Context, stage: Stage) -> Result<Outcome> {
    match stage {
        Stage::Synth => synth(ctx),
        Stage::Ingest => ingest(ctx),
        Stage::Sample => sample(ctx),
        Stage::Prior => prior(ctx),
        Stage::Degrade => degrade(ctx),
        Stage::Covariance => covariance(ctx),
        Stage::Mixture => mixture(ctx),
        Stage::Score => score(ctx),
        Stage::Evaluate => evaluate(ctx),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| CliError::io(path, e))
}

fn synth(ctx: &Context) -> Result<Outcome> {
    let synth = &ctx.config.synth;
    let run = ctx.stage(Stage::Synth, &[], json!({ "synth": synth }))?;
    run.execute(|out| {
        let spec = synthetic::LandscapeSpec {
            seed: seed::substream(ctx.config.seed, "synth"),
            ..synth.landscape.clone()
        };
        let data = synthetic::generate(&spec, synth.n_screened, synth.n_unlabelled)?;
        log::info!(
            "synth: {} labelled of {} screened, {} unlabelled",
            data.labelled.len(),
            synth.n_screened,
            data.unlabelled.len()
        );
        data.write(out)?;
        Ok(())
    })
}

/// The summary `synth` writes next to its data.
#[derive(Deserialize)]
struct SynthSummary {
    cutoff: f64,
    n_screened: u64,
}

#[derive(Serialize, Deserialize)]
struct IngestSummary {
    l_min: f64,
    screened_count: Option<u64>,
    nbits: usize,
    transform: ActivityTransform,
    labelled: LabelledReport,
    unlabelled: UnlabelledReport,
}

/// Resolved ingest inputs: explicit paths or the `synth` outputs.
struct Sources {
    labelled: PathBuf,
    unlabelled: Vec<PathBuf>,
    l_min: f64,
    screened_count: Option<u64>,
    deps: Vec<Stage>,
}

fn segment_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

fn sources(ctx: &Context) -> Result<Sources> {
    let c = &ctx.config;
    match &c.paths.labelled {
        Some(labelled) => Ok(Sources {
            labelled: labelled.clone(),
            unlabelled: c.paths.unlabelled.clone(),
            l_min: c.l_min.expect("validated with paths.labelled"),
            screened_count: c.screened_count,
            deps: vec![],
        }),
        None => {
            ctx.workdir.require(Stage::Ingest, &[Stage::Synth])?;
            let dir = ctx.dir(Stage::Synth);
            let summary: SynthSummary = read_json(&dir.join("synthetic.json"))?;
            Ok(Sources {
                labelled: dir.join("labelled.csv"),
                unlabelled: segment_files(&dir.join("unlabelled"))?,
                l_min: c.l_min.unwrap_or(summary.cutoff),
                screened_count: c.screened_count.or(Some(summary.n_screened)),
                deps: vec![Stage::Synth],
            })
        }
    }
}

fn ingest(ctx: &Context) -> Result<Outcome> {
    let src = sources(ctx)?;
    let mut digests = vec![hash_file(&src.labelled)?];
    for p in &src.unlabelled {
        digests.push(hash_file(p)?);
    }
    let inputs = json!({
        "files": digests,
        "fingerprint_bits": ctx.config.fingerprint_bits,
        "l_min": src.l_min,
        "screened_count": src.screened_count,
    });
    let run = ctx.stage(Stage::Ingest, &src.deps, inputs)?;
    run.execute(|out| {
        let (labelled, labelled_report) =
            dataset::load_labelled(&src.labelled, src.l_min, src.screened_count, ctx.config.fingerprint_bits)?;
        if !labelled_report.rejected.is_empty() {
            log::warn!(
                "ingest: rejected {} labelled rows below l_min {}",
                labelled_report.rejected.len(),
                src.l_min
            );
        }
        let (pool, unlabelled_report) = dataset::load_unlabelled(&src.unlabelled, &labelled)?;
        let (_, transform) = dataset::standardize_activities(&labelled)?;
        dataset::write_labelled(create(&out.join("labelled.csv"))?, &labelled)?;
        dataset::write_unlabelled_segments(&out.join("unlabelled"), &pool)?;
        let nbits = labelled.nbits().expect("labelled set is non-empty");
        write_json(
            &out.join("ingest.json"),
            &IngestSummary {
                l_min: src.l_min,
                screened_count: src.screened_count,
                nbits,
                transform,
                labelled: labelled_report,
                unlabelled: unlabelled_report,
            },
        )
    })
}

/// Labelled set (original scale), its standardized copy and the pool.
struct Ingested {
    labelled: LabelledSet,
    standardized: LabelledSet,
    transform: ActivityTransform,
    pool: UnlabelledPool,
}

fn load_ingested(ctx: &Context) -> Result<Ingested> {
    let dir = ctx.dir(Stage::Ingest);
    let summary: IngestSummary = read_json(&dir.join("ingest.json"))?;
    let (labelled, _) = dataset::load_labelled(
        dir.join("labelled.csv"),
        summary.l_min,
        summary.screened_count,
        Some(summary.nbits),
    )?;
    let (pool, _) = dataset::load_unlabelled(&segment_files(&dir.join("unlabelled"))?, &labelled)?;
    let (standardized, transform) = dataset::standardize_activities(&labelled)?;
    Ok(Ingested {
        labelled,
        standardized,
        transform,
        pool,
    })
}

fn sample(ctx: &Context) -> Result<Outcome> {
    let run = ctx.stage(Stage::Sample, &[Stage::Ingest], json!({ "sampling": ctx.config.sampling }))?;
    run.execute(|out| {
        let data = load_ingested(ctx)?;
        let (active, background) =
            pipeline::sample_distances(&data.standardized, &data.pool, &ctx.config.sampling, ctx.config.seed)?;
        sampler::write_sample(out, "active_sample", &active)?;
        sampler::write_sample(out, "background_sample", &background)?;
        Ok(())
    })
}

fn prior(ctx: &Context) -> Result<Outcome> {
    let run = ctx.stage(
        Stage::Prior,
        &[Stage::Ingest, Stage::Sample],
        json!({ "prior": ctx.config.prior }),
    )?;
    run.execute(|out| {
        let data = load_ingested(ctx)?;
        let samples = ctx.dir(Stage::Sample);
        let active = sampler::read_sample(&samples, "active_sample")?;
        let background = sampler::read_sample(&samples, "background_sample")?;
        let (calibration, curve) = pipeline::fit_prior_stage(&data.standardized, &active, &background, &ctx.config.prior)?;
        for flag in &curve.flags {
            log::warn!("prior: {flag}");
        }
        curve.write(out)?;
        write_json(&out.join("calibration.json"), &calibration)
    })
}

fn degrade(ctx: &Context) -> Result<Outcome> {
    let c = &ctx.config;
    let run = ctx.stage(
        Stage::Degrade,
        &[Stage::Ingest],
        json!({ "regressor": c.regressor, "degradation": c.degradation }),
    )?;
    run.execute(|out| {
        let data = load_ingested(ctx)?;
        let model = pipeline::fit_model(&data.standardized, &c.regressor, c.seed)?;
        fs::write(out.join("model.json"), model.to_json()?).map_err(|e| CliError::io(out, e))?;
        let curves = pipeline::fit_degradation_stage(&data.standardized, &c.regressor, &c.degradation, c.seed)?;
        curves.write(out)?;
        Ok(())
    })
}

fn covariance(ctx: &Context) -> Result<Outcome> {
    let c = &ctx.config;
    let run = ctx.stage(Stage::Covariance, &[Stage::Ingest], json!({ "covariance": c.covariance }))?;
    run.execute(|out| {
        let data = load_ingested(ctx)?;
        pipeline::fit_covariance_stage(&data.standardized, &c.covariance, c.seed)?.write(out)?;
        Ok(())
    })
}

fn mixture(ctx: &Context) -> Result<Outcome> {
    let run = ctx.stage(Stage::Mixture, &[Stage::Ingest], json!({}))?;
    run.execute(|out| {
        let data = load_ingested(ctx)?;
        pipeline::fit_mixture_stage(&data.standardized, ctx.config.seed)?.write(out)?;
        Ok(())
    })
}

fn score(ctx: &Context) -> Result<Outcome> {
    let c = &ctx.config;
    let run = ctx.stage(
        Stage::Score,
        &[Stage::Ingest, Stage::Prior, Stage::Degrade, Stage::Covariance, Stage::Mixture],
        json!({ "threshold": c.threshold, "mean_source": c.mean_source }),
    )?;
    run.execute(|out| {
        let data = load_ingested(ctx)?;
        let degrade_dir = ctx.dir(Stage::Degrade);
        let model_path = degrade_dir.join("model.json");
        let model =
            FittedModel::from_json(&fs::read_to_string(&model_path).map_err(|e| CliError::io(&model_path, e))?)?;
        let index = domainrank::fingerprint::SetwiseIndex::new(data.standardized.fingerprints())?;
        let mut scorer = Scorer::new(model, index, data.transform.apply(c.threshold))?;
        scorer.prior = Some(PriorCurve::read(&ctx.dir(Stage::Prior))?);
        scorer.degradation = Some(DegradationCurves::read(&degrade_dir)?);
        scorer.covariance = Some(SigmaCurve::read(&ctx.dir(Stage::Covariance))?);
        scorer.mixture = Some(MixtureDistribution::read(&ctx.dir(Stage::Mixture))?);
        scorer.mean_source = c.mean_source;
        let candidates = Candidate::from_pool(&data.pool);
        for variant in ScoreVariant::ALL {
            let ranked = scorer.rank(&candidates, variant)?;
            ranked.write_csv(create(&out.join(format!("ranking_{}.csv", variant.name())))?)?;
        }
        log::info!("score: ranked {} candidates", candidates.len());
        Ok(())
    })
}

fn evaluate(ctx: &Context) -> Result<Outcome> {
    let c = &ctx.config;
    let splits = c.splits();
    if splits.is_empty() {
        return Err(CliError::config(
            "/evaluation",
            "evaluate needs `splits` or `grid` with at least one split",
        ));
    }
    let inputs = json!({
        "params": c.pipeline_params(),
        "evaluation": c.evaluation,
    });
    let run = ctx.stage(Stage::Evaluate, &[Stage::Ingest], inputs)?;
    run.execute(|out| {
        let data = load_ingested(ctx)?;
        let report = evaluation::run_benchmark(
            &data.labelled,
            &data.pool,
            &splits,
            &c.models(),
            &c.variants(),
            &c.pipeline_params(),
            c.seed,
            Some(out),
        )?;
        for cell in &report.cells {
            log::info!(
                "evaluate: {} {} {}: recall@{} = {:.1}%",
                cell.label,
                cell.model.kind.name(),
                cell.variant.name(),
                evaluation::HEADLINE_N,
                cell.curve.at(evaluation::HEADLINE_N).unwrap_or(f64::NAN)
            );
        }
        Ok(())
    })
}
