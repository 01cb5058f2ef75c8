//! Blocking implementations of each operation.

use pairdet_core::api::{
    EvaluateRequest, EvaluateResult, ExperimentRequest, ExperimentResult, GenerateRequest, GenerateResult, Split,
    TrainRequest, TrainResult,
};
use pairdet_core::detector::load_checkpoint;
use pairdet_core::eval::write_report;
use pairdet_core::harness::{
    build_samples, evaluate_samples, experiment_compare_variants, experiment_fallback, experiment_offset_sweep,
    experiment_transfer, sample_spec, train, write_experiment, write_run, ExperimentKind, HarnessError, TrainConfig,
    CHECKPOINT_FILE,
};
use pairdet_core::synthdata::{generate_corpus, load_corpus, save_corpus, ScenarioTag};

pub fn generate(req: &GenerateRequest) -> Result<GenerateResult, HarnessError> {
    let corpus = generate_corpus(&req.spec)?;
    save_corpus(&corpus, &req.output)?;
    let annotated_boxes = corpus
        .train
        .iter()
        .chain(&corpus.test)
        .flat_map(|s| &s.annotations)
        .map(Vec::len)
        .sum();
    Ok(GenerateResult {
        output: req.output.clone(),
        train_scenes: corpus.train.len(),
        test_scenes: corpus.test.len(),
        annotated_boxes,
        channel_means: corpus.channel_means(),
    })
}

pub fn train_run(req: &TrainRequest) -> Result<TrainResult, HarnessError> {
    let (model, mut log) = train(&req.config)?;
    let names = match &req.config.dataset {
        Some(p) => load_corpus(p)?.class_names(),
        None => Vec::new(),
    };
    write_run(&model, &mut log, &names, &req.output)?;
    Ok(TrainResult {
        output: req.output.clone(),
        checkpoint: req.output.join(CHECKPOINT_FILE),
        steps: log.losses.len(),
        final_loss: log.losses.last().map(|l| l.total),
        map: log.final_map(),
    })
}

pub fn evaluate(req: &EvaluateRequest) -> Result<EvaluateResult, HarnessError> {
    let model = load_checkpoint(&req.checkpoint)?;
    let corpus = load_corpus(&req.dataset)?;
    if corpus.num_classes() != model.spec.num_classes {
        return Err(HarnessError::Config(format!(
            "checkpoint has {} classes, dataset {}",
            model.spec.num_classes,
            corpus.num_classes()
        )));
    }
    let cfg = TrainConfig {
        variant: model.spec.variant,
        ..req.config.clone()
    };
    cfg.validate()?;
    let scenes = match req.split {
        Split::Train => &corpus.train,
        Split::Test => &corpus.test,
    };
    let samples = build_samples(scenes, &sample_spec(&cfg, &model.spec))?;
    let report = evaluate_samples(&model, &samples, &cfg, &ScenarioTag::STRATA)?;
    write_report(&report, &corpus.class_names(), &req.output)?;
    Ok(EvaluateResult {
        output: req.output.clone(),
        report,
    })
}

pub fn experiment(req: &ExperimentRequest) -> Result<ExperimentResult, HarnessError> {
    let cfg = &req.config;
    let dataset = cfg
        .train
        .dataset
        .as_ref()
        .ok_or_else(|| HarnessError::Config("experiment needs train.dataset".into()))?;
    let corpus = load_corpus(dataset)?;
    let report = match req.kind {
        ExperimentKind::Variants => experiment_compare_variants(cfg, &corpus)?,
        ExperimentKind::Offsets => experiment_offset_sweep(cfg, &corpus)?,
        ExperimentKind::Transfer => {
            let src_path = cfg
                .source
                .as_ref()
                .ok_or_else(|| HarnessError::Config("transfer needs a source dataset".into()))?;
            experiment_transfer(cfg, &load_corpus(src_path)?, &corpus)?
        }
        ExperimentKind::Fallback => {
            let model = cfg.checkpoint.as_ref().map(|p| load_checkpoint(p)).transpose()?;
            experiment_fallback(cfg, model.as_ref(), &corpus)?
        }
    };
    write_experiment(&report, &corpus.class_names(), &req.output)?;
    Ok(ExperimentResult {
        output: req.output.clone(),
        passed: report.passed(),
        rows: report.rows,
        checks: report.checks,
    })
}
