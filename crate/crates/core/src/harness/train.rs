use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use super::config::TrainConfig;
use super::HarnessError;
use crate::detector::{build_model, save_checkpoint, ModelSpec, ModelState};
use crate::eval::{evaluate, write_report, EvalConfig, EvalReport};
use crate::geometry::{assign_anchors, Assignment, Detection};
use crate::inputs::{build_input, duplicate_fallback, select_preceding, FlowInputOptions, ModelInput, Variant};
use crate::losses::FocalParams;
use crate::synthdata::{load_corpus, AnnotatedSequence, Corpus, GroundTruth, ScenarioTag};

/// One training or evaluation example: a network input plus its targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: usize,
    pub frame: usize,
    pub input: ModelInput,
    pub gts: Vec<GroundTruth>,
    pub assignment: Assignment,
}

/// How the preceding frame is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    Offset(u32),
    /// The target twice.
    Duplicate,
}

pub struct SampleSpec<'a> {
    pub variant: Variant,
    pub pairing: Pairing,
    pub flow: &'a FlowInputOptions,
    pub model: &'a ModelSpec,
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    pub first_target_frame: usize,
}

/// Builds every (scene, target frame) sample. Only frames at or before the
/// target are read.
pub fn build_samples(seqs: &[AnnotatedSequence], spec: &SampleSpec) -> Result<Vec<Sample>, HarnessError> {
    let mut anchor_cache = BTreeMap::new();
    let mut out = Vec::new();
    for (si, seq) in seqs.iter().enumerate() {
        for t in spec.first_target_frame.min(seq.frames.len())..seq.frames.len() {
            let pair = match spec.pairing {
                Pairing::Offset(i) => select_preceding(&seq.frames[..=t], t, i)?,
                Pairing::Duplicate => duplicate_fallback(&seq.frames[t]),
            };
            let input = build_input(spec.variant, &pair, spec.flow)?;
            let (w, h, _) = input.shape();
            let anchors = match anchor_cache.get(&(w, h)) {
                Some(a) => a,
                None => anchor_cache.entry((w, h)).or_insert(spec.model.anchors(w, h)?),
            };
            let gts = seq.annotations[t].clone();
            let labeled: Vec<_> = gts.iter().map(GroundTruth::labeled).collect();
            let assignment = assign_anchors(anchors, &labeled, spec.pos_threshold, spec.neg_threshold)?;
            out.push(Sample {
                scene: si,
                frame: t,
                input,
                gts,
                assignment,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    pub classification: f64,
    pub regression: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub step: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub prepare_seconds: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: TrainConfig,
    pub model_spec: ModelSpec,
    pub focal: FocalParams,
    pub train_samples: usize,
    pub test_samples: usize,
    pub losses: Vec<StepLoss>,
    pub evals: Vec<EvalEntry>,
    /// File name of the final checkpoint, relative to the run directory.
    pub checkpoint: Option<String>,
    pub timings: Timings,
}

impl RunLog {
    /// Test mAP of the last evaluation.
    pub fn final_map(&self) -> Option<f64> {
        self.evals.last().map(|e| e.report.map)
    }

    /// The log with wall-clock timings zeroed, for run-to-run comparison.
    pub fn without_timings(&self) -> RunLog {
        RunLog {
            timings: Timings::default(),
            ..self.clone()
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Updates in place; parameters are rounded to f32 afterwards.
    pub fn step(&mut self, model: &mut ModelState, grads: &BTreeMap<String, Vec<f64>>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in model.params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p.data[i] = (p.data[i] - update) as f32 as f64;
            }
        }
        model.step += 1;
    }
}

pub fn predict_all(model: &ModelState, samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<Vec<Detection>>, HarnessError> {
    samples
        .iter()
        .map(|s| model.predict(&s.input, &cfg.predict).map_err(HarnessError::from))
        .collect()
}

pub fn evaluate_samples(
    model: &ModelState,
    samples: &[Sample],
    cfg: &TrainConfig,
    strata: &[ScenarioTag],
) -> Result<EvalReport, HarnessError> {
    let dets = predict_all(model, samples, cfg)?;
    let gts: Vec<Vec<GroundTruth>> = samples.iter().map(|s| s.gts.clone()).collect();
    let eval = EvalConfig::new(cfg.eval_iou)?.with_strata(strata);
    Ok(evaluate(&dets, &gts, model.spec.num_classes, &eval)?)
}

pub fn model_spec_for(cfg: &TrainConfig, corpus: &Corpus) -> ModelSpec {
    cfg.model.spec(cfg.variant, corpus.num_classes(), corpus.channel_means())
}

pub fn sample_spec<'a>(cfg: &'a TrainConfig, model: &'a ModelSpec) -> SampleSpec<'a> {
    SampleSpec {
        variant: cfg.variant,
        pairing: Pairing::Offset(cfg.offset),
        flow: &cfg.flow,
        model,
        pos_threshold: cfg.pos_threshold,
        neg_threshold: cfg.neg_threshold,
        first_target_frame: cfg.first_target_frame,
    }
}

/// Trains a fresh model on `corpus.train` and evaluates it on `corpus.test`.
pub fn train_on(cfg: &TrainConfig, corpus: &Corpus) -> Result<(ModelState, RunLog), HarnessError> {
    cfg.validate()?;
    let spec = model_spec_for(cfg, corpus);
    let model = build_model(&spec, cfg.seed)?;
    train_from(cfg, corpus, model)
}

/// Continues training `model` (for example after a weight transfer).
pub fn train_from(cfg: &TrainConfig, corpus: &Corpus, mut model: ModelState) -> Result<(ModelState, RunLog), HarnessError> {
    cfg.validate()?;
    if model.spec.variant != cfg.variant || model.spec.num_classes != corpus.num_classes() {
        return Err(HarnessError::Config(format!(
            "model is {} with {} classes, run needs {} with {}",
            model.spec.variant,
            model.spec.num_classes,
            cfg.variant,
            corpus.num_classes()
        )));
    }
    let t0 = Instant::now();
    let sspec = sample_spec(cfg, &model.spec);
    let train = build_samples(&corpus.train, &sspec)?;
    let test = build_samples(&corpus.test, &sspec)?;
    if train.is_empty() && cfg.steps > 0 {
        return Err(HarnessError::Config("training split has no usable frames".into()));
    }
    let focal = if cfg.class_balanced_alpha {
        FocalParams::from_class_counts(cfg.gamma, &corpus.class_counts())?
    } else {
        FocalParams::uniform(cfg.gamma, corpus.num_classes())
    };
    let prepare_seconds = t0.elapsed().as_secs_f64();
    info!(variant = %cfg.variant, train = train.len(), test = test.len(), steps = cfg.steps, "training");

    let mut log = RunLog {
        config: cfg.clone(),
        model_spec: model.spec.clone(),
        focal: focal.clone(),
        train_samples: train.len(),
        test_samples: test.len(),
        losses: Vec::with_capacity(cfg.steps),
        evals: Vec::new(),
        checkpoint: None,
        timings: Timings {
            prepare_seconds,
            ..Timings::default()
        },
    };

    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut eval_time = 0.0;
    let t_train = Instant::now();
    for step in 0..cfg.steps {
        let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut loss = StepLoss {
            step,
            total: 0.0,
            classification: 0.0,
            regression: 0.0,
        };
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let s = &train[order[cursor]];
            cursor += 1;
            let (value, grads) = model.loss_and_gradients(&s.input, &s.assignment, &focal, cfg.lambda)?;
            loss.total += value.total;
            loss.classification += value.classification;
            loss.regression += value.regression;
            for (name, g) in grads {
                match acc.get_mut(&name) {
                    Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| *a += g),
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }
        let b = cfg.batch_size as f64;
        loss.total /= b;
        loss.classification /= b;
        loss.regression /= b;
        if !loss.total.is_finite() {
            return Err(HarnessError::Divergence { step, loss: loss.total });
        }
        if cfg.batch_size > 1 {
            acc.values_mut().flatten().for_each(|g| *g /= b);
        }
        adam.set_learning_rate(cfg.learning_rate_at(step));
        adam.step(&mut model, &acc);
        if !model.all_finite() {
            return Err(HarnessError::Divergence { step, loss: f64::NAN });
        }
        log.losses.push(loss);
        if step % 50 == 0 {
            debug!(step, loss = loss.total, "step");
        }
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps {
            let te = Instant::now();
            let report = evaluate_samples(&model, &test, cfg, &ScenarioTag::STRATA)?;
            log.evals.push(EvalEntry { step: step + 1, report });
            eval_time += te.elapsed().as_secs_f64();
        }
    }
    log.timings.train_seconds = t_train.elapsed().as_secs_f64() - eval_time;

    if !test.is_empty() {
        let te = Instant::now();
        let report = evaluate_samples(&model, &test, cfg, &ScenarioTag::STRATA)?;
        info!(map = report.map, "final evaluation");
        log.evals.push(EvalEntry { step: cfg.steps, report });
        eval_time += te.elapsed().as_secs_f64();
    }
    log.timings.eval_seconds = eval_time;
    Ok((model, log))
}

/// Loads the configured corpus and trains.
pub fn train(cfg: &TrainConfig) -> Result<(ModelState, RunLog), HarnessError> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| HarnessError::Config("no dataset given".into()))?;
    let corpus = load_corpus(path)?;
    train_on(cfg, &corpus)
}

pub const CHECKPOINT_FILE: &str = "model.pdet";
pub const RUNLOG_FILE: &str = "runlog.json";

/// Writes `model.pdet`, `runlog.json`, `losses.csv` and the final evaluation
/// report under `dir`.
pub fn write_run(model: &ModelState, log: &mut RunLog, names: &[String], dir: &Path) -> Result<(), HarnessError> {
    let io = |e| HarnessError::Io(dir.display().to_string(), e);
    std::fs::create_dir_all(dir).map_err(io)?;
    save_checkpoint(model, &dir.join(CHECKPOINT_FILE))?;
    log.checkpoint = Some(CHECKPOINT_FILE.to_string());
    let json = serde_json::to_string_pretty(log).expect("run log serializes");
    std::fs::write(dir.join(RUNLOG_FILE), json).map_err(io)?;
    let mut csv = String::from("step,total,classification,regression\n");
    for l in &log.losses {
        csv.push_str(&format!("{},{},{},{}\n", l.step, l.total, l.classification, l.regression));
    }
    std::fs::write(dir.join("losses.csv"), csv).map_err(io)?;
    if let Some(e) = log.evals.last() {
        write_report(&e.report, names, &dir.join("eval"))?;
    }
    Ok(())
}
