use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::info;

use super::config::{to_toml, TrainConfig};
use super::train::{build_samples, evaluate_samples, sample_spec, train_from, train_on, Pairing, SampleSpec};
use super::HarnessError;
use crate::detector::{build_model, classifier_parameter_names, transfer_weights, ModelSpec, ModelState};
use crate::eval::{pr_curves_csv, EvalReport};
use crate::inputs::Variant;
use crate::synthdata::{Corpus, ScenarioTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Variants,
    Offsets,
    Transfer,
    Fallback,
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExperimentKind::Variants => "variants",
            ExperimentKind::Offsets => "offsets",
            ExperimentKind::Transfer => "transfer",
            ExperimentKind::Fallback => "fallback",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Template for every run; variant, offset, seed and steps are overridden
    /// per run where the experiment says so.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub offsets: Vec<u32>,
    /// Allowed max-min spread of mean mAP across offsets, in mAP points.
    pub band: f64,
    /// Transfer at half budget must reach this fraction of from-scratch mAP.
    pub transfer_ratio: f64,
    /// Transfer source corpus; `train.dataset` is the destination.
    pub source: Option<PathBuf>,
    /// Trained Double checkpoint for the fallback experiment; trained on
    /// the spot when absent.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
            offsets: vec![1, 3, 5],
            band: 3.0,
            transfer_ratio: 0.9,
            source: None,
            checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        if self.offsets.contains(&0) {
            return Err(HarnessError::Config("offsets must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub config: TrainConfig,
    /// Test mAP in [0, 1].
    pub map: f64,
    pub final_loss: Option<f64>,
    pub report: EvalReport,
}

/// Aggregate over seeds, mAP in points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub maps: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single run).
    pub std: f64,
    /// Mean stratum mAP per tag (points); `None` when no run had that stratum.
    pub strata: Vec<(ScenarioTag, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Reported only; does not affect the exit status.
    pub asserted: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub rows: Vec<Row>,
    pub checks: Vec<Check>,
    pub runs: Vec<RunSummary>,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.asserted)
    }

    pub fn row(&self, label: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.label == label)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn make_row(label: &str, reports: &[&EvalReport]) -> Row {
    let maps: Vec<f64> = reports.iter().map(|r| r.map * 100.0).collect();
    let (mean, std) = mean_std(&maps);
    let strata = ScenarioTag::STRATA
        .iter()
        .map(|&tag| {
            let vals: Vec<f64> = reports
                .iter()
                .filter_map(|r| r.stratum(tag).and_then(|s| s.map))
                .map(|m| m * 100.0)
                .collect();
            (tag, (!vals.is_empty()).then(|| mean_std(&vals).0))
        })
        .collect();
    Row {
        label: label.to_string(),
        maps,
        mean,
        std,
        strata,
    }
}

fn summarize(label: &str, seed: u64, cfg: &TrainConfig, log: &super::RunLog) -> Result<RunSummary, HarnessError> {
    let report = log
        .evals
        .last()
        .ok_or_else(|| HarnessError::Config("test split is empty; nothing to evaluate".into()))?
        .report
        .clone();
    info!(label, seed, map = report.map, "run finished");
    Ok(RunSummary {
        label: label.to_string(),
        seed,
        config: cfg.clone(),
        map: report.map,
        final_loss: log.losses.last().map(|l| l.total),
        report,
    })
}

fn rows_by_label(runs: &[RunSummary], labels: &[String]) -> Vec<Row> {
    labels
        .iter()
        .map(|l| {
            let reports: Vec<&EvalReport> = runs.iter().filter(|r| &r.label == l).map(|r| &r.report).collect();
            make_row(l, &reports)
        })
        .collect()
}

/// Trains every variant from scratch with identical seeds and budgets.
pub fn experiment_compare_variants(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    let mut runs = Vec::new();
    for &variant in &cfg.variants {
        for &seed in &cfg.seeds {
            let tc = TrainConfig {
                variant,
                seed,
                ..cfg.train.clone()
            };
            let (_, log) = train_on(&tc, corpus)?;
            runs.push(summarize(&variant.to_string(), seed, &tc, &log)?);
        }
    }
    let labels: Vec<String> = cfg.variants.iter().map(|v| v.to_string()).collect();
    let rows = rows_by_label(&runs, &labels);
    let mean = |v: Variant| rows.iter().find(|r| r.label == v.to_string()).map(|r| r.mean);
    let mut checks = Vec::new();
    if let (Some(d), Some(b)) = (mean(Variant::Double), mean(Variant::Baseline)) {
        checks.push(Check {
            name: "double_ge_baseline".into(),
            passed: d >= b,
            asserted: true,
            detail: format!("double {d:.2} vs baseline {b:.2} mAP points"),
        });
    }
    if let (Some(f), Some(b)) = (mean(Variant::Flow), mean(Variant::Baseline)) {
        checks.push(Check {
            name: "flow_ge_baseline".into(),
            passed: f >= b,
            asserted: false,
            detail: format!("flow {f:.2} vs baseline {b:.2} mAP points"),
        });
    }
    Ok(ExperimentReport {
        kind: ExperimentKind::Variants,
        config: cfg.clone(),
        rows,
        checks,
        runs,
    })
}

/// Trains the Double variant at each offset.
pub fn experiment_offset_sweep(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    let max_offset = cfg.offsets.iter().copied().max().unwrap_or(1) as usize;
    if corpus.train.iter().chain(&corpus.test).any(|s| s.frames.len() <= max_offset) {
        return Err(HarnessError::Config(format!("sequences must be longer than the largest offset {max_offset}")));
    }
    let mut runs = Vec::new();
    for &offset in &cfg.offsets {
        for &seed in &cfg.seeds {
            let tc = TrainConfig {
                variant: Variant::Double,
                offset,
                seed,
                ..cfg.train.clone()
            };
            let (_, log) = train_on(&tc, corpus)?;
            runs.push(summarize(&format!("i={offset}"), seed, &tc, &log)?);
        }
    }
    let labels: Vec<String> = cfg.offsets.iter().map(|o| format!("i={o}")).collect();
    let rows = rows_by_label(&runs, &labels);
    let means: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    let span = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - means.iter().cloned().fold(f64::INFINITY, f64::min);
    let checks = vec![Check {
        name: "offset_span_within_band".into(),
        passed: span <= cfg.band,
        asserted: true,
        detail: format!("span {span:.2} mAP points, band {:.2}", cfg.band),
    }];
    Ok(ExperimentReport {
        kind: ExperimentKind::Offsets,
        config: cfg.clone(),
        rows,
        checks,
        runs,
    })
}

/// Source training, weight transfer and half-budget fine-tuning, against
/// from-scratch training on the destination at the full budget.
pub fn experiment_transfer(cfg: &ExperimentConfig, src: &Corpus, dst: &Corpus) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    let variant = cfg.train.variant;
    let mut runs = Vec::new();
    let mut copy_exact = true;
    let mut copy_detail = String::new();
    for &seed in &cfg.seeds {
        let base = TrainConfig {
            variant,
            seed,
            ..cfg.train.clone()
        };
        let (scratch_model, log) = train_on(&base, dst)?;
        drop(scratch_model);
        runs.push(summarize("from_scratch", seed, &base, &log)?);

        let (src_model, _) = train_on(&base, src)?;
        // keep the source input normalization; only the class count changes
        let dst_spec = ModelSpec {
            num_classes: dst.num_classes(),
            ..src_model.spec.clone()
        };
        let fresh = build_model(&dst_spec, seed)?;
        let moved = transfer_weights(&src_model, &fresh)?;
        let classifier = classifier_parameter_names();
        let same_classes = src_model.spec.num_classes == moved.spec.num_classes;
        for (name, p) in &moved.params {
            let expected = if classifier.contains(name) && !same_classes {
                &fresh.params[name]
            } else {
                &src_model.params[name]
            };
            let exact = p.shape == expected.shape
                && p.data.iter().zip(&expected.data).all(|(a, b)| a.to_bits() == b.to_bits());
            if !exact {
                copy_exact = false;
                let _ = write!(copy_detail, "{name} differs (seed {seed}); ");
            }
        }
        let half = TrainConfig {
            steps: base.steps / 2,
            ..base.clone()
        };
        let (_, log) = train_from(&half, dst, moved)?;
        runs.push(summarize("transfer_half_budget", seed, &half, &log)?);
    }
    let labels = vec!["from_scratch".to_string(), "transfer_half_budget".to_string()];
    let rows = rows_by_label(&runs, &labels);
    let (scratch, transfer) = (rows[0].mean, rows[1].mean);
    let ratio = if scratch > 0.0 { transfer / scratch } else { f64::INFINITY };
    let checks = vec![
        Check {
            name: "weight_copy_bit_exact".into(),
            passed: copy_exact,
            asserted: true,
            detail: if copy_exact {
                "all non-final layers copied bit-exactly".into()
            } else {
                copy_detail
            },
        },
        Check {
            name: "transfer_ratio".into(),
            passed: ratio >= cfg.transfer_ratio,
            asserted: true,
            detail: format!(
                "transfer {transfer:.2} / scratch {scratch:.2} = {ratio:.3}, need {:.3}",
                cfg.transfer_ratio
            ),
        },
    ];
    Ok(ExperimentReport {
        kind: ExperimentKind::Transfer,
        config: cfg.clone(),
        rows,
        checks,
        runs,
    })
}

/// Evaluates a trained Double model with true pairs and with the target
/// frame duplicated. Nothing is asserted.
pub fn experiment_fallback(
    cfg: &ExperimentConfig,
    model: Option<&ModelState>,
    corpus: &Corpus,
) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    let mut runs = Vec::new();
    let trained;
    let models: Vec<(u64, &ModelState, TrainConfig)> = match model {
        Some(m) => vec![(
            0,
            m,
            TrainConfig {
                variant: m.spec.variant,
                ..cfg.train.clone()
            },
        )],
        None => {
            let mut v = Vec::new();
            for &seed in &cfg.seeds {
                let tc = TrainConfig {
                    variant: Variant::Double,
                    seed,
                    ..cfg.train.clone()
                };
                v.push((seed, train_on(&tc, corpus)?.0, tc));
            }
            trained = v;
            trained.iter().map(|(s, m, c)| (*s, m, c.clone())).collect()
        }
    };
    for (seed, m, tc) in models {
        if m.spec.variant != Variant::Double {
            return Err(HarnessError::Config(format!("fallback needs a double model, got {}", m.spec.variant)));
        }
        for (label, pairing) in [("paired", Pairing::Offset(tc.offset)), ("fallback", Pairing::Duplicate)] {
            let spec = SampleSpec {
                pairing,
                ..sample_spec(&tc, &m.spec)
            };
            let samples = build_samples(&corpus.test, &spec)?;
            let report = evaluate_samples(m, &samples, &tc, &ScenarioTag::STRATA)?;
            runs.push(RunSummary {
                label: label.into(),
                seed,
                config: tc.clone(),
                map: report.map,
                final_loss: None,
                report,
            });
        }
    }
    let labels = vec!["paired".to_string(), "fallback".to_string()];
    let mut rows = rows_by_label(&runs, &labels);
    let delta_maps: Vec<f64> = rows[0].maps.iter().zip(&rows[1].maps).map(|(p, f)| p - f).collect();
    let (mean, std) = mean_std(&delta_maps);
    let strata = rows[0]
        .strata
        .iter()
        .zip(&rows[1].strata)
        .map(|(&(tag, p), &(_, f))| (tag, p.zip(f).map(|(p, f)| p - f)))
        .collect();
    rows.push(Row {
        label: "delta".into(),
        maps: delta_maps,
        mean,
        std,
        strata,
    });
    let checks = vec![Check {
        name: "fallback_delta".into(),
        passed: true,
        asserted: false,
        detail: format!("paired minus fallback {mean:.2} mAP points"),
    }];
    Ok(ExperimentReport {
        kind: ExperimentKind::Fallback,
        config: cfg.clone(),
        rows,
        checks,
        runs,
    })
}

/// Writes `report.json`, `summary.csv`, `runs.csv`, `strata.csv`,
/// `checks.csv`, `pr_curves.csv` and one resolved config per run.
pub fn write_experiment(report: &ExperimentReport, names: &[String], dir: &Path) -> Result<(), HarnessError> {
    let io = |p: &Path| {
        let s = p.display().to_string();
        move |e| HarnessError::Io(s, e)
    };
    let configs = dir.join("configs");
    fs::create_dir_all(&configs).map_err(io(&configs))?;
    let put = |file: &str, body: String| {
        let p = dir.join(file);
        fs::write(&p, body).map_err(io(&p))
    };
    put("report.json", serde_json::to_string_pretty(report).expect("report serializes"))?;

    let mut s = String::from("label,runs,mean_map,std_map\n");
    for r in &report.rows {
        let _ = writeln!(s, "{},{},{:.4},{:.4}", r.label, r.maps.len(), r.mean, r.std);
    }
    put("summary.csv", s)?;

    let mut s = String::from("label,stratum,mean_map\n");
    for r in &report.rows {
        for (tag, v) in &r.strata {
            let v = v.map(|v| format!("{v:.4}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{}", r.label, tag.name(), v);
        }
    }
    put("strata.csv", s)?;

    let mut s = String::from("label,seed,map\n");
    for r in &report.runs {
        let _ = writeln!(s, "{},{},{:.4}", r.label, r.seed, r.map * 100.0);
    }
    put("runs.csv", s)?;

    let mut s = String::from("check,asserted,passed,detail\n");
    for c in &report.checks {
        let _ = writeln!(s, "{},{},{},\"{}\"", c.name, c.asserted, c.passed, c.detail.replace('"', "'"));
    }
    put("checks.csv", s)?;

    let mut s = String::from("label,seed,class_id,class,rank,recall,precision\n");
    for r in &report.runs {
        for line in pr_curves_csv(&r.report, names).lines().skip(1) {
            let _ = writeln!(s, "{},{},{line}", r.label, r.seed);
        }
    }
    put("pr_curves.csv", s)?;

    for r in &report.runs {
        let p = configs.join(format!("{}_seed{}.toml", r.label.replace('=', ""), r.seed));
        fs::write(&p, to_toml(&r.config)?).map_err(io(&p))?;
    }
    Ok(())
}
