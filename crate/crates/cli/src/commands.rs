use std::collections::BTreeMap;
use std::path::Path;

use l2d_core::calibration::{
    error_distribution, pathology_stats, wasserstein_1d, CalibrationReport, Histogram,
    ReliabilityBins,
};
use l2d_core::data::{load_dataset_with, split_dataset, CsvOptions, DataSplit, Dataset};
use l2d_core::deferral::{
    confidence_baseline_train, evaluate_system, score_baseline_train, sweep_budget,
    sweep_expertise, write_sweep_csv, EvalSummary, ExpertiseSweep, Method,
};
use l2d_core::estimators::{decide, SurrogateKind};
use l2d_core::simulation::{generate_dataset, make_worked_example_dataset, BayesOracle};
use l2d_core::training::{forward, softmax_slice, train, ModelParams, TrainReport};
use serde::Serialize;

use crate::artifacts::{
    dataset_csv, read_checkpoint, read_dataset, Checkpoint, DatasetInfo, OutputDir,
    FORMAT_VERSION, SPLIT_FILES,
};
use crate::config::{DataSource, ExperimentConfig, MethodKind, SweepKind};
use crate::failure::{Failure, ResultExt};

/// Raw expert confidences above this are folded into the last histogram bin.
pub const PATHOLOGY_CAP: f64 = 10.0;

fn out_dir(config: &ExperimentConfig) -> Result<OutputDir, Failure> {
    let root = config
        .out
        .as_deref()
        .ok_or_else(|| Failure::usage("no output directory: pass --out or set `out` in the config"))?;
    OutputDir::create(root)
}

/// Builds the three splits described by `[data]` and `[expert]`.
pub fn build_split(config: &ExperimentConfig) -> Result<(DataSplit, DatasetInfo), Failure> {
    let d = &config.data;
    let k = d.num_classes;
    let (split, mixture, expert) = match d.source {
        DataSource::Synthetic => {
            let spec = d.mixture()?;
            let expert = config.expert.build(k)?;
            let base = config.seed.wrapping_mul(3);
            let gen = |n, i| generate_dataset(&spec, &expert, n, base.wrapping_add(i));
            let split = DataSplit {
                train: gen(d.n_train, 0)?,
                validation: gen(d.n_validation, 1)?,
                test: gen(d.n_test, 2)?,
            };
            (split, Some(spec), Some(expert))
        }
        DataSource::Csv => {
            let path = d
                .path
                .as_deref()
                .ok_or_else(|| Failure::usage("data.source = \"csv\" needs data.path"))?;
            if !path.is_file() {
                return Err(Failure::usage(format!("{}: no such file", path.display())));
            }
            let all = load_dataset_with(path, k, CsvOptions { header: config.header })?;
            (split_dataset(&all, d.fractions, config.seed)?, None, None)
        }
        DataSource::WorkedExample => {
            let n = d.n_train + d.n_validation + d.n_test;
            (make_worked_example_dataset(k, n, config.seed)?, None, None)
        }
    };
    let rows = SPLIT_FILES
        .iter()
        .zip([&split.train, &split.validation, &split.test])
        .map(|(name, ds)| (name.to_string(), ds.len()))
        .collect();
    let info = DatasetInfo {
        source: d.source,
        num_classes: k,
        dim: split.train.dim(),
        header: config.header,
        rows,
        mixture,
        expert,
    };
    Ok((split, info))
}

pub fn generate(config: &ExperimentConfig) -> Result<(), Failure> {
    let (split, info) = build_split(config)?;
    let mut out = out_dir(config)?;
    for (name, ds) in SPLIT_FILES.iter().zip([&split.train, &split.validation, &split.test]) {
        out.write(name, &dataset_csv(ds, config.header))?;
    }
    if config.data.grid_steps > 0 {
        let (Some(spec), Some(expert)) = (&info.mixture, &info.expert) else {
            return Err(Failure::usage("data.grid_steps needs a synthetic source"));
        };
        let oracle = BayesOracle::new(spec.clone(), expert.clone())?;
        let mut grid = Vec::new();
        oracle.write_grid(config.data.grid_lo, config.data.grid_hi, config.data.grid_steps, &mut grid)?;
        out.write("oracle_grid.csv", &grid)?;
    }
    log::info!(
        "generated {} / {} / {} rows",
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    out.finish("generate", config, Some(info), BTreeMap::new())
}

/// Loads a generated directory, or builds the data in memory when no
/// directory is given.
fn load_split(
    config: &ExperimentConfig,
    data: Option<&Path>,
) -> Result<(DataSplit, BTreeMap<String, String>), Failure> {
    let Some(dir) = data else {
        return Ok((build_split(config)?.0, BTreeMap::new()));
    };
    if !dir.is_dir() {
        return Err(Failure::usage(format!("{}: no such directory", dir.display())));
    }
    let mut inputs = BTreeMap::new();
    let mut sets = Vec::new();
    for name in SPLIT_FILES {
        let (ds, sha) = read_dataset(&dir.join(name), None, config.data.num_classes, config.header)?;
        inputs.insert(name.to_string(), sha);
        sets.push(ds);
    }
    let test = sets.pop().expect("three splits");
    let validation = sets.pop().expect("three splits");
    let train = sets.pop().expect("three splits");
    Ok((DataSplit { train, validation, test }, inputs))
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    config_hash: String,
    method: &'a Method,
    final_validation_loss: f64,
    test_summary: EvalSummary,
    #[serde(flatten)]
    report: &'a TrainReport,
}

pub fn train_model(
    config: &ExperimentConfig,
    split: &DataSplit,
) -> Result<(Method, ModelParams, TrainReport), Failure> {
    let arch = config.model.architecture()?;
    let train_config = config.train.to_config(config.seed)?;
    let surrogate = |s: SurrogateKind| -> Result<(Method, ModelParams, TrainReport), Failure> {
        let (params, report) = train(split, arch, &config.model.defer_objective(s)?, &train_config)?;
        Ok((Method::Surrogate { surrogate: s, phi: config.model.phi }, params, report))
    };
    match config.model.method {
        MethodKind::Softmax => surrogate(SurrogateKind::Softmax),
        MethodKind::Ova => surrogate(SurrogateKind::OneVsAll),
        MethodKind::ScoreBaseline => {
            let (params, report, temperature) = score_baseline_train(split, arch, &train_config)?;
            Ok((Method::ScoreBaseline { temperature }, params, report))
        }
        MethodKind::ConfidenceBaseline => {
            let expert_const_acc = split.train.expert_accuracy();
            let (params, report) = confidence_baseline_train(
                split,
                expert_const_acc,
                config.model.baseline_budget,
                arch,
                &train_config,
            )?;
            Ok((Method::ConfidenceBaseline { expert_const_acc }, params, report))
        }
    }
}

pub fn train_cmd(config: &ExperimentConfig, data: Option<&Path>) -> Result<(), Failure> {
    let (split, inputs) = load_split(config, data)?;
    let (method, params, report) = train_model(config, &split)?;
    let final_validation_loss = report
        .epochs
        .last()
        .map(|e| e.validation_loss)
        .ok_or_else(|| Failure::runtime("training ran no epochs"))?;
    let test_summary = evaluate_system(&params, &split.test, &method, None)?;
    log::info!(
        "{}: best epoch {} of {}, validation loss {:.6}, test system accuracy {:.4}",
        method.name(),
        report.best_epoch,
        report.stopped_epoch,
        report.best_validation_loss,
        test_summary.system_accuracy
    );
    let hash = config.hash();
    let checkpoint = Checkpoint {
        format_version: FORMAT_VERSION,
        config_hash: hash.clone(),
        method,
        num_classes: split.train.num_classes(),
        model: params,
    };
    let mut out = out_dir(config)?;
    out.write_json("checkpoint.json", &checkpoint)?;
    out.write_json(
        "train_report.json",
        &TrainOutput {
            config_hash: hash,
            method: &method,
            final_validation_loss,
            test_summary,
            report: &report,
        },
    )?;
    out.finish("train", config, None, inputs)
}

/// Per-instance confidences used by the calibration audit.
struct Confidences {
    classifier: Vec<f64>,
    classifier_correct: Vec<bool>,
    /// Raw and clamped expert-correctness estimates; absent for the score
    /// baseline, which has none.
    expert_raw: Option<Vec<f64>>,
    expert: Option<Vec<f64>>,
}

fn confidences(ck: &Checkpoint, dataset: &Dataset) -> Result<Confidences, Failure> {
    let n = dataset.len();
    let mut c = Confidences {
        classifier: Vec::with_capacity(n),
        classifier_correct: Vec::with_capacity(n),
        expert_raw: None,
        expert: None,
    };
    let mut raw = Vec::with_capacity(n);
    let mut clamped = Vec::with_capacity(n);
    for inst in dataset.instances() {
        match ck.method {
            Method::Surrogate { surrogate, phi } => {
                let d = decide(&forward(&ck.model, &inst.features)?, surrogate, phi);
                c.classifier.push(d.classifier_confidence);
                c.classifier_correct.push(d.predicted_class == inst.label);
                raw.push(d.expert_confidence);
                clamped.push(d.expert_confidence_clamped);
            }
            Method::ScoreBaseline { temperature } => {
                let z: Vec<f64> = ck.model.outputs(&inst.features)?.iter().map(|v| v / temperature).collect();
                push_classifier(&mut c, &softmax_slice(&z), inst.label);
            }
            Method::ConfidenceBaseline { expert_const_acc } => {
                push_classifier(&mut c, &softmax_slice(&ck.model.outputs(&inst.features)?), inst.label);
                raw.push(expert_const_acc);
                clamped.push(expert_const_acc);
            }
        }
    }
    if !matches!(ck.method, Method::ScoreBaseline { .. }) {
        c.expert_raw = Some(raw);
        c.expert = Some(clamped);
    }
    Ok(c)
}

fn push_classifier(c: &mut Confidences, probs: &[f64], label: usize) {
    let pred = l2d_core::estimators::argmax(probs);
    c.classifier.push(probs[pred]);
    c.classifier_correct.push(pred == label);
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    config_hash: String,
    method: &'a Method,
    /// `null` means the model's own deferral rule.
    budget: Option<f64>,
    bin_count: usize,
    summary: EvalSummary,
    expert_ece: Option<f64>,
    classifier_ece: f64,
    pathology_fraction: Option<f64>,
    /// W1 between predicted risk `1 - c` and the realized error indicator.
    wasserstein_expert: Option<f64>,
    wasserstein_classifier: f64,
}

#[derive(Serialize)]
struct CalibrationOutput<'a> {
    config_hash: &'a str,
    target: &'a str,
    #[serde(flatten)]
    report: CalibrationReport,
}

fn realized_errors(correct: &[bool]) -> Vec<f64> {
    correct.iter().map(|&c| if c { 0.0 } else { 1.0 }).collect()
}

fn histogram_csv(h: &Histogram) -> Vec<u8> {
    let mut buf = Vec::new();
    h.write_csv(&mut buf).expect("writing to memory");
    buf
}

pub fn evaluate_cmd(config: &ExperimentConfig, checkpoint: &Path, data: &Path) -> Result<(), Failure> {
    let (ck, ck_sha) = read_checkpoint(checkpoint)?;
    let (dataset, data_sha) = read_dataset(data, Some(ck.num_classes), ck.num_classes, config.header)?;
    if dataset.dim() != ck.model.input_dim {
        return Err(Failure::usage(format!(
            "{}: {} features, checkpoint expects {}",
            data.display(),
            dataset.dim(),
            ck.model.input_dim
        )));
    }
    let budget = config.evaluate.budget;
    let bins = config.evaluate.bins;
    let summary = evaluate_system(&ck.model, &dataset, &ck.method, budget)?;
    let conf = confidences(&ck, &dataset)?;
    let hash = config.hash();
    let mut out = out_dir(config)?;

    let classifier_report = CalibrationReport::from_bins(
        &ReliabilityBins::from_samples(&conf.classifier, &conf.classifier_correct, bins)?,
        0.0,
    )?;
    let classifier_risk = error_distribution(&conf.classifier)?;
    let wasserstein_classifier = wasserstein_1d(&classifier_risk, &realized_errors(&conf.classifier_correct))?;
    out.write("classifier_risk_histogram.csv", &histogram_csv(&Histogram::unit(&classifier_risk, bins)?))?;

    let mut expert_ece = None;
    let mut pathology_fraction = None;
    let mut wasserstein_expert = None;
    if let (Some(raw), Some(clamped)) = (&conf.expert_raw, &conf.expert) {
        let expert_correct: Vec<bool> = dataset.instances().iter().map(|i| i.expert_correct()).collect();
        let folded: Vec<f64> = raw.iter().map(|v| v.min(PATHOLOGY_CAP)).collect();
        let pathology = pathology_stats(&folded, config.evaluate.histogram_width)?;
        let report = CalibrationReport::from_bins(
            &ReliabilityBins::from_samples(clamped, &expert_correct, bins)?,
            pathology.fraction_gt_one,
        )?;
        let risk = error_distribution(clamped)?;
        wasserstein_expert = Some(wasserstein_1d(&risk, &realized_errors(&expert_correct))?);
        expert_ece = Some(report.ece);
        pathology_fraction = Some(pathology.fraction_gt_one);
        out.write("expert_risk_histogram.csv", &histogram_csv(&Histogram::unit(&risk, bins)?))?;
        out.write("pathology_histogram.csv", &histogram_csv(&pathology.histogram))?;
        out.write_json(
            "calibration_expert.json",
            &CalibrationOutput { config_hash: &hash, target: "expert_correct", report },
        )?;
    }
    out.write_json(
        "calibration_classifier.json",
        &CalibrationOutput {
            config_hash: &hash,
            target: "classifier_correct",
            report: classifier_report.clone(),
        },
    )?;
    log::info!(
        "{}: system accuracy {:.4}, coverage {:.4}",
        ck.method.name(),
        summary.system_accuracy,
        summary.coverage
    );
    out.write_json(
        "eval_summary.json",
        &EvalOutput {
            config_hash: hash.clone(),
            method: &ck.method,
            budget,
            bin_count: bins,
            summary,
            expert_ece,
            classifier_ece: classifier_report.ece,
            pathology_fraction,
            wasserstein_expert,
            wasserstein_classifier,
        },
    )?;
    let inputs = BTreeMap::from([("checkpoint".to_string(), ck_sha), ("dataset".to_string(), data_sha)]);
    out.finish("evaluate", config, None, inputs)
}

pub fn sweep_cmd(
    config: &ExperimentConfig,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
) -> Result<(), Failure> {
    let mut inputs = BTreeMap::new();
    let (rows, key) = match config.sweep.kind {
        SweepKind::Budget => {
            let (Some(checkpoint), Some(data)) = (checkpoint, data) else {
                return Err(Failure::usage("a budget sweep needs --checkpoint and --data"));
            };
            let (ck, ck_sha) = read_checkpoint(checkpoint)?;
            let (dataset, data_sha) =
                read_dataset(data, Some(ck.num_classes), ck.num_classes, config.header)?;
            inputs.insert("checkpoint".to_string(), ck_sha);
            inputs.insert("dataset".to_string(), data_sha);
            (sweep_budget(&ck.model, &dataset, &ck.method, &config.sweep.budgets)?, "budget")
        }
        SweepKind::Expertise => {
            if checkpoint.is_some() || data.is_some() {
                return Err(Failure::usage(
                    "an expertise sweep trains its own models; drop --checkpoint and --data",
                ));
            }
            if config.data.source != DataSource::Synthetic {
                return Err(Failure::usage("an expertise sweep needs data.source = \"synthetic\""));
            }
            let sweep = ExpertiseSweep {
                spec: config.data.mixture()?,
                k_values: config.k_values(),
                acc_head: config.sweep.acc_head,
                acc_tail: config.sweep.acc_tail,
                n_train: config.data.n_train,
                n_validation: config.data.n_validation,
                n_test: config.data.n_test,
                architecture: config.model.architecture()?,
                train: config.train.to_config(config.seed)?,
                seed: config.seed,
            };
            (sweep_expertise(&sweep)?, "k")
        }
    };
    let mut csv = Vec::new();
    write_sweep_csv(&rows, key, &mut csv).runtime()?;
    let mut out = out_dir(config)?;
    out.write("sweep.csv", &csv)?;
    out.finish("sweep", config, None, inputs)
}
