//! Budgeted deferral policies, the two classifier baselines, system-level
//! metrics and sweeps over budgets and expert strength.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::fit_temperature_multiclass;
use crate::data::{floor_count, DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::estimators::{argmax, budget_scores, decide, SurrogateKind};
use crate::losses::BinaryLoss;
use crate::simulation::{
    generate_dataset, make_split_expert, resimulate_expert, ExpertModel, GaussianMixtureSpec,
};
use crate::training::{
    forward, softmax_slice, train, train_selected, Architecture, ModelParams, Objective,
    TrainConfig, TrainReport,
};

/// How a trained model is turned into a predict-or-defer system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    /// `K+1` output model trained with a deferral surrogate.
    Surrogate {
        surrogate: SurrogateKind,
        phi: BinaryLoss,
    },
    /// Plain classifier; defers the least confident inputs under a budget.
    ScoreBaseline { temperature: f64 },
    /// Classifier trained on the inputs it keeps; defers where its
    /// confidence falls below the expert's overall accuracy.
    ConfidenceBaseline { expert_const_acc: f64 },
}

impl Method {
    pub fn surrogate(surrogate: SurrogateKind) -> Self {
        Method::Surrogate {
            surrogate,
            phi: BinaryLoss::Logistic,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Surrogate { surrogate, .. } => surrogate.name(),
            Method::ScoreBaseline { .. } => "score_baseline",
            Method::ConfidenceBaseline { .. } => "confidence_baseline",
        }
    }

    pub fn output_dim(&self, num_classes: usize) -> usize {
        match self {
            Method::Surrogate { .. } => num_classes + 1,
            _ => num_classes,
        }
    }
}

fn check_budget(b: f64) -> Result<()> {
    if (0.0..=1.0).contains(&b) {
        Ok(())
    } else {
        Err(Error::Argument(format!("budget {b} outside [0, 1]")))
    }
}

/// Marks the `count` smallest keys, ties broken by index.
fn mark_smallest(keys: &[f64], count: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&i, &j| keys[i].total_cmp(&keys[j]).then(i.cmp(&j)));
    let mut mask = vec![false; keys.len()];
    for &i in order.iter().take(count) {
        mask[i] = true;
    }
    mask
}

/// Defers at most `floor(b n)` instances among those whose deferral score
/// reaches their classifier score, smallest `clf - defer` margin first.
/// `scores[i] = (classifier score, deferral score)`.
pub fn defer_with_budget_surrogate(scores: &[(f64, f64)], b: f64) -> Result<Vec<bool>> {
    check_budget(b)?;
    let n_c = scores.iter().filter(|(clf, d)| d >= clf).count();
    let margins: Vec<f64> = scores.iter().map(|(clf, d)| clf - d).collect();
    Ok(mark_smallest(&margins, floor_count(b, scores.len()).min(n_c)))
}

/// Defers exactly `floor(b n)` least confident instances.
pub fn score_baseline_defer(confidences: &[f64], b: f64) -> Result<Vec<bool>> {
    check_budget(b)?;
    Ok(mark_smallest(confidences, floor_count(b, confidences.len())))
}

/// Defers the least confident instances, capped by `floor(b n)` and by the
/// number whose confidence is below the expert's constant accuracy.
pub fn confidence_baseline_defer(
    confidences: &[f64],
    expert_const_acc: f64,
    b: f64,
) -> Result<Vec<bool>> {
    check_budget(b)?;
    let n_c = confidences.iter().filter(|&&c| c < expert_const_acc).count();
    let cap = floor_count(b, confidences.len()).min(n_c);
    Ok(mark_smallest(confidences, cap))
}

/// Rows of one minibatch used by the confidence baseline: those where the
/// classifier beats the expert, capped by `floor(b |batch|)`, smallest
/// `expert_const_acc - max_k p_k` first. Returns positions in the batch.
pub fn confidence_baseline_select(max_probs: &[f64], expert_const_acc: f64, b: f64) -> Vec<usize> {
    let n_c = max_probs.iter().filter(|&&p| p > expert_const_acc).count();
    let cap = floor_count(b, max_probs.len()).min(n_c);
    let keys: Vec<f64> = max_probs.iter().map(|p| expert_const_acc - p).collect();
    mark_smallest(&keys, cap)
        .into_iter()
        .enumerate()
        .filter_map(|(i, keep)| keep.then_some(i))
        .collect()
}

pub fn confidence_baseline_train(
    split: &DataSplit,
    expert_const_acc: f64,
    b: f64,
    architecture: Architecture,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    check_budget(b)?;
    train_selected(
        split,
        architecture,
        &Objective::Classifier,
        config,
        |params, data, batch| {
            let max_probs: Vec<f64> = batch
                .iter()
                .map(|&i| {
                    let out = params
                        .outputs(&data.instances()[i].features)
                        .expect("dimension checked by trainer");
                    softmax_slice(&out).into_iter().fold(0.0, f64::max)
                })
                .collect();
            confidence_baseline_select(&max_probs, expert_const_acc, b)
                .into_iter()
                .map(|p| batch[p])
                .collect()
        },
    )
}

/// Trains a plain classifier and fits its temperature on the validation set.
pub fn score_baseline_train(
    split: &DataSplit,
    architecture: Architecture,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport, f64)> {
    let (params, report) = train(split, architecture, &Objective::Classifier, config)?;
    let logits = split
        .validation
        .instances()
        .iter()
        .map(|i| params.outputs(&i.features))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = split.validation.instances().iter().map(|i| i.label).collect();
    let temperature = fit_temperature_multiclass(&logits, &labels)?;
    Ok((params, report, temperature))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub n: u64,
    pub n_deferred: u64,
    pub classifier_correct: u64,
    pub expert_correct: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub system_accuracy: f64,
    pub coverage: f64,
    /// Accuracy on the instances the classifier kept (0 if none).
    pub classifier_accuracy: f64,
    /// Expert accuracy on deferred instances (0 if none).
    pub expert_accuracy: f64,
    pub n_deferred: u64,
    pub counts: EvalCounts,
}

impl EvalSummary {
    pub fn from_counts(counts: EvalCounts) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let kept = counts.n - counts.n_deferred;
        Self {
            system_accuracy: ratio(counts.classifier_correct + counts.expert_correct, counts.n),
            coverage: ratio(kept, counts.n),
            classifier_accuracy: ratio(counts.classifier_correct, kept),
            expert_accuracy: ratio(counts.expert_correct, counts.n_deferred),
            n_deferred: counts.n_deferred,
            counts,
        }
    }
}

/// Tallies a deferral mask against the dataset.
pub fn summarize(dataset: &Dataset, predictions: &[usize], deferred: &[bool]) -> EvalSummary {
    let mut c = EvalCounts {
        n: dataset.len() as u64,
        n_deferred: 0,
        classifier_correct: 0,
        expert_correct: 0,
    };
    for ((inst, &pred), &d) in dataset.instances().iter().zip(predictions).zip(deferred) {
        if d {
            c.n_deferred += 1;
            c.expert_correct += u64::from(inst.expert_correct());
        } else {
            c.classifier_correct += u64::from(pred == inst.label);
        }
    }
    EvalSummary::from_counts(c)
}

/// Per-instance quantities every policy needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDataset {
    pub predictions: Vec<usize>,
    /// Deferral under the model's own rule, used when no budget is given.
    pub native_defer: Vec<bool>,
    /// `(classifier score, deferral score)` for the budgeted surrogate rule.
    pub scores: Vec<(f64, f64)>,
}

pub fn score_dataset(params: &ModelParams, dataset: &Dataset, method: &Method) -> Result<ScoredDataset> {
    let expected = method.output_dim(dataset.num_classes());
    if params.output_dim != expected || params.input_dim != dataset.dim() {
        return Err(Error::Argument(format!(
            "model maps {} features to {} outputs; {} method on this dataset needs {} -> {}",
            params.input_dim,
            params.output_dim,
            method.name(),
            dataset.dim(),
            expected
        )));
    }
    let n = dataset.len();
    let mut out = ScoredDataset {
        predictions: Vec::with_capacity(n),
        native_defer: Vec::with_capacity(n),
        scores: Vec::with_capacity(n),
    };
    for inst in dataset.instances() {
        match *method {
            Method::Surrogate { surrogate, phi } => {
                let g = forward(params, &inst.features)?;
                let d = decide(&g, surrogate, phi);
                out.predictions.push(d.predicted_class);
                out.native_defer.push(d.deferred);
                out.scores.push(budget_scores(&g, surrogate, phi));
            }
            Method::ScoreBaseline { temperature } => {
                let z = params.outputs(&inst.features)?;
                let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
                let conf = softmax_slice(&scaled).into_iter().fold(0.0, f64::max);
                out.predictions.push(argmax(&z));
                out.native_defer.push(false);
                out.scores.push((conf, 0.0));
            }
            Method::ConfidenceBaseline { expert_const_acc } => {
                let z = params.outputs(&inst.features)?;
                let conf = softmax_slice(&z).into_iter().fold(0.0, f64::max);
                out.predictions.push(argmax(&z));
                out.native_defer.push(conf < expert_const_acc);
                out.scores.push((conf, expert_const_acc));
            }
        }
    }
    Ok(out)
}

fn mask_for(scored: &ScoredDataset, method: &Method, budget: Option<f64>) -> Result<Vec<bool>> {
    let Some(b) = budget else {
        return Ok(scored.native_defer.clone());
    };
    let clf: Vec<f64> = scored.scores.iter().map(|s| s.0).collect();
    match *method {
        Method::Surrogate { .. } => defer_with_budget_surrogate(&scored.scores, b),
        Method::ScoreBaseline { .. } => score_baseline_defer(&clf, b),
        Method::ConfidenceBaseline { expert_const_acc } => {
            confidence_baseline_defer(&clf, expert_const_acc, b)
        }
    }
}

/// System metrics under the model's own rule (`budget = None`) or under the
/// budgeted policy matching `method`.
pub fn evaluate_system(
    params: &ModelParams,
    dataset: &Dataset,
    method: &Method,
    budget: Option<f64>,
) -> Result<EvalSummary> {
    dataset.require_non_empty()?;
    let scored = score_dataset(params, dataset, method)?;
    evaluate_scored(&scored, dataset, method, budget)
}

pub fn evaluate_scored(
    scored: &ScoredDataset,
    dataset: &Dataset,
    method: &Method,
    budget: Option<f64>,
) -> Result<EvalSummary> {
    let mask = mask_for(scored, method, budget)?;
    Ok(summarize(dataset, &scored.predictions, &mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Budget `b` or expert boundary `k`.
    pub key: f64,
    pub method: String,
    pub summary: EvalSummary,
}

/// One row per budget, evaluated in parallel.
pub fn sweep_budget(
    params: &ModelParams,
    dataset: &Dataset,
    method: &Method,
    budgets: &[f64],
) -> Result<Vec<SweepRow>> {
    dataset.require_non_empty()?;
    budgets.iter().try_for_each(|&b| check_budget(b))?;
    let scored = score_dataset(params, dataset, method)?;
    budgets
        .par_iter()
        .map(|&b| {
            Ok(SweepRow {
                key: b,
                method: method.name().to_string(),
                summary: evaluate_scored(&scored, dataset, method, Some(b))?,
            })
        })
        .collect()
}

/// `0, 0.1, ..., 1`.
pub fn default_budgets() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertiseSweep {
    pub spec: GaussianMixtureSpec,
    pub k_values: Vec<usize>,
    pub acc_head: f64,
    pub acc_tail: f64,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub seed: u64,
}

/// For each `k`, re-simulates a split expert on fixed features, trains both
/// surrogates with the same seed and evaluates their native rejectors on
/// the test set. Rows are ordered by `k`, softmax first.
pub fn sweep_expertise(sweep: &ExpertiseSweep) -> Result<Vec<SweepRow>> {
    let k_classes = sweep.spec.num_classes();
    let base_expert = ExpertModel::Oracle {
        num_classes: k_classes,
    };
    let gen = |n, offset| generate_dataset(&sweep.spec, &base_expert, n, sweep.seed.wrapping_add(offset));
    let base = [
        gen(sweep.n_train, 0)?,
        gen(sweep.n_validation, 1)?,
        gen(sweep.n_test, 2)?,
    ];
    let per_k: Vec<Result<Vec<SweepRow>>> = sweep
        .k_values
        .par_iter()
        .map(|&k| {
            let expert = make_split_expert(k_classes, k, sweep.acc_head, sweep.acc_tail)?;
            let sets = base
                .iter()
                .enumerate()
                .map(|(i, d)| resimulate_expert(d, &expert, sweep.seed.wrapping_add(10 + i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let split = DataSplit {
                train: sets[0].clone(),
                validation: sets[1].clone(),
                test: sets[2].clone(),
            };
            [SurrogateKind::Softmax, SurrogateKind::OneVsAll]
                .into_iter()
                .map(|s| {
                    let (params, _) = train(&split, sweep.architecture, &Objective::defer(s), &sweep.train)?;
                    Ok(SweepRow {
                        key: k as f64,
                        method: s.name().to_string(),
                        summary: evaluate_system(&params, &split.test, &Method::surrogate(s), None)?,
                    })
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_k {
        rows.extend(r?);
    }
    Ok(rows)
}

pub const SWEEP_COLUMNS: [&str; 6] = [
    "method",
    "system_accuracy",
    "coverage",
    "classifier_accuracy",
    "expert_accuracy",
    "n_deferred",
];

/// CSV with header `<key_name>,method,system_accuracy,...,n_deferred`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], key_name: &str, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{},{}", key_name, SWEEP_COLUMNS.join(","))?;
    for r in rows {
        let s = &r.summary;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.key, r.method, s.system_accuracy, s.coverage, s.classifier_accuracy, s.expert_accuracy, s.n_deferred
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Instance;
    use crate::data::split_dataset;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn deferred(mask: &[bool]) -> Vec<usize> {
        mask.iter().enumerate().filter_map(|(i, d)| d.then_some(i)).collect()
    }

    #[test]
    fn surrogate_policy_fixture() {
        // Margins clf - defer of (-0.2, 0.1, -0.05, 0.3).
        let scores = [(0.3, 0.5), (0.6, 0.5), (0.45, 0.5), (0.8, 0.5)];
        let mask = defer_with_budget_surrogate(&scores, 0.75).unwrap();
        assert_eq!(deferred(&mask), vec![0, 2]);
        let mask = defer_with_budget_surrogate(&scores, 0.25).unwrap();
        assert_eq!(deferred(&mask), vec![0]);
        assert!(deferred(&defer_with_budget_surrogate(&scores, 0.0).unwrap()).is_empty());
        let all = [(0.1, 0.9); 4];
        assert_eq!(deferred(&defer_with_budget_surrogate(&all, 1.0).unwrap()), vec![0, 1, 2, 3]);
        assert!(defer_with_budget_surrogate(&all, 1.1).is_err());
    }

    #[test]
    fn score_baseline_fixture() {
        let conf = [0.9, 0.2, 0.8, 0.4];
        assert_eq!(deferred(&score_baseline_defer(&conf, 0.5).unwrap()), vec![1, 3]);
        assert!(deferred(&score_baseline_defer(&conf, 0.0).unwrap()).is_empty());
        assert_eq!(deferred(&score_baseline_defer(&conf, 1.0).unwrap()), vec![0, 1, 2, 3]);
        // Ties go to the lower index.
        assert_eq!(deferred(&score_baseline_defer(&[0.5, 0.5, 0.5], 0.34).unwrap()), vec![0]);
    }

    #[test]
    fn confidence_baseline_fixture() {
        let conf = [0.9, 0.2, 0.8, 0.4];
        assert_eq!(deferred(&confidence_baseline_defer(&conf, 0.5, 0.75).unwrap()), vec![1, 3]);
        assert_eq!(deferred(&confidence_baseline_defer(&conf, 0.5, 0.25).unwrap()), vec![1]);
        assert_eq!(
            confidence_baseline_defer(&conf, 1.0, 0.5).unwrap(),
            score_baseline_defer(&conf, 0.5).unwrap()
        );
        assert!(deferred(&confidence_baseline_defer(&conf, 0.1, 1.0).unwrap()).is_empty());
    }

    #[test]
    fn confidence_selection_fixture() {
        let max_p = [0.9, 0.5, 0.7, 0.3];
        assert_eq!(confidence_baseline_select(&max_p, 0.6, 0.5), vec![0, 2]);
        assert_eq!(confidence_baseline_select(&max_p, 0.6, 0.25), vec![0]);
        assert_eq!(confidence_baseline_select(&max_p, 0.6, 1.0), vec![0, 2]);
        assert_eq!(confidence_baseline_select(&max_p, 0.0, 1.0), vec![0, 1, 2, 3]);
        assert!(confidence_baseline_select(&max_p, 0.6, 0.0).is_empty());
    }

    fn blobs(expert: ExpertModel, n: usize, seed: u64) -> DataSplit {
        let spec = GaussianMixtureSpec::default_for(3).unwrap();
        let ds = generate_dataset(&spec, &expert, n, seed).unwrap();
        split_dataset(&ds, [0.6, 0.2, 0.2], seed).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig { epochs: 15, batch_size: 64, seed: 3, ..Default::default() }
    }

    #[test]
    fn confidence_baseline_limits() {
        let split = blobs(make_split_expert(3, 1, 0.9, 0.3).unwrap(), 600, 1);
        let cfg = TrainConfig { epochs: 3, ..quick() };
        let (p0, _) = confidence_baseline_train(&split, 0.5, 0.0, Architecture::Linear, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = ModelParams::random(Architecture::Linear, 2, 3, &mut rng);
        assert_eq!(p0, init);
        let (p1, r1) = confidence_baseline_train(&split, 0.0, 1.0, Architecture::Linear, &cfg).unwrap();
        let (p2, r2) = train(&split, Architecture::Linear, &Objective::Classifier, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn oracle_expert_with_full_deferral_is_perfect() {
        let split = blobs(ExpertModel::Oracle { num_classes: 3 }, 400, 2);
        let (p, _) = train(&split, Architecture::Linear, &Objective::Classifier, &quick()).unwrap();
        let m = Method::ScoreBaseline { temperature: 1.0 };
        let s = evaluate_system(&p, &split.test, &m, Some(1.0)).unwrap();
        assert_eq!(s.system_accuracy, 1.0);
        assert_eq!(s.coverage, 0.0);
    }

    #[test]
    fn summary_identities() {
        let insts = vec![
            Instance::new(vec![0.0], 0, 0),
            Instance::new(vec![0.0], 1, 0),
            Instance::new(vec![0.0], 1, 1),
            Instance::new(vec![0.0], 0, 1),
            Instance::new(vec![0.0], 1, 1),
        ];
        let ds = Dataset::new(insts, 2, 1).unwrap();
        let s = summarize(&ds, &[0, 0, 1, 1, 1], &[false, true, true, false, false]);
        assert_eq!(s.counts, EvalCounts { n: 5, n_deferred: 2, classifier_correct: 2, expert_correct: 1 });
        assert_eq!(s.coverage, 0.6);
        assert_eq!(s.system_accuracy, 0.6);
        assert!((s.classifier_accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.expert_accuracy, 0.5);
        let none = summarize(&ds, &[0; 5], &[false; 5]);
        assert_eq!(none.expert_accuracy, 0.0);
    }

    #[test]
    fn budget_sweep_contracts() {
        let split = blobs(make_split_expert(3, 2, 0.95, 0.1).unwrap(), 1500, 4);
        for s in [SurrogateKind::Softmax, SurrogateKind::OneVsAll] {
            let (p, _) = train(&split, Architecture::Linear, &Objective::defer(s), &quick()).unwrap();
            let m = Method::surrogate(s);
            let budgets = default_budgets();
            let rows = sweep_budget(&p, &split.test, &m, &budgets).unwrap();
            assert_eq!(rows.len(), 11);
            let n = split.test.len();
            for w in rows.windows(2) {
                assert!(w[0].summary.n_deferred <= w[1].summary.n_deferred);
            }
            for r in &rows {
                assert!(r.summary.n_deferred as usize <= floor_count(r.key, n));
                let serial = evaluate_system(&p, &split.test, &m, Some(r.key)).unwrap();
                assert_eq!(serial, r.summary);
                let c = r.summary.counts;
                assert_eq!(c.n as usize, n);
                let cov = r.summary.coverage;
                let mix = cov * r.summary.classifier_accuracy + (1.0 - cov) * r.summary.expert_accuracy;
                assert!((mix - r.summary.system_accuracy).abs() < 1e-12);
            }
            assert_eq!(rows[0].summary.n_deferred, 0);
            // b = 1 reproduces the native rejector.
            let scored = score_dataset(&p, &split.test, &m).unwrap();
            let mask = defer_with_budget_surrogate(&scored.scores, 1.0).unwrap();
            assert_eq!(mask, scored.native_defer);
            let native = evaluate_system(&p, &split.test, &m, None).unwrap();
            assert_eq!(native, rows[10].summary);
        }
    }

    #[test]
    fn method_output_mismatch_is_rejected() {
        let split = blobs(ExpertModel::Oracle { num_classes: 3 }, 100, 5);
        let p = ModelParams::zeros(Architecture::Linear, 2, 3);
        assert!(evaluate_system(&p, &split.test, &Method::surrogate(SurrogateKind::OneVsAll), None).is_err());
        assert!(evaluate_system(&p, &split.test, &Method::ScoreBaseline { temperature: 1.0 }, None).is_ok());
    }

    #[test]
    fn score_baseline_fits_a_temperature() {
        let split = blobs(make_split_expert(3, 1, 0.9, 0.3).unwrap(), 900, 6);
        let (_, _, t) = score_baseline_train(&split, Architecture::Linear, &quick()).unwrap();
        assert!(t > 0.0 && t.is_finite());
    }

    #[test]
    fn expertise_sweep_rows_and_determinism() {
        let sweep = ExpertiseSweep {
            spec: GaussianMixtureSpec::default_for(3).unwrap(),
            k_values: vec![0, 3],
            acc_head: 1.0,
            acc_tail: 0.7,
            n_train: 1500,
            n_validation: 300,
            n_test: 600,
            architecture: Architecture::Mlp1 { hidden: 16 },
            train: TrainConfig { epochs: 40, ..quick() },
            seed: 9,
        };
        let rows = sweep_expertise(&sweep).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].method, "softmax");
        assert_eq!(rows[1].method, "ova");
        // k = K with a perfect head: deferring is always optimal. The softmax
        // minimizer ties p_defer with the top class wherever the posterior is
        // one, so only its accuracy is held to the expert's.
        let (sm, ova) = (&rows[2].summary, &rows[3].summary);
        assert!(ova.coverage <= 0.1, "{ova:?}");
        assert!(sm.system_accuracy >= 0.98, "{sm:?}");
        assert_eq!(rows, sweep_expertise(&sweep).unwrap());
        let mut buf = Vec::new();
        write_sweep_csv(&rows, "k", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "k,method,system_accuracy,coverage,classifier_accuracy,expert_accuracy,n_deferred\n"
        ));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn trained_ova_beats_degenerate_policies() {
        let split = blobs(make_split_expert(3, 2, 0.95, 0.1).unwrap(), 4000, 8);
        let cfg = TrainConfig { epochs: 30, ..quick() };
        let arch = Architecture::Mlp1 { hidden: 16 };
        let (p, _) = train(&split, arch, &Objective::defer(SurrogateKind::OneVsAll), &cfg).unwrap();
        let m = Method::surrogate(SurrogateKind::OneVsAll);
        let system = evaluate_system(&p, &split.test, &m, None).unwrap().system_accuracy;
        let clf_only = evaluate_system(&p, &split.test, &m, Some(0.0)).unwrap().system_accuracy;
        let expert_only = split.test.expert_accuracy();
        assert!(system >= clf_only.max(expert_only) - 0.02, "{system} {clf_only} {expert_only}");
    }

    proptest! {
        #[test]
        fn masks_are_permutation_equivariant(
            scores in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40),
            b in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let n = scores.len();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            // Keys are made distinct so that index tie-breaking cannot differ.
            let scores: Vec<(f64, f64)> = scores.iter().enumerate()
                .map(|(i, (c, d))| (c + i as f64 * 1e-9, *d)).collect();
            let permuted: Vec<(f64, f64)> = perm.iter().map(|&i| scores[i]).collect();
            let conf: Vec<f64> = scores.iter().map(|s| s.0).collect();
            let pconf: Vec<f64> = permuted.iter().map(|s| s.0).collect();
            let checks = [
                (defer_with_budget_surrogate(&scores, b).unwrap(), defer_with_budget_surrogate(&permuted, b).unwrap()),
                (score_baseline_defer(&conf, b).unwrap(), score_baseline_defer(&pconf, b).unwrap()),
                (confidence_baseline_defer(&conf, 0.5, b).unwrap(), confidence_baseline_defer(&pconf, 0.5, b).unwrap()),
            ];
            for (orig, perm_mask) in checks {
                prop_assert!(orig.iter().filter(|d| **d).count() <= floor_count(b, n));
                let mut back = vec![false; n];
                for (pos, &i) in perm.iter().enumerate() {
                    back[i] = perm_mask[pos];
                }
                prop_assert_eq!(orig, back);
            }
        }
    }
}
