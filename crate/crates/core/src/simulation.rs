//! Simulated experts, Gaussian-mixture data with exact posteriors, and the
//! Bayes-optimal classifier/rejector pair.

use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{split_dataset, DataSplit, Dataset, Instance};
use crate::error::{Error, Result};
use crate::estimators::argmax;

/// Class-conditional expert: correct on class `y` with probability `a_y`,
/// otherwise uniform over the remaining classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpertModel {
    PerClassAccuracy { accuracies: Vec<f64> },
    Oracle { num_classes: usize },
    UniformRandom { num_classes: usize },
}

impl ExpertModel {
    pub fn per_class(accuracies: Vec<f64>) -> Result<Self> {
        let e = ExpertModel::PerClassAccuracy { accuracies };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes() < 2 {
            return Err(Error::Config("expert needs at least 2 classes".into()));
        }
        if let ExpertModel::PerClassAccuracy { accuracies } = self {
            if let Some(a) = accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                return Err(Error::Config(format!("expert accuracy {a} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ExpertModel::PerClassAccuracy { accuracies } => accuracies.len(),
            ExpertModel::Oracle { num_classes } | ExpertModel::UniformRandom { num_classes } => {
                *num_classes
            }
        }
    }

    pub fn accuracy(&self, y: usize) -> f64 {
        match self {
            ExpertModel::PerClassAccuracy { accuracies } => accuracies[y],
            ExpertModel::Oracle { .. } => 1.0,
            ExpertModel::UniformRandom { num_classes } => 1.0 / *num_classes as f64,
        }
    }

    pub fn accuracies(&self) -> Vec<f64> {
        (0..self.num_classes()).map(|y| self.accuracy(y)).collect()
    }
}

/// `a_y = acc_head` for `y < k`, `acc_tail` otherwise.
pub fn make_split_expert(
    num_classes: usize,
    k: usize,
    acc_head: f64,
    acc_tail: f64,
) -> Result<ExpertModel> {
    if k > num_classes {
        return Err(Error::Config(format!(
            "split boundary {k} exceeds class count {num_classes}"
        )));
    }
    ExpertModel::per_class(
        (0..num_classes)
            .map(|y| if y < k { acc_head } else { acc_tail })
            .collect(),
    )
}

pub fn sample_expert<R: Rng>(expert: &ExpertModel, y: usize, rng: &mut R) -> usize {
    let k = expert.num_classes();
    assert!(y < k, "label {y} out of range for {k} classes");
    if rng.gen::<f64>() < expert.accuracy(y) {
        return y;
    }
    let other = rng.gen_range(0..k - 1);
    if other >= y {
        other + 1
    } else {
        other
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
    pub priors: Vec<f64>,
}

impl GaussianMixtureSpec {
    pub fn new(means: Vec<Vec<f64>>, sigma: f64, priors: Vec<f64>) -> Result<Self> {
        let spec = Self { means, sigma, priors };
        spec.validate()?;
        Ok(spec)
    }

    /// `K` means equally spaced on a circle in the plane, uniform priors.
    pub fn circle(num_classes: usize, radius: f64, sigma: f64) -> Result<Self> {
        let means = (0..num_classes)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / num_classes as f64;
                vec![radius * t.cos(), radius * t.sin()]
            })
            .collect();
        Self::new(means, sigma, vec![1.0 / num_classes as f64; num_classes])
    }

    /// Radius 2, unit noise.
    pub fn default_for(num_classes: usize) -> Result<Self> {
        Self::circle(num_classes, 2.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.means.len();
        if k < 2 {
            return Err(Error::Config("mixture needs at least 2 classes".into()));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::Config("means must share a positive dimension".into()));
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("means must be finite".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.priors.len() != k || self.priors.iter().any(|p| p.is_nan() || *p < 0.0) {
            return Err(Error::Config("priors must be K non-negative values".into()));
        }
        let total: f64 = self.priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("priors sum to {total}, expected 1")));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }
}

pub fn generate_dataset(
    spec: &GaussianMixtureSpec,
    expert: &ExpertModel,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    expert.validate()?;
    if expert.num_classes() != spec.num_classes() {
        return Err(Error::Config(format!(
            "expert has {} classes, mixture has {}",
            expert.num_classes(),
            spec.num_classes()
        )));
    }
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = WeightedIndex::new(&spec.priors)
        .map_err(|e| Error::Config(format!("priors: {e}")))?;
    let instances = (0..n)
        .map(|_| {
            let y = classes.sample(&mut rng);
            let features = spec.means[y]
                .iter()
                .map(|mu| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mu + spec.sigma * z
                })
                .collect();
            let m = sample_expert(expert, y, &mut rng);
            Instance::new(features, y, m)
        })
        .collect();
    Dataset::new(instances, spec.num_classes(), spec.dim())
}

/// Shuffles labels across rows and re-simulates the expert against the new
/// labels, keeping features fixed.
pub fn randomize_labels(dataset: &Dataset, expert: &ExpertModel, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = dataset.instances().iter().map(|i| i.label).collect();
    labels.shuffle(&mut rng);
    let instances = dataset
        .instances()
        .iter()
        .zip(labels)
        .map(|(inst, y)| {
            let m = sample_expert(expert, y, &mut rng);
            Instance::new(inst.features.clone(), y, m)
        })
        .collect();
    Dataset::new(instances, dataset.num_classes(), dataset.dim())
}

/// Replaces expert predictions with fresh draws from `expert`, keeping
/// features and labels.
pub fn resimulate_expert(dataset: &Dataset, expert: &ExpertModel, seed: u64) -> Result<Dataset> {
    expert.validate()?;
    if expert.num_classes() != dataset.num_classes() {
        return Err(Error::Config("expert and dataset disagree on K".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = dataset
        .instances()
        .iter()
        .map(|inst| {
            let m = sample_expert(expert, inst.label, &mut rng);
            Instance::new(inst.features.clone(), inst.label, m)
        })
        .collect();
    Dataset::new(instances, dataset.num_classes(), dataset.dim())
}

/// Constant features, uniform labels and an always-correct expert.
/// Rows are split 80/10/10.
pub fn make_worked_example_dataset(num_classes: usize, n: usize, seed: u64) -> Result<DataSplit> {
    if num_classes < 2 {
        return Err(Error::Config("worked example needs K >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = (0..n)
        .map(|_| {
            let y = rng.gen_range(0..num_classes);
            Instance::new(vec![1.0], y, y)
        })
        .collect();
    let ds = Dataset::new(instances, num_classes, 1)?;
    split_dataset(&ds, [0.8, 0.1, 0.1], seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesOracle {
    pub spec: GaussianMixtureSpec,
    pub expert: ExpertModel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesDecision {
    pub class: usize,
    pub defer: bool,
    pub p_expert_correct: f64,
}

impl BayesOracle {
    pub fn new(spec: GaussianMixtureSpec, expert: ExpertModel) -> Result<Self> {
        spec.validate()?;
        expert.validate()?;
        if spec.num_classes() != expert.num_classes() {
            return Err(Error::Config("expert and mixture disagree on K".into()));
        }
        Ok(Self { spec, expert })
    }

    /// Exact class posterior, via log-sum-exp.
    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        let inv = 1.0 / (2.0 * self.spec.sigma * self.spec.sigma);
        let logs: Vec<f64> = self
            .spec
            .means
            .iter()
            .zip(&self.spec.priors)
            .map(|(mu, p)| {
                let sq: f64 = mu.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                p.ln() - sq * inv
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// `P(m = y | x) = sum_y eta_y(x) a_y`.
    pub fn p_expert_correct(&self, eta: &[f64]) -> f64 {
        eta.iter()
            .enumerate()
            .map(|(y, e)| e * self.expert.accuracy(y))
            .sum()
    }

    pub fn decision(&self, x: &[f64]) -> BayesDecision {
        let eta = self.posterior(x);
        let pm = self.p_expert_correct(&eta);
        let class = argmax(&eta);
        BayesDecision {
            class,
            defer: pm >= eta[class],
            p_expert_correct: pm,
        }
    }

    /// Probability that the Bayes-optimal system is correct at `x`.
    pub fn system_accuracy(&self, x: &[f64]) -> f64 {
        let eta = self.posterior(x);
        let best = eta.iter().copied().fold(0.0, f64::max);
        best.max(self.p_expert_correct(&eta))
    }

    /// CSV of `(x0, x1, eta_0..eta_{K-1}, p_expert, h, r)` on a square grid.
    /// Only defined for two-dimensional mixtures.
    pub fn write_grid<W: Write>(&self, lo: f64, hi: f64, steps: usize, out: &mut W) -> Result<()> {
        if self.spec.dim() != 2 {
            return Err(Error::Argument("grid dump needs a 2-D mixture".into()));
        }
        let io = |e| Error::io("<grid>", e);
        let mut header = vec!["x0".to_string(), "x1".to_string()];
        header.extend((0..self.spec.num_classes()).map(|k| format!("eta_{k}")));
        header.extend(["p_expert", "h", "r"].map(String::from));
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        for p in grid_points(lo, hi, steps) {
            let eta = self.posterior(&p);
            let d = self.decision(&p);
            let mut row: Vec<String> = p.iter().chain(&eta).map(f64::to_string).collect();
            row.push(d.p_expert_correct.to_string());
            row.push(d.class.to_string());
            row.push(u8::from(d.defer).to_string());
            writeln!(out, "{}", row.join(",")).map_err(io)?;
        }
        Ok(())
    }
}

pub fn bayes_posterior(oracle: &BayesOracle, x: &[f64]) -> Vec<f64> {
    oracle.posterior(x)
}

pub fn bayes_decision(oracle: &BayesOracle, x: &[f64]) -> BayesDecision {
    oracle.decision(x)
}

/// `steps x steps` grid of cell centres over `[lo, hi]^2`, row-major.
pub fn grid_points(lo: f64, hi: f64, steps: usize) -> Vec<Vec<f64>> {
    let h = (hi - lo) / steps as f64;
    let coord = |i: usize| lo + (i as f64 + 0.5) * h;
    (0..steps)
        .flat_map(|i| (0..steps).map(move |j| vec![coord(i), coord(j)]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn within_binomial(hits: usize, n: usize, p: f64) -> bool {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        (hits as f64 - n as f64 * p).abs() <= 3.0 * sd + 1e-9
    }

    #[test]
    fn oracle_expert_is_always_right() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = ExpertModel::Oracle { num_classes: 4 };
        for y in 0..4 {
            for _ in 0..100 {
                assert_eq!(sample_expert(&e, y, &mut rng), y);
            }
        }
    }

    #[test]
    fn zero_accuracy_binary_expert_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = ExpertModel::per_class(vec![0.0, 0.0]).unwrap();
        for y in 0..2 {
            for _ in 0..100 {
                assert_eq!(sample_expert(&e, y, &mut rng), 1 - y);
            }
        }
    }

    #[test]
    fn expert_accuracy_within_binomial_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e = make_split_expert(4, 2, 0.75, 0.2).unwrap();
        let n = 100_000;
        for y in 0..4 {
            let mut hits = 0;
            let mut wrong = [0usize; 4];
            for _ in 0..n {
                let m = sample_expert(&e, y, &mut rng);
                if m == y {
                    hits += 1;
                } else {
                    wrong[m] += 1;
                }
            }
            assert!(within_binomial(hits, n, e.accuracy(y)), "class {y}: {hits}");
            // Errors spread uniformly over the other three classes.
            let errs = n - hits;
            for (c, w) in wrong.iter().enumerate().filter(|(c, _)| *c != y) {
                assert!(within_binomial(*w, errs, 1.0 / 3.0), "class {y} -> {c}");
            }
        }
    }

    #[test]
    fn split_expert_examples() {
        let e = make_split_expert(10, 5, 0.75, 0.20).unwrap();
        assert_eq!(e.accuracies()[..5], [0.75; 5]);
        assert_eq!(e.accuracies()[5..], [0.20; 5]);
        let e = make_split_expert(10, 7, 1.0, 0.1).unwrap();
        assert_eq!(e.accuracies()[6], 1.0);
        assert_eq!(e.accuracies()[7], 0.1);
        let e = make_split_expert(3, 0, 0.9, 0.4).unwrap();
        assert_eq!(e.accuracies(), vec![0.4; 3]);
        assert!(make_split_expert(3, 4, 0.9, 0.4).is_err());
        assert!(make_split_expert(3, 1, 1.5, 0.4).is_err());
        assert_eq!(ExpertModel::UniformRandom { num_classes: 4 }.accuracy(2), 0.25);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = GaussianMixtureSpec::default_for(3).unwrap();
        let e = ExpertModel::Oracle { num_classes: 3 };
        let a = generate_dataset(&spec, &e, 500, 3).unwrap();
        let b = generate_dataset(&spec, &e, 500, 3).unwrap();
        let c = generate_dataset(&spec, &e, 500, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(generate_dataset(&spec, &e, 0, 3).is_err());
    }

    #[test]
    fn tiny_sigma_collapses_to_means() {
        let spec = GaussianMixtureSpec::circle(3, 2.0, 1e-9).unwrap();
        let e = ExpertModel::Oracle { num_classes: 3 };
        let ds = generate_dataset(&spec, &e, 300, 1).unwrap();
        for inst in ds.instances() {
            for (x, mu) in inst.features.iter().zip(&spec.means[inst.label]) {
                assert!((x - mu).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn class_frequencies_match_priors() {
        let spec = GaussianMixtureSpec::new(
            vec![vec![0.0], vec![1.0], vec![2.0]],
            1.0,
            vec![0.5, 0.3, 0.2],
        )
        .unwrap();
        let e = ExpertModel::Oracle { num_classes: 3 };
        let n = 50_000;
        let ds = generate_dataset(&spec, &e, n, 9).unwrap();
        for y in 0..3 {
            let c = ds.instances().iter().filter(|i| i.label == y).count();
            assert!(within_binomial(c, n, spec.priors[y]));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(GaussianMixtureSpec::circle(3, 2.0, 0.0).is_err());
        assert!(GaussianMixtureSpec::new(vec![vec![0.0], vec![1.0]], 1.0, vec![0.7, 0.7]).is_err());
        assert!(GaussianMixtureSpec::new(vec![vec![0.0], vec![1.0, 2.0]], 1.0, vec![0.5, 0.5]).is_err());
    }

    fn two_class(sep: f64) -> BayesOracle {
        let spec = GaussianMixtureSpec::new(
            vec![vec![-sep / 2.0, 0.0], vec![sep / 2.0, 0.0]],
            1.0,
            vec![0.5, 0.5],
        )
        .unwrap();
        BayesOracle::new(spec, ExpertModel::per_class(vec![1.0, 0.0]).unwrap()).unwrap()
    }

    #[test]
    fn posterior_symmetry_and_separation() {
        let o = two_class(6.0);
        let mid = o.posterior(&[0.0, 0.0]);
        assert!((mid[0] - 0.5).abs() < 1e-15 && (mid[1] - 0.5).abs() < 1e-15);
        let at_mean = o.posterior(&[-3.0, 0.0]);
        // Closed form: 1 / (1 + exp(-sep^2 / 2)) with sep = 6.
        let expected = 1.0 / (1.0 + (-18.0f64).exp());
        assert!((at_mean[0] - expected).abs() < 1e-12);
        assert!(at_mean[0] > 0.99);
    }

    #[test]
    fn posterior_stays_normalized_far_away() {
        let o = BayesOracle::new(
            GaussianMixtureSpec::default_for(5).unwrap(),
            ExpertModel::Oracle { num_classes: 5 },
        )
        .unwrap();
        for x in [[1e3, -1e3], [0.0, 0.0], [-50.0, 7.0]] {
            let p = o.posterior(&x);
            assert!(p.iter().all(|v| v.is_finite()));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn decision_extremes() {
        let spec = GaussianMixtureSpec::default_for(3).unwrap();
        let oracle = BayesOracle::new(spec.clone(), ExpertModel::Oracle { num_classes: 3 }).unwrap();
        let random = BayesOracle::new(spec, ExpertModel::UniformRandom { num_classes: 3 }).unwrap();
        for x in grid_points(-4.0, 4.0, 20) {
            assert!(bayes_decision(&oracle, &x).defer);
            let eta = bayes_posterior(&random, &x);
            if eta.iter().copied().fold(0.0, f64::max) > 1.0 / 3.0 + 1e-12 {
                assert!(!bayes_decision(&random, &x).defer);
            }
        }
    }

    #[test]
    fn binary_boundary_reduction() {
        // With a = (1, 0), P(m=y|x) = eta_0, so r* holds iff eta_0 >= 1/2,
        // which for these means is x0 <= 0.
        let o = two_class(2.0);
        for x0 in [-2.0, -0.3, -1e-9, 0.0, 1e-6, 0.4, 3.0] {
            let d = o.decision(&[x0, 0.5]);
            let eta0 = o.posterior(&[x0, 0.5])[0];
            assert_eq!(d.defer, eta0 >= 0.5, "x0 = {x0}");
            assert_eq!(d.defer, x0 <= 0.0, "x0 = {x0}");
        }
    }

    #[test]
    fn worked_example_regime() {
        let split = make_worked_example_dataset(2, 4000, 5).unwrap();
        let all: Vec<&Instance> = [&split.train, &split.validation, &split.test]
            .iter()
            .flat_map(|d| d.instances())
            .collect();
        assert_eq!(all.len(), 4000);
        assert!(all.iter().all(|i| i.expert_pred == i.label && i.features == [1.0]));
        let zeros = all.iter().filter(|i| i.label == 0).count();
        assert!(within_binomial(zeros, 4000, 0.5));
        assert!(make_worked_example_dataset(1, 10, 0).is_err());
    }

    #[test]
    fn worked_example_bayes_softmax_vector() {
        // At the population minimizer, s_k = eta_k / (1 + P(m=y)) and
        // s_defer = P(m=y) / (1 + P(m=y)). With eta uniform and an oracle
        // expert this gives 1/(2K) per class and 1/2 for deferral.
        use crate::data::LogitVector;
        use crate::losses::softmax;
        for k in 2..6 {
            let g = LogitVector::new(vec![0.0; k], (k as f64).ln()).unwrap();
            let s = softmax(&g);
            for v in &s[..k] {
                assert!((v - 1.0 / (2.0 * k as f64)).abs() < 1e-15);
            }
            assert!((s[k] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn randomized_labels_keep_features_and_resimulate_expert() {
        let spec = GaussianMixtureSpec::default_for(3).unwrap();
        let oracle = ExpertModel::Oracle { num_classes: 3 };
        let ds = generate_dataset(&spec, &oracle, 400, 2).unwrap();
        let r = randomize_labels(&ds, &oracle, 8).unwrap();
        let mut a: Vec<usize> = ds.instances().iter().map(|i| i.label).collect();
        let mut b: Vec<usize> = r.instances().iter().map(|i| i.label).collect();
        assert_ne!(a, b);
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        for (x, y) in ds.instances().iter().zip(r.instances()) {
            assert_eq!(x.features, y.features);
            assert_eq!(y.expert_pred, y.label);
        }
    }

    #[test]
    fn grid_dump_has_header_and_rows() {
        let o = two_class(2.0);
        let mut buf = Vec::new();
        o.write_grid(-1.0, 1.0, 3, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x0,x1,eta_0,eta_1,p_expert,h,r");
        assert_eq!(lines.len(), 10);
    }

    #[test]
    fn empirical_posterior_tracks_oracle() {
        // Histogram estimate of P(y=0 | x0 in cell) on a 1-D two-class mixture.
        let spec = GaussianMixtureSpec::new(vec![vec![-1.0], vec![1.0]], 1.0, vec![0.5, 0.5]).unwrap();
        let o = BayesOracle::new(spec.clone(), ExpertModel::Oracle { num_classes: 2 }).unwrap();
        let ds = generate_dataset(&spec, &o.expert, 200_000, 13).unwrap();
        for cell in [-1.5f64, -0.5, 0.0, 0.5, 1.5] {
            let (lo, hi) = (cell - 0.05, cell + 0.05);
            let hits: Vec<_> = ds
                .instances()
                .iter()
                .filter(|i| (lo..hi).contains(&i.features[0]))
                .collect();
            let zeros = hits.iter().filter(|i| i.label == 0).count();
            let p = o.posterior(&[cell])[0];
            // The cell has width 0.1, so allow for posterior variation inside it.
            let slack = 0.05 * hits.len() as f64;
            let sd = (hits.len() as f64 * p * (1.0 - p)).sqrt();
            assert!((zeros as f64 - hits.len() as f64 * p).abs() <= 3.0 * sd + slack);
        }
    }

    proptest! {
        #[test]
        fn expert_correctness_within_accuracy_range(
            acc in prop::collection::vec(0.0f64..=1.0, 3),
            x0 in -5.0f64..5.0, x1 in -5.0f64..5.0,
        ) {
            let o = BayesOracle::new(
                GaussianMixtureSpec::default_for(3).unwrap(),
                ExpertModel::per_class(acc.clone()).unwrap(),
            ).unwrap();
            let pm = o.decision(&[x0, x1]).p_expert_correct;
            let lo = acc.iter().copied().fold(1.0, f64::min);
            let hi = acc.iter().copied().fold(0.0, f64::max);
            prop_assert!(pm >= lo - 1e-12 && pm <= hi + 1e-12);
        }

        #[test]
        fn decision_equivariant_under_relabeling(
            acc in prop::collection::vec(0.0f64..=1.0, 3),
            x0 in -4.0f64..4.0, x1 in -4.0f64..4.0,
            perm_idx in 0usize..6,
        ) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let perm = perms[perm_idx];
            let spec = GaussianMixtureSpec::default_for(3).unwrap();
            let base = BayesOracle::new(spec.clone(), ExpertModel::per_class(acc.clone()).unwrap()).unwrap();
            // New class perm[y] takes the mean and accuracy of old class y.
            let mut means = spec.means.clone();
            let mut acc2 = acc.clone();
            for y in 0..3 {
                means[perm[y]] = spec.means[y].clone();
                acc2[perm[y]] = acc[y];
            }
            let relabeled = BayesOracle::new(
                GaussianMixtureSpec::new(means, 1.0, spec.priors.clone()).unwrap(),
                ExpertModel::per_class(acc2).unwrap(),
            ).unwrap();
            let x = [x0, x1];
            let (e1, e2) = (base.posterior(&x), relabeled.posterior(&x));
            for y in 0..3 {
                prop_assert!((e1[y] - e2[perm[y]]).abs() < 1e-12);
            }
            let (d1, d2) = (base.decision(&x), relabeled.decision(&x));
            prop_assert!((d1.p_expert_correct - d2.p_expert_correct).abs() < 1e-12);
            // Compare away from exact ties where rounding could flip the decision.
            let top = e1.iter().copied().fold(0.0, f64::max);
            if (d1.p_expert_correct - top).abs() > 1e-9 {
                prop_assert_eq!(d1.defer, d2.defer);
            }
        }
    }
}
