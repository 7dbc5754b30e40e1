//! Calibration diagnostics: binned ECE, pathology counts, risk
//! distributions, 1-D Wasserstein distance and temperature scaling.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::BinaryLoss;

pub const DEFAULT_BINS: usize = 15;

/// Confidence sums are kept in fixed point (units of 2^-64) so that adding
/// samples and merging shards is exact and order independent.
const FIXED_SCALE: f64 = 18446744073709551616.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReliabilityBins {
    counts: Vec<u64>,
    correct: Vec<u64>,
    conf_sums: Vec<u128>,
}

impl ReliabilityBins {
    pub fn new(bin_count: usize) -> Result<Self> {
        if bin_count == 0 {
            return Err(Error::Argument("bin count must be positive".into()));
        }
        Ok(Self {
            counts: vec![0; bin_count],
            correct: vec![0; bin_count],
            conf_sums: vec![0; bin_count],
        })
    }

    pub fn from_samples(confidences: &[f64], correct: &[bool], bin_count: usize) -> Result<Self> {
        if confidences.len() != correct.len() {
            return Err(Error::Argument(format!(
                "{} confidences but {} correctness flags",
                confidences.len(),
                correct.len()
            )));
        }
        let mut bins = Self::new(bin_count)?;
        for (&c, &ok) in confidences.iter().zip(correct) {
            bins.add(c, ok)?;
        }
        Ok(bins)
    }

    pub fn bin_count(&self) -> usize {
        self.counts.len()
    }

    /// `floor(c * B)`, with `c = 1` in the last bin.
    pub fn bin_index(&self, confidence: f64) -> usize {
        let b = self.bin_count();
        ((confidence * b as f64) as usize).min(b - 1)
    }

    pub fn add(&mut self, confidence: f64, correct: bool) -> Result<()> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Argument(format!(
                "confidence {confidence} outside [0, 1]; clamp before computing ECE"
            )));
        }
        let i = self.bin_index(confidence);
        self.counts[i] += 1;
        self.correct[i] += u64::from(correct);
        self.conf_sums[i] += (confidence * FIXED_SCALE) as u128;
        Ok(())
    }

    pub fn merge(&mut self, other: &ReliabilityBins) -> Result<()> {
        if other.bin_count() != self.bin_count() {
            return Err(Error::Argument("cannot merge bins of different sizes".into()));
        }
        for i in 0..self.bin_count() {
            self.counts[i] += other.counts[i];
            self.correct[i] += other.correct[i];
            self.conf_sums[i] += other.conf_sums[i];
        }
        Ok(())
    }

    pub fn n(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn conf_sum(&self, i: usize) -> f64 {
        self.conf_sums[i] as f64 / FIXED_SCALE
    }

    /// `sum_b (n_b / n) |acc_b - conf_b|` over non-empty bins.
    pub fn ece(&self) -> Result<f64> {
        let n = self.n();
        if n == 0 {
            return Err(Error::NoSamples);
        }
        let gap: f64 = (0..self.bin_count())
            .filter(|&i| self.counts[i] > 0)
            .map(|i| (self.correct[i] as f64 - self.conf_sum(i)).abs())
            .sum();
        Ok(gap / n as f64)
    }

    pub fn summaries(&self) -> Vec<BinSummary> {
        let b = self.bin_count() as f64;
        (0..self.bin_count())
            .map(|i| {
                let count = self.counts[i];
                let (mean_conf, accuracy) = if count == 0 {
                    (None, None)
                } else {
                    (
                        Some(self.conf_sum(i) / count as f64),
                        Some(self.correct[i] as f64 / count as f64),
                    )
                };
                BinSummary {
                    lo: i as f64 / b,
                    hi: (i + 1) as f64 / b,
                    count,
                    mean_conf,
                    accuracy,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    /// `None` for empty bins.
    pub mean_conf: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub bins: Vec<BinSummary>,
    /// Share of raw confidences above 1 before clamping.
    pub pathology_fraction: f64,
    pub n: u64,
    pub bin_count: usize,
}

impl CalibrationReport {
    pub fn from_bins(bins: &ReliabilityBins, pathology_fraction: f64) -> Result<Self> {
        Ok(Self {
            ece: bins.ece()?,
            bins: bins.summaries(),
            pathology_fraction,
            n: bins.n(),
            bin_count: bins.bin_count(),
        })
    }

    pub fn with_pathology_fraction(mut self, fraction: f64) -> Self {
        self.pathology_fraction = fraction;
        self
    }
}

pub fn compute_ece(
    confidences: &[f64],
    correct: &[bool],
    bin_count: usize,
) -> Result<CalibrationReport> {
    if confidences.is_empty() {
        return Err(Error::NoSamples);
    }
    let bins = ReliabilityBins::from_samples(confidences, correct, bin_count)?;
    CalibrationReport::from_bins(&bins, 0.0)
}

/// Equal-width histogram starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Bins `[i w, (i+1) w)` covering every value; values must be non-negative.
    pub fn build(values: &[f64], width: f64) -> Result<Self> {
        if !(width.is_finite() && width > 0.0) {
            return Err(Error::Argument(format!("bin width must be positive, got {width}")));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Argument(format!("histogram value {v} is negative or non-finite")));
        }
        let max = values.iter().copied().fold(0.0, f64::max);
        let mut counts = vec![0u64; (max / width) as usize + 1];
        for v in values {
            let i = ((v / width) as usize).min(counts.len() - 1);
            counts[i] += 1;
        }
        Ok(Self { width, counts })
    }

    /// Fixed bins over `[0, 1]`, with 1 in the last bin.
    pub fn unit(values: &[f64], bin_count: usize) -> Result<Self> {
        if bin_count == 0 {
            return Err(Error::Argument("bin count must be positive".into()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("value {v} outside [0, 1]")));
        }
        let mut counts = vec![0u64; bin_count];
        for v in values {
            counts[((v * bin_count as f64) as usize).min(bin_count - 1)] += 1;
        }
        Ok(Self {
            width: 1.0 / bin_count as f64,
            counts,
        })
    }

    /// CSV with header `bin_lo,bin_hi,count`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "bin_lo,bin_hi,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            let lo = i as f64 * self.width;
            writeln!(out, "{},{},{}", lo, lo + self.width, c)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathologyStats {
    pub fraction_gt_one: f64,
    pub histogram: Histogram,
}

/// Share of raw estimates strictly above 1, plus their histogram.
pub fn pathology_stats(raw_confidences: &[f64], bin_width: f64) -> Result<PathologyStats> {
    if raw_confidences.is_empty() {
        return Err(Error::NoSamples);
    }
    let histogram = Histogram::build(raw_confidences, bin_width)?;
    let above = raw_confidences.iter().filter(|&&c| c > 1.0).count();
    Ok(PathologyStats {
        fraction_gt_one: above as f64 / raw_confidences.len() as f64,
        histogram,
    })
}

/// Predicted risks `1 - c`.
pub fn error_distribution(confidences: &[f64]) -> Result<Vec<f64>> {
    confidences
        .iter()
        .map(|&c| {
            if (0.0..=1.0).contains(&c) {
                Ok(1.0 - c)
            } else {
                Err(Error::Argument(format!("confidence {c} outside [0, 1]")))
            }
        })
        .collect()
}

/// W1 distance between two empirical distributions, as the integral of the
/// absolute difference of their CDFs.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::NoSamples);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = a.iter().chain(&b).copied().collect();
    all.sort_by(f64::total_cmp);

    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut total = 0.0;
    for w in all.windows(2) {
        let x = w[0];
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        total += (i as f64 / na - j as f64 / nb).abs() * (w[1] - x);
    }
    Ok(total)
}

/// Mean logistic NLL of `sigmoid(logit / T)` against correctness.
pub fn binary_nll(logits: &[f64], correct: &[bool], temperature: f64) -> f64 {
    let phi = BinaryLoss::Logistic;
    let total: f64 = logits
        .iter()
        .zip(correct)
        .map(|(&g, &ok)| {
            let t = if ok { 1.0 } else { -1.0 };
            phi.evaluate(t * g / temperature)
        })
        .sum();
    total / logits.len() as f64
}

/// Mean cross-entropy of `softmax(logits / T)` against labels.
pub fn multiclass_nll(logits: &[Vec<f64>], labels: &[usize], temperature: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = z
                .iter()
                .map(|v| ((v - max) / temperature).exp())
                .sum::<f64>()
                .ln();
            lse - (z[y] - max) / temperature
        })
        .sum();
    total / logits.len() as f64
}

const LOG_T_RANGE: (f64, f64) = (-4.0, 4.0);
const LOG_T_TOL: f64 = 1e-6;

/// Golden-section search for the minimizer of `f` over `[lo, hi]`.
fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Picks the search result unless `T = 1` is at least as good.
fn best_temperature(nll: impl Fn(f64) -> f64) -> f64 {
    let log_t = golden_section(|u| nll(u.exp()), LOG_T_RANGE.0, LOG_T_RANGE.1, LOG_T_TOL);
    let t = log_t.exp();
    if nll(t) <= nll(1.0) {
        t
    } else {
        1.0
    }
}

/// Temperature for a scalar rejector logit, fitted on correctness labels.
pub fn fit_temperature(defer_logits: &[f64], correct: &[bool]) -> Result<f64> {
    if defer_logits.len() != correct.len() {
        return Err(Error::Argument("logits and labels differ in length".into()));
    }
    if defer_logits.iter().any(|g| !g.is_finite()) {
        return Err(Error::Argument("non-finite logit".into()));
    }
    let positives = correct.iter().filter(|&&c| c).count();
    if positives == 0 || positives == correct.len() {
        return Err(Error::Fit(
            "temperature needs both correct and incorrect examples".into(),
        ));
    }
    // Sorting fixes the summation order, so the fit ignores input order.
    let mut pairs: Vec<(f64, bool)> = defer_logits.iter().copied().zip(correct.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (g, c): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
    Ok(best_temperature(|t| binary_nll(&g, &c, t)))
}

/// Temperature for a plain softmax classifier, fitted on class labels.
pub fn fit_temperature_multiclass(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::NoSamples);
    }
    if logits.len() != labels.len() {
        return Err(Error::Argument("logits and labels differ in length".into()));
    }
    if logits
        .iter()
        .zip(labels)
        .any(|(z, &y)| y >= z.len() || z.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Argument("label out of range or non-finite logit".into()));
    }
    let mut pairs: Vec<(&Vec<f64>, usize)> = logits.iter().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| {
        a.0.iter()
            .zip(b.0.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    let z: Vec<Vec<f64>> = pairs.iter().map(|p| p.0.clone()).collect();
    let y: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    Ok(best_temperature(|t| multiclass_nll(&z, &y, t)))
}
