//! Small dense models trained by minibatch SGD with manual backpropagation.
//!
//! A model maps a feature vector to `K+1` outputs (class scores plus the
//! deferral score) for the deferral surrogates, or to `K` outputs for a plain
//! classifier. Training is single-threaded and bit-for-bit reproducible for
//! a fixed seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataSplit, Dataset, LogitVector};
use crate::error::{Error, Result};
use crate::estimators::{argmax, decide, SurrogateKind};
use crate::losses::{
    ova_l2d_grad, ova_l2d_loss, softmax_l2d_grad, softmax_l2d_loss, AlphaWeight, BinaryLoss,
};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp1 { hidden: usize },
}

/// Fully connected layer, weights row-major `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases.
    fn random<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.in_dim).zip(&self.bias) {
            let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            out.push(dot + b);
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.in_dim..(r + 1) * self.in_dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<Dense>,
}

impl ModelParams {
    pub fn zeros(architecture: Architecture, input_dim: usize, output_dim: usize) -> Self {
        let layers = match architecture {
            Architecture::Linear => vec![Dense::zeros(input_dim, output_dim)],
            Architecture::Mlp1 { hidden } => vec![
                Dense::zeros(input_dim, hidden),
                Dense::zeros(hidden, output_dim),
            ],
        };
        Self {
            architecture,
            input_dim,
            output_dim,
            layers,
        }
    }

    pub fn random<R: Rng>(
        architecture: Architecture,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        let layers = match architecture {
            Architecture::Linear => vec![Dense::random(input_dim, output_dim, rng)],
            Architecture::Mlp1 { hidden } => vec![
                Dense::random(input_dim, hidden, rng),
                Dense::random(hidden, output_dim, rng),
            ],
        };
        Self {
            architecture,
            input_dim,
            output_dim,
            layers,
        }
    }

    /// Checks layer shapes against the architecture descriptor.
    pub fn validate(&self) -> Result<()> {
        let expected = ModelParams::zeros(self.architecture, self.input_dim, self.output_dim);
        let shapes_ok = expected.layers.len() == self.layers.len()
            && expected.layers.iter().zip(&self.layers).all(|(e, l)| {
                e.in_dim == l.in_dim
                    && e.out_dim == l.out_dim
                    && l.weights.len() == l.in_dim * l.out_dim
                    && l.bias.len() == l.out_dim
            });
        if !shapes_ok {
            return Err(Error::Argument(
                "parameter arrays do not match the architecture".into(),
            ));
        }
        if !self.is_finite() {
            return Err(Error::Argument("non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// All parameters in layer order (weights then bias per layer).
    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
    }

    fn scale(&mut self, c: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Raw outputs for one input.
    pub fn outputs(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Argument(format!(
                "expected {} features, got {}",
                self.input_dim,
                x.len()
            )));
        }
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache);
        Ok(cache.output)
    }

    fn forward_cached(&self, x: &[f64], cache: &mut ForwardCache) {
        match self.layers.as_slice() {
            [only] => only.apply(x, &mut cache.output),
            [first, second] => {
                first.apply(x, &mut cache.hidden_pre);
                cache.hidden.clear();
                cache
                    .hidden
                    .extend(cache.hidden_pre.iter().map(|v| v.max(0.0)));
                second.apply(&cache.hidden, &mut cache.output);
            }
            _ => unreachable!("architecture has one or two layers"),
        }
    }

    /// Adds `d loss / d params` for one input into `grad`, given the loss
    /// gradient with respect to the outputs.
    fn backprop(&self, x: &[f64], cache: &ForwardCache, d_out: &[f64], grad: &mut ModelParams) {
        match (self.layers.as_slice(), grad.layers.as_mut_slice()) {
            ([_], [g]) => accumulate_outer(g, d_out, x),
            ([_, second], [g1, g2]) => {
                accumulate_outer(g2, d_out, &cache.hidden);
                let mut d_hidden = vec![0.0; second.in_dim];
                for (r, &d) in d_out.iter().enumerate() {
                    for (dh, w) in d_hidden.iter_mut().zip(second.row(r)) {
                        *dh += d * w;
                    }
                }
                // Rectifier derivative taken as 0 at 0.
                for (dh, &pre) in d_hidden.iter_mut().zip(&cache.hidden_pre) {
                    if pre <= 0.0 {
                        *dh = 0.0;
                    }
                }
                accumulate_outer(g1, &d_hidden, x);
            }
            _ => unreachable!("gradient shape matches parameters"),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CheckpointRef {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: self,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: CheckpointOwned = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Argument(format!(
                "unsupported checkpoint format version {}",
                ck.format_version
            )));
        }
        ck.model.validate()?;
        Ok(ck.model)
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format_version: u32,
    model: &'a ModelParams,
}

#[derive(Deserialize)]
struct CheckpointOwned {
    format_version: u32,
    model: ModelParams,
}

fn accumulate_outer(g: &mut Dense, d_out: &[f64], input: &[f64]) {
    for (r, &d) in d_out.iter().enumerate() {
        g.bias[r] += d;
        if d != 0.0 {
            let row = &mut g.weights[r * g.in_dim..(r + 1) * g.in_dim];
            for (w, v) in row.iter_mut().zip(input) {
                *w += d * v;
            }
        }
    }
}

#[derive(Debug, Default)]
struct ForwardCache {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    output: Vec<f64>,
}

/// Logit vector for one input; the model must have `K+1` outputs.
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<LogitVector> {
    LogitVector::from_outputs(&params.outputs(x)?)
}

/// What the model is trained to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// A deferral surrogate over `K+1` outputs.
    Defer {
        surrogate: SurrogateKind,
        phi: BinaryLoss,
        alpha: AlphaWeight,
    },
    /// Plain softmax cross-entropy over `K` outputs.
    Classifier,
}

impl Objective {
    pub fn defer(surrogate: SurrogateKind) -> Self {
        Objective::Defer {
            surrogate,
            phi: BinaryLoss::Logistic,
            alpha: AlphaWeight::default(),
        }
    }

    pub fn output_dim(&self, num_classes: usize) -> usize {
        match self {
            Objective::Defer { .. } => num_classes + 1,
            Objective::Classifier => num_classes,
        }
    }

    /// Loss and its gradient with respect to the raw outputs.
    pub fn loss_and_grad(&self, outputs: &[f64], y: usize, m: usize) -> (f64, Vec<f64>) {
        match *self {
            Objective::Defer {
                surrogate,
                phi,
                alpha,
            } => {
                let g = logits_unchecked(outputs);
                match surrogate {
                    SurrogateKind::Softmax => (
                        softmax_l2d_loss(&g, y, m, alpha),
                        softmax_l2d_grad(&g, y, m, alpha),
                    ),
                    SurrogateKind::OneVsAll => {
                        (ova_l2d_loss(&g, y, m, phi), ova_l2d_grad(&g, y, m, phi))
                    }
                }
            }
            Objective::Classifier => {
                let probs = softmax_slice(outputs);
                let loss = -probs[y].max(f64::MIN_POSITIVE).ln();
                let mut grad = probs;
                grad[y] -= 1.0;
                (loss, grad)
            }
        }
    }

    /// Whether the system (or classifier) is correct on one instance.
    pub fn correct(&self, outputs: &[f64], y: usize, m: usize) -> bool {
        match *self {
            Objective::Defer { surrogate, phi, .. } => {
                let d = decide(&logits_unchecked(outputs), surrogate, phi);
                if d.deferred {
                    m == y
                } else {
                    d.predicted_class == y
                }
            }
            Objective::Classifier => argmax(outputs) == y,
        }
    }
}

fn logits_unchecked(outputs: &[f64]) -> LogitVector {
    let (&defer_score, classes) = outputs.split_last().expect("non-empty outputs");
    LogitVector {
        class_scores: classes.to_vec(),
        defer_score,
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Loss and parameter gradient for a single instance.
pub fn backward(
    params: &ModelParams,
    x: &[f64],
    y: usize,
    m: usize,
    objective: &Objective,
) -> Result<(f64, ModelParams)> {
    let mut grad = ModelParams::zeros(params.architecture, params.input_dim, params.output_dim);
    let loss = accumulate_gradient(params, x, y, m, objective, &mut grad)?;
    Ok((loss, grad))
}

fn accumulate_gradient(
    params: &ModelParams,
    x: &[f64],
    y: usize,
    m: usize,
    objective: &Objective,
    grad: &mut ModelParams,
) -> Result<f64> {
    if x.len() != params.input_dim {
        return Err(Error::Argument(format!(
            "expected {} features, got {}",
            params.input_dim,
            x.len()
        )));
    }
    let mut cache = ForwardCache::default();
    params.forward_cached(x, &mut cache);
    let (loss, d_out) = objective.loss_and_grad(&cache.output, y, m);
    params.backprop(x, &cache, &d_out, grad);
    Ok(loss)
}

/// Mean objective value over a dataset, without weight decay.
pub fn mean_loss(params: &ModelParams, dataset: &Dataset, objective: &Objective) -> Result<f64> {
    dataset.require_non_empty()?;
    let mut total = 0.0;
    for inst in dataset.instances() {
        let out = params.outputs(&inst.features)?;
        total += objective.loss_and_grad(&out, inst.label, inst.expert_pred).0;
    }
    Ok(total / dataset.len() as f64)
}

/// Fraction of instances on which the system (or classifier) is correct.
pub fn accuracy(params: &ModelParams, dataset: &Dataset, objective: &Objective) -> Result<f64> {
    dataset.require_non_empty()?;
    let mut correct = 0usize;
    for inst in dataset.instances() {
        let out = params.outputs(&inst.features)?;
        if objective.correct(&out, inst.label, inst.expert_pred) {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub cosine_annealing: bool,
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 200,
            batch_size: 128,
            patience: 20,
            seed: 0,
            cosine_annealing: true,
            warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return fail("epochs, batch_size and patience must be positive".into());
        }
        if self.warmup_epochs >= self.epochs && self.warmup_epochs > 0 {
            return fail("warmup_epochs must be smaller than epochs".into());
        }
        Ok(())
    }

    /// Learning rate used during epoch `epoch` (0-based): linear warm-up,
    /// then cosine annealing that reaches 0 at `epoch == epochs`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let w = self.warmup_epochs;
        if epoch < w {
            return self.learning_rate * (epoch + 1) as f64 / w as f64;
        }
        if !self.cosine_annealing {
            return self.learning_rate;
        }
        let span = (self.epochs - w) as f64;
        let progress = ((epoch - w) as f64 / span).min(1.0);
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// SGD with heavy-ball momentum and L2 weight decay on every parameter.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: ModelParams,
}

impl Sgd {
    pub fn new(params: &ModelParams, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: ModelParams::zeros(params.architecture, params.input_dim, params.output_dim),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((p, g), v) in params
            .slices_mut()
            .into_iter()
            .zip(grad.slices())
            .zip(self.velocity.slices_mut())
        {
            for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let d = g + wd * *p;
                *v = mu * *v + d;
                *p -= lr * *v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Number of epochs run (1-based index of the last one).
    pub stopped_epoch: usize,
    /// 1-based epoch with the lowest validation loss; its parameters are returned.
    pub best_epoch: usize,
    pub best_validation_loss: f64,
}

pub fn train(
    split: &DataSplit,
    architecture: Architecture,
    objective: &Objective,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    train_selected(split, architecture, objective, config, |_, _, batch| {
        batch.to_vec()
    })
}

/// Training loop where `select` picks which rows of each minibatch
/// contribute to the update. Empty selections skip the step.
pub(crate) fn train_selected<F>(
    split: &DataSplit,
    architecture: Architecture,
    objective: &Objective,
    config: &TrainConfig,
    mut select: F,
) -> Result<(ModelParams, TrainReport)>
where
    F: FnMut(&ModelParams, &Dataset, &[usize]) -> Vec<usize>,
{
    config.validate()?;
    let train_set = &split.train;
    let val_set = &split.validation;
    train_set.require_non_empty()?;
    val_set.require_non_empty()?;
    if train_set.num_classes() != val_set.num_classes() || train_set.dim() != val_set.dim() {
        return Err(Error::Argument(
            "train and validation sets disagree on K or d".into(),
        ));
    }
    let output_dim = objective.output_dim(train_set.num_classes());

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::random(architecture, train_set.dim(), output_dim, &mut rng);
    let mut opt = Sgd::new(&params, config.momentum, config.weight_decay);
    let mut grad = ModelParams::zeros(architecture, train_set.dim(), output_dim);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut records = Vec::new();

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let chosen = select(&params, train_set, batch);
            if chosen.is_empty() {
                continue;
            }
            grad.scale(0.0);
            let mut batch_loss = 0.0;
            for &i in &chosen {
                let inst = &train_set.instances()[i];
                batch_loss += accumulate_gradient(
                    &params,
                    &inst.features,
                    inst.label,
                    inst.expert_pred,
                    objective,
                    &mut grad,
                )?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training {
                    epoch: epoch + 1,
                    batch: b,
                    message: "non-finite loss".into(),
                });
            }
            grad.scale(1.0 / chosen.len() as f64);
            opt.step(&mut params, &grad, lr);
            if !params.is_finite() {
                return Err(Error::Training {
                    epoch: epoch + 1,
                    batch: b,
                    message: "non-finite parameters after update".into(),
                });
            }
            loss_sum += batch_loss;
            seen += chosen.len();
        }

        let validation_loss = mean_loss(&params, val_set, objective)?;
        if !validation_loss.is_finite() {
            return Err(Error::Training {
                epoch: epoch + 1,
                batch: 0,
                message: "non-finite validation loss".into(),
            });
        }
        records.push(EpochRecord {
            epoch: epoch + 1,
            learning_rate: lr,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { 0.0 },
            validation_loss,
            validation_accuracy: accuracy(&params, val_set, objective)?,
        });

        if validation_loss < best_loss {
            best_loss = validation_loss;
            best_epoch = epoch + 1;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let report = TrainReport {
        stopped_epoch: records.len(),
        best_epoch,
        best_validation_loss: best_loss,
        epochs: records,
    };
    Ok((best, report))
}
