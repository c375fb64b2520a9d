//! Binary cross-entropy, Adam, the epoch loop and best-validation-loss
//! checkpointing.

mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{confusion, metrics, ConfusionMatrix, MetricReport, DEFAULT_THRESHOLD};
use crate::model::{rebuild_model, FreezeMask, ModelAssembly, ModelConfig};
use crate::tensor::{Graph, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn learning_rate() -> f64 {
        0.001
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn epsilon() -> f64 {
        1e-8
    }
}

impl TrainConfig {
    /// Adam with lr 0.001, batch 32, β₁ 0.9, β₂ 0.999, ε 1e-8.
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            learning_rate: defaults::learning_rate(),
            batch_size: defaults::batch_size(),
            epochs,
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            epsilon: defaults::epsilon(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::InvalidConfig(format!("{key} {why}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(key, format!("must lie in [0, 1), got {v}"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon", format!("must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// Adam moments for the parameters being optimized.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} parameters, {} gradients, {} moment slots", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.numel() != state.m[i].len() {
            return Err(Error::shape(
                "adam_step",
                format!("parameter {} against gradient {}", p.shape(), g.shape()),
            ));
        }
    }
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let correct1 = 1.0 - b1.powi(t);
    let correct2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let updated: Vec<f64> = p
            .data()
            .iter()
            .zip(g.data())
            .enumerate()
            .map(|(j, (&theta, &gj))| {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let m_hat = m[j] / correct1;
                let v_hat = v[j] / correct2;
                theta - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon)
            })
            .collect();
        *p = Tensor::new(p.dims(), updated)?;
    }
    Ok(())
}

/// Mean binary cross-entropy of `probs` against 0/1 `labels`, recorded on `g`.
pub fn bce_loss(g: &mut Graph, probs: Var, labels: &Tensor) -> Result<Var> {
    g.bce(probs, labels)
}

/// Predictions and loss of a model over a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub probs: Tensor,
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricReport,
}

impl Evaluation {
    /// Fraction of correct predictions in [0, 1].
    pub fn accuracy(&self) -> f64 {
        (self.confusion.true_pos + self.confusion.true_neg) as f64 / self.confusion.total() as f64
    }
}

/// Runs the model over `ds` in batches of `batch_size`.
pub fn evaluate(model: &ModelAssembly, ds: &Dataset, batch_size: usize, threshold: f64) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::InvalidConfig("cannot evaluate an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut probs = Vec::with_capacity(ds.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, _) = ds.batch(chunk)?;
        probs.extend_from_slice(model.forward(&batch)?.data());
    }
    let probs = Tensor::vector(&probs)?;
    let labels = Tensor::vector(&ds.labels())?;
    let mut g = Graph::new();
    let p = g.input(probs.clone());
    let l = bce_loss(&mut g, p, &labels)?;
    let loss = g.value(l).data()[0];
    let confusion = confusion(&probs, &labels, threshold)?;
    Ok(Evaluation {
        metrics: metrics(&confusion)?,
        probs,
        loss,
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Position in `epochs` of the lowest validation loss (earliest on ties).
    pub best: Option<usize>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy
            ));
        }
        out
    }
}

/// A parameter snapshot with the validation results it achieved.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    /// 1-based epoch after which the snapshot was taken; `None` before training.
    pub epoch: Option<usize>,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_metrics: MetricReport,
    pub model: ModelConfig,
    pub seed: u64,
    pub frozen: Vec<String>,
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
}

impl CheckpointRecord {
    pub fn capture(model: &ModelAssembly, epoch: Option<usize>, val: &Evaluation) -> Self {
        CheckpointRecord {
            epoch,
            val_loss: val.loss,
            val_accuracy: val.accuracy(),
            val_metrics: val.metrics,
            model: model.config().clone(),
            seed: model.seed(),
            frozen: model.freeze_mask().names().map(str::to_string).collect(),
            names: model.parameters().iter().map(|p| p.name.clone()).collect(),
            values: model.parameters().iter().map(|p| p.value.clone()).collect(),
        }
    }

    /// Scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Rebuilds the model with the stored values and freeze mask.
    pub fn restore(&self) -> Result<ModelAssembly> {
        let mut model = rebuild_model(&self.model, self.seed, self.values.clone())?;
        let names: Vec<&str> = model.parameters().iter().map(|p| p.name.as_str()).collect();
        if names != self.names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::InvalidConfig("checkpoint parameter names do not match the model layout".into()));
        }
        model.set_freeze_mask(FreezeMask::from_names(self.frozen.iter().cloned()))?;
        Ok(model)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub history: TrainHistory,
    /// Snapshot from the epoch with the lowest validation loss.
    pub best: CheckpointRecord,
}

/// Trains the unfrozen parameters of `model` in place with Adam.
///
/// Each epoch shuffles the training set with a generator seeded from
/// `(cfg.seed, epoch)`, steps once per batch, then evaluates both sets. The
/// checkpoint is replaced only on a strict improvement in validation loss;
/// the first epoch always replaces the pre-training snapshot. On return the
/// model holds the last epoch's parameters.
pub fn fit(model: &mut ModelAssembly, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidConfig("training and validation sets must be nonempty".into()));
    }
    let trainable = model.trainable_indices();
    if trainable.is_empty() {
        return Err(Error::NoTrainableParameters);
    }
    let initial = evaluate(model, val, cfg.batch_size, DEFAULT_THRESHOLD)?;
    let mut best = CheckpointRecord::capture(model, None, &initial);
    let mut history = TrainHistory::default();
    let mut state = AdamState::new(&trainable.iter().map(|&i| model.parameters()[i].value.clone()).collect::<Vec<_>>());

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);

        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            train_batch(model, train, chunk, &trainable, &mut state, cfg).map_err(|e| match e {
                e if e.is_numerical() => Error::TrainingDiverged {
                    epoch,
                    batch: batch_no,
                    source: Box::new(e),
                },
                other => other,
            })?;
        }

        let diverged = |e: Error| match e {
            e if e.is_numerical() => Error::TrainingDiverged {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
                source: Box::new(e),
            },
            other => other,
        };
        let on_train = evaluate(model, train, cfg.batch_size, DEFAULT_THRESHOLD).map_err(diverged)?;
        let on_val = evaluate(model, val, cfg.batch_size, DEFAULT_THRESHOLD).map_err(diverged)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: on_train.loss,
            train_accuracy: on_train.accuracy(),
            val_loss: on_val.loss,
            val_accuracy: on_val.accuracy(),
        });
        if history.best.is_none() || on_val.loss < best.val_loss {
            history.best = Some(history.epochs.len() - 1);
            best = CheckpointRecord::capture(model, Some(epoch), &on_val);
        }
    }
    Ok(FitOutcome { history, best })
}

fn train_batch(
    model: &mut ModelAssembly,
    train: &Dataset,
    chunk: &[usize],
    trainable: &[usize],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let (batch, labels) = train.batch(chunk)?;
    let mut g = Graph::new();
    let vars = model.register(&mut g, true);
    let probs = model.record_batch(&mut g, &vars, &batch)?;
    let loss = bce_loss(&mut g, probs, &labels)?;
    let grads = g.backward(loss)?;
    let grad_list = trainable
        .iter()
        .map(|&i| {
            grads
                .get(vars.vars[i])
                .cloned()
                .ok_or_else(|| Error::Graph(format!("no gradient for {}", model.parameters()[i].name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values: Vec<Tensor> = trainable.iter().map(|&i| model.parameters()[i].value.clone()).collect();
    adam_step(&mut values, &grad_list, state, cfg)?;
    if values.iter().any(|v| !v.all_finite()) {
        return Err(Error::Numerical { op: "adam_step" });
    }
    for (&i, v) in trainable.iter().zip(values) {
        model.set_parameter(i, v)?;
    }
    Ok(())
}
