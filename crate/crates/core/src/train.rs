//! Training loop with early stopping, evaluation, and experiment records.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{generate, generate_phase, split, Dataset, Phase, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{build_model, ModelConfig, Network};
use crate::objectives::{LossValues, WeightedLossParams};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;

/// Stream of the experiment seed reserved for batch shuffling.
pub const SHUFFLE_STREAM: u64 = (1 << 48) + 1;
/// Batch size for gradient-free passes; does not affect results beyond
/// floating-point summation order, which is fixed.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            lr: adam.lr,
            batch_size: 8,
            max_epochs: 100,
            patience: 5,
            seed: 10,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::config("batch_size, max_epochs and patience must be positive"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("invalid optimizer settings"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses seen during the epoch.
    pub train: LossValues,
    /// Accuracy of the pre-update predictions made during the epoch.
    pub train_accuracy: f64,
    pub validation: LossValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub stopped_early: bool,
    /// Loss weights actually used, with proportions from the training split.
    pub loss: WeightedLossParams,
}

/// What the stopping rule decided after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// New best; checkpoint the parameters.
    Improved,
    Continue,
    Stop,
}

/// Stops once the monitored loss has failed to improve for `patience`
/// consecutive epochs. Only strict decreases count as improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if self.best.is_none_or(|(_, b)| loss < b) {
            self.best = Some((epoch, loss));
            self.stale = 0;
            return Verdict::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }

    /// `(epoch, loss)` of the best observation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Loss weights whose class proportions come from `labels`.
pub fn fitted_loss(base: &WeightedLossParams, labels: &[usize], classes: usize) -> WeightedLossParams {
    WeightedLossParams {
        class_proportions: WeightedLossParams::proportions_from_labels(labels, classes),
        ..base.clone()
    }
}

fn accumulate(acc: &mut LossValues, v: &LossValues, w: f64) {
    acc.total += w * v.total;
    acc.classification += w * v.classification;
    acc.regression += w * v.regression;
    acc.reconstruction += w * v.reconstruction;
}

fn scaled(v: LossValues, s: f64) -> LossValues {
    LossValues {
        total: v.total * s,
        classification: v.classification * s,
        regression: v.regression * s,
        reconstruction: v.reconstruction * s,
    }
}

/// Mean loss over a dataset without touching gradients.
pub fn dataset_loss(net: &Network, ds: &Dataset, weights: &WeightedLossParams) -> Result<LossValues> {
    if ds.is_empty() {
        return Err(Error::config("cannot compute a loss on an empty split"));
    }
    let mut acc = LossValues::default();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = ds.batch(chunk)?;
        let mut tape = Tape::new();
        let p = net.params.bind(&mut tape, false);
        let x = tape.constant(batch.images.clone());
        let out = net.forward(&mut tape, &p, x)?;
        let parts = net.loss(&mut tape, &out, &batch, weights)?;
        accumulate(&mut acc, &parts.values(&tape), chunk.len() as f64);
    }
    Ok(scaled(acc, 1.0 / ds.len() as f64))
}

/// One optimizer step on a batch; returns the loss before the step and the
/// number of correct pre-update predictions.
pub fn train_step(
    net: &mut Network,
    opt: &mut Adam,
    ds: &Dataset,
    indices: &[usize],
    weights: &WeightedLossParams,
) -> Result<(LossValues, usize)> {
    let batch = ds.batch(indices)?;
    let mut tape = Tape::new();
    let p = net.params.bind(&mut tape, true);
    let x = tape.constant(batch.images.clone());
    let out = net.forward(&mut tape, &p, x)?;
    let parts = net.loss(&mut tape, &out, &batch, weights)?;
    let scores = tape.value(out.scores);
    let c = scores.shape()[1];
    let correct = scores
        .data()
        .chunks(c)
        .zip(&batch.labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best == l
        })
        .count();
    let grads = tape.backward(parts.total)?;
    opt.step(&mut net.params, &p.grads(&grads))?;
    Ok((parts.values(&tape), correct))
}

/// Trains with Adam, shuffling batches from the seed's dedicated stream.
/// After each epoch the total validation loss is measured; training stops
/// once it has failed to improve for `patience` consecutive epochs, and the
/// best-validation parameters are restored.
pub fn train(net: &mut Network, train_set: &Dataset, val_set: &Dataset, tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::config(format!(
            "training needs non-empty splits (train {}, validation {})",
            train_set.len(),
            val_set.len()
        )));
    }
    let weights = fitted_loss(&net.config.loss, &train_set.labels_usize(), net.config.n_classes);
    weights.validate()?;
    let mut opt = Adam::new(tc.adam(), &net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(SHUFFLE_STREAM);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::new();
    let mut stopper = EarlyStopping::new(tc.patience);
    let mut checkpoint: Option<ParamStore> = None;
    let mut stopped_early = false;
    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut rng);
        let mut acc = LossValues::default();
        let mut correct = 0;
        for chunk in order.chunks(tc.batch_size) {
            let (v, c) = train_step(net, &mut opt, train_set, chunk, &weights)?;
            accumulate(&mut acc, &v, chunk.len() as f64);
            correct += c;
        }
        let validation = dataset_loss(net, val_set, &weights)?;
        epochs.push(EpochLog {
            epoch,
            train: scaled(acc, 1.0 / train_set.len() as f64),
            train_accuracy: correct as f64 / train_set.len() as f64,
            validation,
        });
        match stopper.observe(epoch, validation.total) {
            Verdict::Improved => checkpoint = Some(net.params.clone()),
            Verdict::Continue => {}
            Verdict::Stop => {
                stopped_early = epoch < tc.max_epochs;
                break;
            }
        }
    }
    let (best_epoch, best_validation_loss) = stopper.best().expect("at least one epoch ran");
    net.params = checkpoint.expect("first epoch always checkpoints");
    Ok(TrainOutcome {
        epochs,
        best_epoch,
        best_validation_loss,
        stopped_early,
        loss: weights,
    })
}

/// Predictions and metrics over a split in fixed-order batches.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::config("cannot evaluate an empty split"));
    }
    let mut preds = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        preds.extend(net.predict(&ds.batch(chunk)?.images)?);
    }
    let classes: Vec<usize> = preds.iter().map(|p| p.class).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    MetricsReport::compute(&classes, &scores, &ds.labels_usize())
}

/// Everything needed to regenerate data, build, train and evaluate a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Train / validation / test fractions of the generated set.
    pub split: [f64; 3],
    /// Replace the test split with a same-size set drawn from the test
    /// rotation range.
    pub shifted_test: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: [0.7, 0.15, 0.15],
            shifted_test: false,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale preset: the small model, otherwise defaults.
    pub fn small() -> Self {
        ExperimentConfig {
            model: ModelConfig::small(),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub train: MetricsReport,
    pub validation: MetricsReport,
    pub test: Option<MetricsReport>,
}

/// Deterministic outcome of an experiment. Wall-clock timings are kept in
/// [`Timings`] so that identical runs produce identical records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub n_params: usize,
    pub split_sizes: [usize; 3],
    pub training: TrainOutcome,
    pub metrics: SplitMetrics,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub data_secs: f64,
    pub train_secs: f64,
    pub eval_secs: f64,
}

impl ExperimentRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// The three splits an experiment trains and evaluates on.
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Splits> {
    let ds = generate(&cfg.synth)?;
    let (train, validation, mut test) = split(&ds, cfg.split, cfg.synth.seed)?;
    if cfg.shifted_test {
        if test.is_empty() {
            return Err(Error::config("shifted_test needs a non-empty test fraction"));
        }
        let shifted = SynthConfig {
            n_samples: test.len(),
            ..cfg.synth.clone()
        };
        test = generate_phase(&shifted, Phase::Test)?;
    }
    Ok(Splits {
        train,
        validation,
        test,
    })
}

/// Generates data, trains and evaluates. Returns the model with its restored
/// best parameters alongside the record.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ExperimentRecord, Network, Timings)> {
    let t0 = Instant::now();
    let splits = prepare_data(cfg)?;
    let t1 = Instant::now();
    let (record, net, mut timings) = run_on_splits(cfg, &splits)?;
    timings.data_secs = (t1 - t0).as_secs_f64();
    Ok((record, net, timings))
}

/// Like [`run_experiment`] on splits prepared by the caller.
pub fn run_on_splits(cfg: &ExperimentConfig, splits: &Splits) -> Result<(ExperimentRecord, Network, Timings)> {
    let shape = splits.train.image_shape();
    let mut net = build_model(&cfg.model, shape, cfg.train.seed)?;
    let t0 = Instant::now();
    let training = train(&mut net, &splits.train, &splits.validation, &cfg.train)?;
    let t1 = Instant::now();
    let metrics = SplitMetrics {
        train: evaluate(&net, &splits.train)?,
        validation: evaluate(&net, &splits.validation)?,
        test: if splits.test.is_empty() {
            None
        } else {
            Some(evaluate(&net, &splits.test)?)
        },
    };
    let t2 = Instant::now();
    let record = ExperimentRecord {
        config: cfg.clone(),
        seed: cfg.train.seed,
        n_params: net.num_params(),
        split_sizes: [splits.train.len(), splits.validation.len(), splits.test.len()],
        training,
        metrics,
    };
    let timings = Timings {
        data_secs: 0.0,
        train_secs: (t1 - t0).as_secs_f64(),
        eval_secs: (t2 - t1).as_secs_f64(),
    };
    Ok((record, net, timings))
}

/// Trains one model per `λ_reg` on identical data and seed.
pub fn sweep_lambda(base: &ExperimentConfig, grid: &[f64]) -> Result<Vec<ExperimentRecord>> {
    if grid.is_empty() {
        return Err(Error::config("lambda grid is empty"));
    }
    if let Some(l) = grid.iter().find(|l| !(0.0..1.0).contains(*l)) {
        return Err(Error::config(format!("lambda_reg {l} outside [0, 1)")));
    }
    let splits = prepare_data(base)?;
    grid.iter()
        .map(|&lambda| {
            let mut cfg = base.clone();
            cfg.model.loss.lambda_reg = lambda;
            run_on_splits(&cfg, &splits).map(|(record, _, _)| record)
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "lambda_reg,split,accuracy,f1,roc_auc,pr_auc,best_validation_loss,best_epoch";

/// One row per record, sorted by `λ_reg`, using test metrics when present.
pub fn sweep_table(records: &[ExperimentRecord]) -> String {
    let mut rows: Vec<&ExperimentRecord> = records.iter().collect();
    rows.sort_by(|a, b| a.config.model.loss.lambda_reg.total_cmp(&b.config.model.loss.lambda_reg));
    let mut out = format!("{SWEEP_HEADER}\n");
    let opt = |v: Option<f64>| v.map_or_else(|| crate::metrics::UNDEFINED.to_string(), |v| v.to_string());
    for r in rows {
        let (split, m) = match &r.metrics.test {
            Some(m) => ("test", m),
            None => ("validation", &r.metrics.validation),
        };
        out.push_str(&format!(
            "{},{split},{},{},{},{},{},{}\n",
            r.config.model.loss.lambda_reg,
            m.accuracy,
            m.f1,
            opt(m.roc_auc),
            opt(m.pr_auc),
            r.training.best_validation_loss,
            r.training.best_epoch
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interval;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::small();
        cfg.synth = SynthConfig {
            n_samples: 40,
            image_size: (1, 20, 20),
            chamber_length: Interval::new(8.0, 10.0),
            width_normal: Interval::new(3.0, 4.0),
            width_dilated: Interval::new(6.0, 8.0),
            translation_range: 1.0,
            ..SynthConfig::default()
        };
        cfg.model.hidden_dim = 8;
        cfg.model.conv_kernel = 5;
        cfg.model.d_digit = 4;
        cfg.model.d_primary = 4;
        cfg.split = [0.5, 0.25, 0.25];
        cfg.train.max_epochs = 2;
        cfg.train.patience = 1;
        cfg.train.lr = 1e-3;
        cfg
    }

    #[test]
    fn patience_one_stops_after_two_worsening_epochs() {
        let mut es = EarlyStopping::new(1);
        let verdicts: Vec<Verdict> = [1.0, 2.0, 3.0].iter().enumerate().map(|(e, &l)| es.observe(e + 1, l)).collect();
        assert_eq!(&verdicts[..2], &[Verdict::Improved, Verdict::Stop]);
        assert_eq!(es.best(), Some((1, 1.0)));
    }

    #[test]
    fn equal_loss_is_not_improvement() {
        let mut es = EarlyStopping::new(2);
        assert_eq!(es.observe(1, 1.0), Verdict::Improved);
        assert_eq!(es.observe(2, 1.0), Verdict::Continue);
        assert_eq!(es.observe(3, 0.5), Verdict::Improved);
        assert_eq!(es.observe(4, 0.7), Verdict::Continue);
        assert_eq!(es.observe(5, 0.6), Verdict::Stop);
        assert_eq!(es.best(), Some((3, 0.5)));
    }

    #[test]
    fn rejects_bad_train_config() {
        let tc = TrainConfig {
            patience: 10,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(tc.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn empty_split_is_config_error() {
        let cfg = tiny_config();
        let splits = prepare_data(&cfg).unwrap();
        let mut net = build_model(&cfg.model, splits.train.image_shape(), 1).unwrap();
        let empty = Dataset::empty(1, 20, 20);
        assert!(matches!(
            train(&mut net, &splits.train, &empty, &cfg.train),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn record_round_trips_through_json() {
        let (record, _, _) = run_experiment(&tiny_config()).unwrap();
        let back = ExperimentRecord::from_json(&record.to_json().unwrap()).unwrap();
        assert_eq!(back, record);
        let total: usize = record.split_sizes.iter().sum();
        assert_eq!(total, 40);
        assert_eq!(record.metrics.train.confusion.total(), record.split_sizes[0]);
    }

    #[test]
    fn sweep_of_one_matches_a_single_run() {
        let cfg = tiny_config();
        let records = sweep_lambda(&cfg, &[cfg.model.loss.lambda_reg]).unwrap();
        let (single, _, _) = run_experiment(&cfg).unwrap();
        assert_eq!(records, vec![single]);
        let table = sweep_table(&records);
        assert_eq!(table.lines().count(), 2);
        assert!(sweep_lambda(&cfg, &[1.0]).is_err());
    }

    #[test]
    fn zero_lambda_equals_disabled_regression() {
        let mut cfg = tiny_config();
        cfg.train.max_epochs = 1;
        let records = sweep_lambda(&cfg, &[0.0]).unwrap();
        assert_eq!(records[0].training.epochs[0].train.regression, 0.0);
        assert_eq!(records[0].config.model.loss.lambda_reg, 0.0);
    }

    #[test]
    fn restored_parameters_are_the_best_epoch() {
        let cfg = tiny_config();
        let splits = prepare_data(&cfg).unwrap();
        let (record, net, _) = run_on_splits(&cfg, &splits).unwrap();
        let t = &record.training;
        let last = t.epochs.last().unwrap().validation.total;
        assert!(t.best_validation_loss <= last);
        let again = dataset_loss(&net, &splits.validation, &t.loss).unwrap();
        assert_eq!(again.total, t.best_validation_loss);
    }
}
