//! Classical training, the two layer-by-layer conversion pipelines, and evaluation.
//!
//! Both pipelines convert the convertible layers in network order, one per
//! stage. [`Method::FreezeConverted`] stops updating a layer once it is
//! converted and retrains only what is still classical;
//! [`Method::TrainAll`] keeps every layer trainable, with finite log-domain
//! weights of BM layers updated directly and `NEG_INF` entries left as they are.

mod optim;
mod report;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::Arc;

use rand::rngs::mock::StepRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use optim::Optimizer;
pub use report::{results_csv, results_markdown};

use crate::bench::{count_ops, OpCounters};
use crate::dataio::{split_train_val, Dataset};
use crate::error::{Error, Result};
use crate::layers::{LayerSaturation, Mode, NetworkSpec};
use crate::tensor::Activations;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub batch_size: usize,
    /// Epochs per training phase (classical training and every fine-tuning stage).
    pub epochs: usize,
    /// Independent runs; the one with the best validation accuracy is kept.
    pub restarts: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// Number of leading conv/fc layers to convert.
    pub depth: usize,
    /// Stop a phase after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Largest tolerated fraction of clamped max-plus outputs in a training batch.
    pub max_saturation: f64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::default(),
            batch_size: 128,
            epochs: 20,
            restarts: 3,
            seed: 0,
            val_fraction: 0.1,
            depth: 1,
            patience: Some(5),
            max_saturation: 0.01,
            eval_batch: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(m));
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail(format!("validation fraction {} not in (0, 1)", self.val_fraction));
        }
        if self.restarts == 0 {
            return fail("restarts must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return fail("batch sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.max_saturation) {
            return fail(format!("max_saturation {} not in [0, 1]", self.max_saturation));
        }
        self.optimizer.validate()
    }

    fn validate_for(&self, net: &NetworkSpec) -> Result<()> {
        self.validate()?;
        let n = net.convertible_layers().len();
        if self.depth > n {
            return Err(Error::Invalid(format!(
                "depth {} exceeds the {n} convertible layers",
                self.depth
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the configuration, stored in model files.
    pub fn digest(&self) -> String {
        let text = format!("{self:?}");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn rng(&self, restart: usize, phase: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((restart as u64) << 32) | phase);
        rng
    }
}

/// Training, validation and test views of one dataset.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn new(full_train: &Dataset, test: Dataset, val_fraction: f64, seed: u64) -> Result<Self> {
        let (train, val) = split_train_val(full_train, val_fraction, seed)?;
        Ok(Self { train, val, test })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub samples: usize,
    pub saturation: Vec<LayerSaturation>,
    /// Analytic operation totals for the whole pass.
    pub ops: OpCounters,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Converted layers are frozen; the classical remainder is retrained.
    FreezeConverted,
    /// Converted layers are initialized from the classical weights and trained with the rest.
    TrainAll,
}

impl Method {
    pub fn number(self) -> u8 {
        match self {
            Method::FreezeConverted => 1,
            Method::TrainAll => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Method::FreezeConverted),
            2 => Ok(Method::TrainAll),
            _ => Err(Error::Invalid(format!("method must be 1 or 2, got {n}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// A trained network with the split accuracies that chose it.
#[derive(Clone, Debug)]
pub struct Trained {
    pub net: NetworkSpec,
    pub restart: usize,
    pub val_accuracy: f64,
    pub test: EvalReport,
}

/// Accuracies after converting the first `depth` layers.
#[derive(Clone, Debug)]
pub struct StageReport {
    pub depth: usize,
    pub converted_prefix: String,
    /// Test split, immediately after conversion.
    pub before_ft: EvalReport,
    /// Test split, after the retraining phase; `None` when nothing was trainable.
    pub after_ft: Option<EvalReport>,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub method: Method,
    pub architecture: String,
    /// Final network of the selected restart.
    pub net: NetworkSpec,
    /// Classical network the selected restart started from.
    pub classical: NetworkSpec,
    /// Stage 0 is the unconverted network.
    pub stages: Vec<StageReport>,
    pub restart: usize,
    pub val_accuracy: f64,
}

/// Eval-mode accuracy, loss, saturation and operation totals over `ds`.
pub fn evaluate(net: &NetworkSpec, ds: &Dataset) -> Result<EvalReport> {
    evaluate_with(net, ds, None, TrainConfig::default().eval_batch)
}

/// [`evaluate`] with optional substitute activations (e.g. a lookup table).
pub fn evaluate_with(
    net: &NetworkSpec,
    ds: &Dataset,
    activations: Option<Arc<dyn Activations>>,
    batch_size: usize,
) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut saturation: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let order: Vec<usize> = (0..ds.len()).collect();
    let no_grad = HashSet::new();
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch(chunk);
        let mut t = net.trace(x, Mode::Eval, &no_grad, activations.clone(), &mut StepRng::new(0, 0))?;
        let loss = t.graph.softmax_cross_entropy(t.logits, &labels)?;
        loss_sum += t.graph.value(loss).item() * labels.len() as f64;
        let scores = t.graph.value(t.logits);
        let k = scores.shape()[1];
        for (row, &label) in scores.data().chunks(k).zip(&labels) {
            if argmax(row) == label {
                correct += 1;
            }
        }
        for s in &t.saturation {
            let e = saturation.entry(s.layer.clone()).or_default();
            e.0 += s.saturated;
            e.1 += s.total;
        }
    }
    let per_image = count_ops(net, net.input_shape())?.total();
    Ok(EvalReport {
        accuracy: correct as f64 / ds.len() as f64,
        mean_loss: loss_sum / ds.len() as f64,
        samples: ds.len(),
        saturation: saturation
            .into_iter()
            .map(|(layer, (saturated, total))| LayerSaturation {
                layer,
                saturated,
                total,
            })
            .collect(),
        ops: per_image.scaled(ds.len() as u64),
    })
}

/// Index of the largest score, lowest index on ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains the layers named in `trainable`; keeps the best-validation weights.
/// Returns that validation accuracy.
fn fit(
    net: &mut NetworkSpec,
    trainable: &HashSet<String>,
    splits: &Splits,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let val_acc = |net: &NetworkSpec| -> Result<f64> {
        Ok(evaluate_with(net, &splits.val, None, cfg.eval_batch)?.accuracy)
    };
    let mut best = val_acc(net)?;
    if trainable.is_empty() || cfg.epochs == 0 {
        return Ok(best);
    }
    if splits.train.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut best_params = net.params.clone();
    let mut opt = cfg.optimizer.state();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = splits.train.batch(chunk);
            let mut t = net.trace(x, Mode::Train, trainable, None, rng)?;
            let loss = t.graph.softmax_cross_entropy(t.logits, &labels)?;
            let lv = t.graph.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            loss_sum += lv;
            for s in &t.saturation {
                if s.saturated as f64 > cfg.max_saturation * s.total as f64 {
                    return Err(Error::Saturation {
                        layer: s.layer.clone(),
                        saturated: s.saturated,
                        total: s.total,
                    });
                }
            }
            t.graph.backward(loss)?;
            opt.begin_step();
            for p in &t.params {
                let Some(grad) = t.graph.grad(p.var) else { continue };
                let param = net
                    .param_mut(&p.layer, p.slot)
                    .expect("traced parameter exists in the network");
                opt.update((&p.layer, p.slot), param.data_mut(), grad.data());
            }
        }
        let acc = val_acc(net)?;
        let batches = order.len().div_ceil(cfg.batch_size);
        log::info!(
            "epoch {}: train loss {:.4}, val accuracy {:.4}",
            epoch + 1,
            loss_sum / batches as f64,
            acc
        );
        if acc > best {
            best = acc;
            best_params = net.params.clone();
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    net.params = best_params;
    Ok(best)
}

fn weighted(net: &NetworkSpec, include_bm: bool) -> HashSet<String> {
    net.layers()
        .iter()
        .filter(|l| l.kind.is_weighted() && (include_bm || !l.kind.is_bm()))
        .map(|l| l.name.clone())
        .collect()
}

/// One classical run; parameters are initialized unless `keep_params`.
fn classical_run(net: &NetworkSpec, splits: &Splits, cfg: &TrainConfig, restart: usize, keep_params: bool) -> Result<(NetworkSpec, f64)> {
    let mut net = net.clone();
    if !keep_params {
        net.init_params(&mut cfg.rng(restart, 0))?;
    }
    let trainable = weighted(&net, true);
    let val = fit(&mut net, &trainable, splits, cfg, &mut cfg.rng(restart, 1))?;
    Ok((net, val))
}

/// Minibatch training on softmax cross-entropy, best of `cfg.restarts` runs
/// by validation accuracy. Restart 0 continues from existing parameters if
/// the network has them.
pub fn train_classical(net: &NetworkSpec, splits: &Splits, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    let has_params = net.check_params().is_ok();
    let mut best: Option<(NetworkSpec, f64, usize)> = None;
    for r in 0..cfg.restarts {
        let (trained, val) = classical_run(net, splits, cfg, r, r == 0 && has_params)?;
        log::info!("classical restart {r}: val accuracy {val:.4}");
        if best.as_ref().is_none_or(|b| val > b.1) {
            best = Some((trained, val, r));
        }
    }
    let (net, val_accuracy, restart) = best.expect("at least one restart");
    let test = evaluate_with(&net, &splits.test, None, cfg.eval_batch)?;
    Ok(Trained {
        net,
        restart,
        val_accuracy,
        test,
    })
}

/// Convert, freeze, retrain the classical remainder; repeat per layer.
pub fn train_method1(net: &NetworkSpec, splits: &Splits, cfg: &TrainConfig) -> Result<PipelineOutcome> {
    run_pipeline(Method::FreezeConverted, net, splits, cfg)
}

/// Convert and keep training everything, converted layers included.
pub fn train_method2(net: &NetworkSpec, splits: &Splits, cfg: &TrainConfig) -> Result<PipelineOutcome> {
    run_pipeline(Method::TrainAll, net, splits, cfg)
}

pub fn train_method(method: Method, net: &NetworkSpec, splits: &Splits, cfg: &TrainConfig) -> Result<PipelineOutcome> {
    run_pipeline(method, net, splits, cfg)
}

/// Restart 0 starts from the supplied trained network; later restarts
/// first retrain the classical network from a fresh initialization.
fn run_pipeline(method: Method, net: &NetworkSpec, splits: &Splits, cfg: &TrainConfig) -> Result<PipelineOutcome> {
    cfg.validate_for(net)?;
    net.check_params()?;
    if net.layers().iter().any(|l| l.kind.is_bm()) {
        return Err(Error::Invalid("conversion pipelines start from a classical network".into()));
    }
    let restarts = if cfg.depth == 0 { 1 } else { cfg.restarts };
    let mut best: Option<PipelineOutcome> = None;
    for r in 0..restarts {
        let classical = if r == 0 {
            net.clone()
        } else {
            classical_run(net, splits, cfg, r, false)?.0
        };
        let outcome = run_schedule(method, classical, splits, cfg, r)?;
        log::info!(
            "method {method} restart {r}: val accuracy {:.4}",
            outcome.val_accuracy
        );
        if best.as_ref().is_none_or(|b| outcome.val_accuracy > b.val_accuracy) {
            best = Some(outcome);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn run_schedule(
    method: Method,
    classical: NetworkSpec,
    splits: &Splits,
    cfg: &TrainConfig,
    restart: usize,
) -> Result<PipelineOutcome> {
    let eval = |net: &NetworkSpec, ds: &Dataset| evaluate_with(net, ds, None, cfg.eval_batch);
    let order = classical.convertible_layers();
    let mut net = classical.clone();
    let mut val_accuracy = eval(&net, &splits.val)?.accuracy;
    let mut stages = vec![StageReport {
        depth: 0,
        converted_prefix: net.converted_prefix(0),
        before_ft: eval(&net, &splits.test)?,
        after_ft: None,
        val_accuracy,
    }];
    for depth in 1..=cfg.depth {
        net.convert_in_place(&order[depth - 1])?;
        let before_ft = eval(&net, &splits.test)?;
        let trainable = weighted(&net, method == Method::TrainAll);
        let after_ft = if trainable.is_empty() {
            val_accuracy = eval(&net, &splits.val)?.accuracy;
            None
        } else {
            val_accuracy = fit(&mut net, &trainable, splits, cfg, &mut cfg.rng(restart, 16 + depth as u64))?;
            Some(eval(&net, &splits.test)?)
        };
        log::info!(
            "method {method} depth {depth}: before {:.4}, after {}",
            before_ft.accuracy,
            after_ft.as_ref().map_or("-".into(), |r| format!("{:.4}", r.accuracy))
        );
        stages.push(StageReport {
            depth,
            converted_prefix: net.converted_prefix(depth),
            before_ft,
            after_ft,
            val_accuracy,
        });
    }
    Ok(PipelineOutcome {
        method,
        architecture: classical.architecture(),
        net,
        classical,
        stages,
        restart,
        val_accuracy,
    })
}
