//! Optimization loop, evaluation metrics, and whole-model gradient checks.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::gradcheck::{finite_diff_check_with_fault, GradCheckReport};
use crate::autodiff::{GradientFault, Graph, Real, TensorError};
use crate::data::{aspect_labels, Dataset, PairExample, CLS_ID};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::matching::{AggFn, MatchConfig, MatchFn, Variant};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// End training after the first epoch whose eval accuracy is 1. The
    /// restored parameters are the same as for a full run.
    pub stop_at_perfect_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 20,
            dropout_rate: 0.0,
            seed: 0,
            optimizer: Optimizer::adam(),
            max_steps: None,
            stop_at_perfect_eval: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::config("lr", "must be a finite non-negative number"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) {
                return Err(Error::config("adam_beta1", "must lie in [0, 1)"));
            }
            if !(0.0..1.0).contains(&beta2) {
                return Err(Error::config("adam_beta2", "must lie in [0, 1)"));
            }
            if eps.is_nan() || eps <= 0.0 {
                return Err(Error::config("adam_eps", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("lr", self.learning_rate);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("dropout", self.dropout_rate);
        kv.set("seed", self.seed);
        match self.optimizer {
            Optimizer::Sgd => kv.set("optimizer", "sgd"),
            Optimizer::Adam { beta1, beta2, eps } => {
                kv.set("optimizer", "adam");
                kv.set("adam_beta1", beta1);
                kv.set("adam_beta2", beta2);
                kv.set("adam_eps", eps);
            }
        }
        if let Some(n) = self.max_steps {
            kv.set("max_steps", n);
        }
        kv.set("stop_at_perfect_eval", self.stop_at_perfect_eval);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = TrainConfig::default();
        let optimizer = match kv.get("optimizer").unwrap_or("adam") {
            "sgd" => Optimizer::Sgd,
            "adam" => {
                let Optimizer::Adam { beta1, beta2, eps } = Optimizer::adam() else {
                    unreachable!()
                };
                Optimizer::Adam {
                    beta1: kv.parse_or("adam_beta1", beta1)?,
                    beta2: kv.parse_or("adam_beta2", beta2)?,
                    eps: kv.parse_or("adam_eps", eps)?,
                }
            }
            other => {
                return Err(Error::config(
                    "optimizer",
                    format!("`{other}` is not one of sgd, adam"),
                ))
            }
        };
        let cfg = TrainConfig {
            learning_rate: kv.parse_or("lr", d.learning_rate)?,
            batch_size: kv.parse_or("batch_size", d.batch_size)?,
            epochs: kv.parse_or("epochs", d.epochs)?,
            dropout_rate: kv.parse_or("dropout", d.dropout_rate)?,
            seed: kv.parse_or("seed", d.seed)?,
            optimizer,
            max_steps: kv.parse_opt("max_steps")?,
            stop_at_perfect_eval: kv.parse_or("stop_at_perfect_eval", d.stop_at_perfect_eval)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// First-order optimizer state, keyed by parameter name.
pub struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, lr: f64) -> Self {
        OptimizerState {
            kind,
            lr,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Applies one update from the gradients on `g`. Parameters the loss did not
    /// reach carry no gradient and are left untouched.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, g: &Graph<T>) {
        self.step += 1;
        let t = self.step as i32;
        for (name, var) in g.bound_params() {
            let Some(grad) = g.grad(var) else { continue };
            let p = params
                .get_mut(name)
                .expect("bound parameters come from this store");
            match self.kind {
                Optimizer::Sgd => {
                    for (w, &gr) in p.data_mut().iter_mut().zip(grad) {
                        *w = T::of(w.as_f64() - self.lr * gr.as_f64());
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let (m, v) = self
                        .moments
                        .entry(name.to_string())
                        .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (i, (w, &gr)) in p.data_mut().iter_mut().zip(grad).enumerate() {
                        let gr = gr.as_f64();
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gr;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gr * gr;
                        let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                        *w = T::of(w.as_f64() - self.lr * update);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub train_acc: f64,
    /// Held-out accuracy, present on the last step of each epoch.
    pub eval_acc: Option<f64>,
}

pub const TRACE_HEADER: &str = "epoch,step,loss,train_acc,eval_acc";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in rows {
        let eval = r.eval_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{:.9},{:.6},{}",
            r.epoch, r.step, r.loss, r.train_acc, eval
        )
        .unwrap();
    }
    out
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    std::fs::write(path, trace_csv(rows))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// One row per optimizer step.
    pub trace: Vec<TraceRow>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_eval_acc: Option<f64>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn step_losses(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.loss).collect()
    }
}

/// Minimizes mean cross-entropy on `train`. With an `eval` set the model ends
/// holding the parameters of the epoch with the best held-out accuracy (earliest
/// on ties); otherwise those of the last epoch.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.examples.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(3);
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.examples.len()).collect();
    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut steps = 0;
    let mut last_epoch = 0;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&PairExample> = idx.iter().map(|&i| &train.examples[i]).collect();
            let mut g = Graph::new();
            let dropout = (cfg.dropout_rate > 0.0).then_some((cfg.dropout_rate, &mut dropout_rng));
            let where_ = || {
                let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
                format!(
                    "in epoch {epoch}, batch {b} (step {}), examples [{}]",
                    steps + 1,
                    ids.join(", ")
                )
            };
            let fwd = match model.forward_batch(&mut g, &batch, dropout) {
                Err(Error::Tensor(TensorError::Numeric(msg))) => {
                    return Err(Error::Numeric(format!("{msg} {}", where_())));
                }
                other => other?,
            };
            let loss = g.value(fwd.loss).item().as_f64();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss {loss} {}", where_())));
            }
            let correct = predictions(g.value(fwd.logits).data(), model.config.labels.len())
                .zip(&batch)
                .filter(|(p, e)| *p == e.label)
                .count();
            g.backward(fwd.loss)?;
            opt.step(&mut model.params, &g);
            steps += 1;
            let end_of_epoch = b + 1 == batches.len();
            let mut stop = cfg.max_steps.is_some_and(|m| steps >= m);
            let eval_acc = match eval {
                Some(ds) if end_of_epoch => Some(evaluate(model, ds)?.accuracy),
                _ => None,
            };
            trace.push(TraceRow {
                epoch,
                step: steps,
                loss,
                train_acc: correct as f64 / batch.len() as f64,
                eval_acc,
            });
            if let Some(acc) = eval_acc {
                log::info!("epoch {epoch}: loss {loss:.4}, eval accuracy {acc:.4}");
                if best.as_ref().is_none_or(|(a, _, _)| acc > *a) {
                    best = Some((acc, epoch, model.params.clone()));
                }
                stop |= cfg.stop_at_perfect_eval && acc >= 1.0;
            }
            last_epoch = epoch;
            if stop {
                break 'epochs;
            }
        }
    }

    let (best_epoch, best_eval_acc) = match best {
        Some((acc, epoch, params)) => {
            model.params = params;
            (epoch, Some(acc))
        }
        None => (last_epoch, None),
    };
    Ok(TrainOutcome {
        trace,
        best_epoch,
        best_eval_acc,
        steps,
    })
}

fn predictions<T: Real>(logits: &[T], classes: usize) -> impl Iterator<Item = usize> + '_ {
    logits.chunks(classes).map(|row| {
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        best
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// F1 of the positive class.
    pub f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub loss_mean: f64,
}

impl EvalReport {
    pub fn from_predictions(
        predicted: &[usize],
        truth: &[usize],
        classes: usize,
        positive: usize,
        loss_mean: f64,
    ) -> Self {
        let mut confusion = vec![vec![0; classes]; classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            confusion[t][p] += 1;
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let tp = confusion[positive][positive] as f64;
        let predicted_pos: usize = (0..classes).map(|t| confusion[t][positive]).sum();
        let actual_pos: usize = confusion[positive].iter().sum();
        let denom = (predicted_pos + actual_pos) as f64;
        EvalReport {
            accuracy: correct as f64 / truth.len().max(1) as f64,
            f1: if denom > 0.0 { 2.0 * tp / denom } else { 0.0 },
            confusion,
            loss_mean,
        }
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn to_text(&self, labels: &[String]) -> String {
        let mut out = format!(
            "accuracy={:.6}\nf1={:.6}\nloss_mean={:.6}\nexamples={}\n",
            self.accuracy,
            self.f1,
            self.loss_mean,
            self.total()
        );
        for (t, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(
                out,
                "confusion.{}={}",
                labels.get(t).map_or("?", String::as_str),
                cells.join(",")
            )
            .unwrap();
        }
        out
    }
}

const EVAL_BATCH: usize = 64;

/// Inference-mode accuracy, positive-class F1, confusion matrix and mean loss.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset) -> Result<EvalReport> {
    if data.examples.is_empty() {
        return Err(Error::Argument(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let classes = model.config.labels.len();
    let mut predicted = Vec::with_capacity(data.examples.len());
    let mut loss_sum = 0.0;
    for chunk in data.examples.chunks(EVAL_BATCH) {
        let batch: Vec<&PairExample> = chunk.iter().collect();
        let mut g = Graph::inference();
        let fwd = model.forward_batch::<ChaCha8Rng>(&mut g, &batch, None)?;
        loss_sum += g.value(fwd.loss).item().as_f64() * chunk.len() as f64;
        predicted.extend(predictions(g.value(fwd.logits).data(), classes));
    }
    let truth: Vec<usize> = data.examples.iter().map(|e| e.label).collect();
    Ok(EvalReport::from_predictions(
        &predicted,
        &truth,
        classes,
        model.config.labels.positive,
        loss_sum / truth.len() as f64,
    ))
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
const GRAD_CHECK_JITTER: f64 = 0.1;
const GRAD_CHECK_BIAS_SHIFT: f64 = 0.3;

/// Fixed tiny configuration used by [`gradient_check_model`]: 2 layers, 2 heads of width 8.
pub fn grad_check_config(variant: Variant, match_fn: MatchFn, agg_fn: AggFn) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            head_dim: 8,
            ffn_dim: 16,
            max_seq_len: 6,
            vocab_size: 9,
            dropout_rate: 0.0,
        },
        matching: MatchConfig {
            variant,
            match_fn,
            agg_fn,
            layers: None,
            match_hidden: 6,
            num_classes: 2,
        },
        labels: aspect_labels(),
    }
}

fn grad_check_examples() -> Vec<PairExample> {
    vec![
        PairExample {
            id: "g0".into(),
            seq_a: vec![CLS_ID, 3, 5, 7],
            seq_b: vec![CLS_ID, 4, 5, 8, 6],
            label: 1,
        },
        PairExample {
            id: "g1".into(),
            seq_a: vec![CLS_ID, 8, 2],
            seq_b: vec![CLS_ID, 3, 6, 0],
            label: 0,
        },
    ]
}

/// Finite-difference check of every named parameter of one matching variant.
pub fn gradient_check_model(
    variant: Variant,
    match_fn: MatchFn,
    agg_fn: AggFn,
    tolerance: f64,
    fault: Option<GradientFault>,
) -> Result<GradCheckReport> {
    let mut model = Model::<f64>::init(grad_check_config(variant, match_fn, agg_fn), 11)?;
    // Zero biases put ReLU inputs exactly on the kink, where central differences
    // disagree with any one-sided derivative. Jitter every parameter off it, and
    // lift affine biases so the ReLUs feeding the loss are mostly active.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for name in model.params.names().map(str::to_owned).collect::<Vec<_>>() {
        let shift = if name.ends_with(".b") && !name.contains(".ln") {
            GRAD_CHECK_BIAS_SHIFT
        } else {
            0.0
        };
        for v in model.params.get_mut(&name).unwrap().data_mut() {
            *v += shift + GRAD_CHECK_JITTER * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let examples = grad_check_examples();
    let batch: Vec<&PairExample> = examples.iter().collect();
    let config = model.config.clone();
    let loss = |g: &mut Graph<f64>, p: &ParamStore<f64>| {
        let m = Model::new(config.clone(), p.clone());
        Ok(m.forward_batch::<ChaCha8Rng>(g, &batch, None)?.loss)
    };
    finite_diff_check_with_fault(loss, &model.params, GRAD_CHECK_STEP, tolerance, fault)
}

/// Every (variant, match, aggregation) combination that passes validation.
pub fn valid_combinations() -> Vec<(Variant, MatchFn, AggFn)> {
    let mut out = Vec::new();
    for &v in Variant::ALL {
        for &m in MatchFn::ALL {
            for &a in AggFn::ALL {
                if !(m.is_scalar() && a == AggFn::MaxPool) {
                    out.push((v, m, a));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn f1_on_a_hand_counted_fixture() {
        // truth:     1 1 1 0 0 0
        // predicted: 1 1 0 1 0 0  -> tp 2, fp 1, fn 1
        let r = EvalReport::from_predictions(&[1, 1, 0, 1, 0, 0], &[1, 1, 1, 0, 0, 0], 2, 1, 0.0);
        assert_eq!(r.confusion, vec![vec![2, 1], vec![1, 2]]);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.accuracy - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.total(), 6);
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let r = EvalReport::from_predictions(&[0; 4], &[0, 1, 0, 1], 2, 1, 0.0);
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.f1, 0.0);
        let r = EvalReport::from_predictions(&[1, 0], &[1, 0], 2, 1, 0.0);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.f1, 1.0);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::row_vector(vec![1.0, -2.0, 0.5]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&params, "w").unwrap();
        let c = g.constant(Tensor::row_vector(vec![3.0, -0.25, 1e-3]).unwrap());
        let y = g.mul(w, c).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        let (lr, eps) = (0.1, 1e-8);
        let mut opt = OptimizerState::new(
            Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps,
            },
            lr,
        );
        opt.step(&mut params, &g);
        let expected: Vec<f64> = [1.0, -2.0, 0.5]
            .iter()
            .zip([3.0, -0.25, 1e-3])
            .map(|(w, gr): (&f64, f64)| w - lr * gr / (gr.abs() + eps))
            .collect();
        for (a, e) in params.get("w").unwrap().data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn train_config_kv_round_trip() {
        let cfg = TrainConfig {
            max_steps: Some(10),
            seed: 4,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let sgd = TrainConfig {
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv(&sgd.to_kv()).unwrap(), sgd);
        let mut kv = cfg.to_kv();
        kv.set("batch_size", 0);
        assert!(
            matches!(TrainConfig::from_kv(&kv), Err(Error::Config { key, .. }) if key == "batch_size")
        );
    }

    #[test]
    fn valid_combinations_exclude_scalar_maxpool() {
        let combos = valid_combinations();
        assert_eq!(combos.len(), 16);
        assert!(combos
            .iter()
            .all(|(_, m, a)| !(m.is_scalar() && *a == AggFn::MaxPool)));
    }

    #[test]
    fn trace_has_header() {
        let rows = vec![TraceRow {
            epoch: 1,
            step: 1,
            loss: 0.5,
            train_acc: 1.0,
            eval_acc: None,
        }];
        let csv = trace_csv(&rows);
        assert!(csv.starts_with("epoch,step,loss,train_acc,eval_acc\n"));
        assert_eq!(csv.lines().count(), 2);
    }
}
