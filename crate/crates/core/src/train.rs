//! Optimization: end-of-sequence NLL over all heads, length weighting, L2 weight
//! decay, global-norm clipping and Nesterov momentum.

use std::time::Instant;

use crate::cell::ModelError;
use crate::grad::{GradError, Tape, PROB_FLOOR};
use crate::network::{ForwardVars, Model};
use crate::norm::NormMode;
use crate::params::ParamStore;
use crate::prng::Prng;
use crate::tasks::{augment, center_crop, Sample, TaskError};
use crate::tensor::{Precision, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("non-finite value at epoch {epoch}, iteration {iteration}: {cause}")]
    NonFinite {
        epoch: usize,
        iteration: usize,
        cause: String,
        /// Parameters before the failing update, for post-mortem.
        snapshot: Box<ParamStore>,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_threshold: f64,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Side of the square training crop.
    pub crop: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            momentum: 0.9,
            batch_size: 8,
            weight_decay: 0.0005,
            clip_threshold: 10.0,
            epochs: 200,
            seed: 0,
            precision: Precision::F32,
            crop: 28,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.crop == 0 {
            return bad("batch size and crop must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_threshold > 0.0) {
            return bad("weight decay must be non-negative and the clip threshold positive");
        }
        Ok(())
    }
}

/// `−Σ_heads ln max(p̂[label], 1e−12)` for one sample.
pub fn nll_loss(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| -p[l].max(PROB_FLOOR).ln())
        .sum()
}

/// Weight of a sequence of length `t_i` when the longest one has `t_max` frames.
pub fn length_weight(t_i: usize, t_max: usize) -> f64 {
    t_max as f64 / t_i as f64
}

/// Whether L2 weight decay applies: input and recurrent weight tensors only.
pub fn is_decayed(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    last == "W" || last.starts_with("W_") || last.starts_with("U_")
}

pub fn global_norm(grads: &ParamStore) -> f64 {
    grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients to global L2 norm `threshold` when they exceed it.
/// Returns the norm before clipping.
pub fn clip_gradient(grads: &mut ParamStore, threshold: f64) -> Result<f64, TensorError> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(TensorError::NonFinite { op: "clip_gradient" });
    }
    if norm > threshold {
        let k = threshold / norm;
        for (_, g) in grads.iter_mut() {
            *g = g.scale(k)?;
        }
    }
    Ok(norm)
}

/// Adds `λ·θ` to the gradient of every decayed tensor.
pub fn add_weight_decay(grads: &mut ParamStore, params: &ParamStore, lambda: f64) -> Result<(), TensorError> {
    if lambda == 0.0 {
        return Ok(());
    }
    for (name, g) in grads.iter_mut() {
        if is_decayed(name) {
            let p = params.get(name).expect("gradient without parameter");
            *g = g.add(&p.scale(lambda)?)?;
        }
    }
    Ok(())
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub velocity: ParamStore,
}

impl OptState {
    pub fn new(params: &ParamStore) -> Self {
        let mut velocity = ParamStore::new();
        for (n, p) in params.iter() {
            velocity.insert(n, Tensor::zeros(p.shape().to_vec(), p.precision()));
        }
        OptState { velocity }
    }
}

/// `v ← μv − ηg; θ ← θ + μv − ηg`.
pub fn nag_update(params: &mut ParamStore, grads: &ParamStore, opt: &mut OptState, lr: f64, momentum: f64) -> Result<(), TensorError> {
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("gradient for every parameter");
        let v = opt.velocity.get_mut(name).expect("velocity for every parameter");
        let prec = p.precision();
        let new_v: Vec<f64> = v
            .data()
            .iter()
            .zip(g.data())
            .map(|(&vi, &gi)| prec.round(prec.round(momentum * vi) - prec.round(lr * gi)))
            .collect();
        let new_p: Vec<f64> = p
            .data()
            .iter()
            .zip(&new_v)
            .zip(g.data())
            .map(|((&pi, &vi), &gi)| pi + prec.round(prec.round(momentum * vi) - prec.round(lr * gi)))
            .collect();
        *v = Tensor::with_precision(v.shape().to_vec(), new_v, prec)?;
        *p = Tensor::with_precision(p.shape().to_vec(), new_p, prec)?;
    }
    Ok(())
}

/// Snapshot handed to observers after each update.
#[derive(Debug)]
pub struct IterationInfo<'a> {
    pub epoch: usize,
    /// Global iteration counter (across epochs).
    pub iteration: usize,
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// L2 norm of all detrended outputs in the batch, when detrending is active.
    pub detrended_norm: Option<f64>,
    pub tape: &'a Tape,
    pub forward: &'a ForwardVars,
}

pub trait TrainObserver {
    fn on_iteration(&mut self, _info: &IterationInfo<'_>) {}
}

impl TrainObserver for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean unweighted per-sample loss.
    pub loss: f64,
    pub head_acc: Vec<f64>,
    pub joint_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub head_acc: Vec<f64>,
    pub joint_acc: f64,
    /// Predicted label tuple per sample.
    pub predictions: Vec<Vec<usize>>,
}

/// Optimizer state, sampling stream and epoch counter of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub opt: OptState,
    pub prng: Prng,
    /// Completed epochs.
    pub epoch: usize,
    pub iteration: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &Model) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(Trainer {
            config,
            opt: OptState::new(&model.params),
            prng: Prng::derive(config.seed, 0x7121),
            epoch: 0,
            iteration: 0,
        })
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Per-head and joint correctness counts.
#[derive(Debug, Clone, Default)]
struct Tally {
    n: usize,
    loss: f64,
    heads: Vec<usize>,
    joint: usize,
    predictions: Vec<Vec<usize>>,
}

impl Tally {
    fn add(&mut self, probs: &[Vec<Vec<f64>>], samples: &[&Sample]) {
        if self.heads.is_empty() {
            self.heads = vec![0; probs.len()];
        }
        for (b, s) in samples.iter().enumerate() {
            let per_head: Vec<Vec<f64>> = probs.iter().map(|h| h[b].clone()).collect();
            let pred: Vec<usize> = per_head.iter().map(|p| argmax(p)).collect();
            self.loss += nll_loss(&per_head, &s.labels);
            let mut all = true;
            for (k, (&p, &l)) in pred.iter().zip(&s.labels).enumerate() {
                if p == l {
                    self.heads[k] += 1;
                } else {
                    all = false;
                }
            }
            self.joint += all as usize;
            self.n += 1;
            self.predictions.push(pred);
        }
    }

    fn rates(&self) -> (f64, Vec<f64>, f64) {
        let n = self.n.max(1) as f64;
        (
            self.loss / n,
            self.heads.iter().map(|&c| c as f64 / n).collect(),
            self.joint as f64 / n,
        )
    }
}

fn logits_probs(tape: &Tape, fw: &ForwardVars) -> Vec<Vec<Vec<f64>>> {
    fw.logits.iter().map(|&l| crate::network::probabilities(tape.value(l))).collect()
}

fn detrended_norm(tape: &Tape, fw: &ForwardVars) -> Option<f64> {
    let mut any = false;
    let mut sq = 0.0;
    for (_, seq) in &fw.recurrent {
        for (step, &up) in seq.steps.iter().zip(&seq.outputs) {
            if step.y.is_some() {
                any = true;
                sq += tape.value(up).data().iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    any.then(|| sq.sqrt())
}

fn non_finite(e: ModelError, epoch: usize, iteration: usize, params: &ParamStore) -> TrainError {
    let numeric = matches!(
        &e,
        ModelError::Grad(GradError::Tensor(TensorError::NonFinite { .. })) | ModelError::Grad(GradError::NonFiniteGradient(_))
    );
    if numeric {
        TrainError::NonFinite {
            epoch,
            iteration,
            cause: e.to_string(),
            snapshot: Box::new(params.clone()),
        }
    } else {
        e.into()
    }
}

/// One pass over `data` in a freshly shuffled order. `t_max` is the longest
/// sequence of the training set, used for length weighting.
pub fn train_epoch(
    model: &mut Model,
    trainer: &mut Trainer,
    data: &[&Sample],
    t_max: usize,
    observer: &mut dyn TrainObserver,
) -> Result<EpochMetrics, TrainError> {
    let start = Instant::now();
    let cfg = trainer.config;
    let epoch = trainer.epoch + 1;
    let mut order: Vec<usize> = (0..data.len()).collect();
    trainer.prng.shuffle(&mut order);
    let mut tally = Tally::default();

    for chunk in order.chunks(cfg.batch_size) {
        let samples: Vec<&Sample> = chunk.iter().map(|&i| data[i]).collect();
        let videos: Vec<Vec<Tensor>> = samples
            .iter()
            .map(|s| {
                augment(&s.frames, cfg.crop, &mut trainer.prng)
                    .map(|fs| fs.into_iter().map(|f| f.to_precision(cfg.precision)).collect())
            })
            .collect::<Result<_, _>>()?;
        let views: Vec<&[Tensor]> = videos.iter().map(|v| v.as_slice()).collect();
        let iteration = trainer.iteration + 1;
        let fail = |e: ModelError, p: &ParamStore| non_finite(e, epoch, iteration, p);

        let mut tape = Tape::new(cfg.precision);
        let bound = model.params.bind(&mut tape);
        let mut bn = std::mem::take(&mut model.bn);
        let fw = model.forward(&mut tape, &bound, &views, NormMode::Train, &mut bn);
        model.bn = bn;
        let fw = fw.map_err(|e| fail(e, &model.params))?;

        let batch = samples.len() as f64;
        let weights: Vec<f64> = samples.iter().map(|s| length_weight(s.len(), t_max) / batch).collect();
        let mut loss = None;
        for (k, &logits) in fw.logits.iter().enumerate() {
            let labels: Vec<usize> = samples.iter().map(|s| s.labels[k]).collect();
            let l = tape.softmax_nll(logits, &labels, &weights).map_err(|e| fail(e.into(), &model.params))?;
            loss = Some(match loss {
                None => l,
                Some(acc) => tape.add(acc, l).map_err(|e| fail(e.into(), &model.params))?,
            });
        }
        let loss = loss.expect("at least one head");
        let loss_value = tape.value(loss).data()[0];
        let grads = tape
            .backward(loss, &Tensor::scalar(1.0, cfg.precision))
            .map_err(|e| fail(e.into(), &model.params))?;
        let mut g = ParamStore::new();
        for (name, t) in grads.params(&tape) {
            g.insert(name, t);
        }
        tally.add(&logits_probs(&tape, &fw), &samples);

        let numeric = |e: TensorError, p: &ParamStore| fail(ModelError::from(e), p);
        add_weight_decay(&mut g, &model.params, cfg.weight_decay).map_err(|e| numeric(e, &model.params))?;
        let grad_norm = clip_gradient(&mut g, cfg.clip_threshold).map_err(|e| numeric(e, &model.params))?;
        let snapshot = model.params.clone();
        nag_update(&mut model.params, &g, &mut trainer.opt, cfg.learning_rate, cfg.momentum)
            .map_err(|e| numeric(e, &snapshot))?;
        trainer.iteration = iteration;

        observer.on_iteration(&IterationInfo {
            epoch,
            iteration,
            loss: loss_value,
            grad_norm,
            detrended_norm: detrended_norm(&tape, &fw),
            tape: &tape,
            forward: &fw,
        });
    }
    trainer.epoch = epoch;
    let (loss, head_acc, joint_acc) = tally.rates();
    Ok(EpochMetrics {
        epoch,
        loss,
        head_acc,
        joint_acc,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Evaluation on center crops without augmentation, batch by batch in order.
pub fn evaluate(model: &Model, data: &[&Sample], crop: usize, batch_size: usize) -> Result<EvalMetrics, TrainError> {
    let precision = model.precision();
    let mut tally = Tally::default();
    for chunk in data.chunks(batch_size.max(1)) {
        let videos: Vec<Vec<Tensor>> = chunk
            .iter()
            .map(|s| {
                center_crop(&s.frames, crop).map(|fs| fs.into_iter().map(|f| f.to_precision(precision)).collect())
            })
            .collect::<Result<_, _>>()?;
        let views: Vec<&[Tensor]> = videos.iter().map(|v| v.as_slice()).collect();
        let probs = model.predict(&views)?;
        tally.add(&probs, chunk);
    }
    let (loss, head_acc, joint_acc) = tally.rates();
    Ok(EvalMetrics {
        loss,
        head_acc,
        joint_acc,
        predictions: tally.predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nll_closed_forms() {
        assert_eq!(nll_loss(&[vec![0.0, 1.0]], &[1]), 0.0);
        assert!((nll_loss(&[vec![0.5, 0.5]], &[0]) - 2f64.ln()).abs() < 1e-15);
        assert!((nll_loss(&[vec![0.5, 0.5], vec![0.5, 0.5]], &[0, 1]) - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((nll_loss(&[vec![1.0, 0.0]], &[1]) - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn length_weights() {
        assert_eq!(length_weight(50, 100), 2.0);
        assert_eq!(length_weight(117, 117), 1.0);
    }

    #[test]
    fn decay_targets() {
        assert!(is_decayed("layer3.W_h"));
        assert!(is_decayed("layer3.U_z"));
        assert!(is_decayed("layer1.W"));
        assert!(is_decayed("layer7.head1.W"));
        assert!(!is_decayed("layer3.b_z"));
        assert!(!is_decayed("layer3.gamma_Wh"));
        assert!(!is_decayed("layer3.beta_Wz"));
        assert!(!is_decayed("layer7.head1.b"));
    }

    fn store(v: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.W", Tensor::new(vec![v.len()], v.to_vec()).unwrap());
        s
    }

    #[test]
    fn clipping() {
        let mut g = store(&[15.0, 20.0]);
        let n = clip_gradient(&mut g, 10.0).unwrap();
        assert_eq!(n, 25.0);
        assert!((global_norm(&g) - 10.0).abs() < 1e-12);
        assert_eq!(g.get("a.W").unwrap().data(), &[6.0, 8.0]);
        let mut g = store(&[3.0, 4.0]);
        clip_gradient(&mut g, 10.0).unwrap();
        assert_eq!(g.get("a.W").unwrap().data(), &[3.0, 4.0]);
        let mut g = store(&[0.0, 0.0]);
        assert_eq!(clip_gradient(&mut g, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn nag_two_steps_by_hand() {
        let mut p = store(&[1.0]);
        let g = store(&[0.5]);
        let mut opt = OptState::new(&p);
        nag_update(&mut p, &g, &mut opt, 1.0, 0.9).unwrap();
        // v1 = −g; θ1 = θ0 + 0.9·v1 − g = θ0 − 1.9g
        assert_eq!(opt.velocity.get("a.W").unwrap().data(), &[-0.5]);
        assert!((p.get("a.W").unwrap().data()[0] - (1.0 - 1.9 * 0.5)).abs() < 1e-15);
        nag_update(&mut p, &g, &mut opt, 1.0, 0.9).unwrap();
        // v2 = −1.9g; θ2 = θ1 + 0.9·v2 − g = θ0 − 4.61g
        assert!((p.get("a.W").unwrap().data()[0] - (1.0 - 4.61 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn plain_sgd_and_rest() {
        let mut p = store(&[1.0]);
        let g = store(&[0.5]);
        let mut opt = OptState::new(&p);
        nag_update(&mut p, &g, &mut opt, 0.1, 0.0).unwrap();
        assert!((p.get("a.W").unwrap().data()[0] - 0.95).abs() < 1e-15);
        let mut p = store(&[1.0]);
        let mut opt = OptState::new(&p);
        nag_update(&mut p, &store(&[0.0]), &mut opt, 0.1, 0.9).unwrap();
        assert_eq!(p.get("a.W").unwrap().data(), &[1.0]);
    }
}
