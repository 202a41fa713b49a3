//! Composite loss, optimiser and the deterministic training loop.

pub mod checkpoint;
pub mod loss;
pub mod optim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::eval::{self, RiskTrace};
use crate::model::{head, Model, ModelDims, Variant, LAMBDA_MAX};
use crate::rng::{split_seed, Rng};
use crate::sim::Sequence;
use crate::tensor::{sigmoid_scalar, Tensor};

pub use loss::{FocalParams, KlDirection, LossTerms};
pub use optim::{AdamW, AdamWConfig, Schedule};

/// Width of the sigmoid that softens `p > τ` when calibrating λ.
const TRIGGER_SOFTNESS: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub focal: FocalParams,
    pub kl_direction: KlDirection,
    pub seed: u64,
    /// Seconds before the accident labelled positive.
    pub window_s: f64,
    /// Share of each class held out for early stopping.
    pub val_fraction: f64,
    pub patience: usize,
    /// Step size of the projected-gradient update of λ1, λ2.
    pub lambda_lr: f64,
    pub freeze_lambdas: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 2,
            lr: 1e-3,
            warmup_epochs: 5,
            weight_decay: 0.01,
            clip_norm: 1.0,
            focal: FocalParams::default(),
            kl_direction: KlDirection::default(),
            seed: 42,
            window_s: 3.0,
            val_fraction: 0.2,
            patience: 10,
            lambda_lr: 1e-3,
            freeze_lambdas: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || !(self.weight_decay >= 0.0) || !(self.lambda_lr >= 0.0) {
            return bad("learning rates and clip norm must be positive, weight decay nonnegative");
        }
        if !(self.window_s > 0.0) {
            return bad("label window must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        if !(self.focal.gamma >= 0.0) || !(0.0..=1.0).contains(&self.focal.alpha) {
            return bad("focal gamma must be nonnegative and alpha in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossTerms,
    pub lr: f64,
    pub grad_norm: f64,
    pub val_ap: Option<f64>,
    pub val_loss: Option<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log serialises")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Per-sequence tensors that do not change during training.
struct Prepared<'a> {
    seq: &'a Sequence,
    targets: Vec<f64>,
    attention: Tensor,
    entropy: Vec<f64>,
}

fn prepare<'a>(seq: &'a Sequence, dims: &ModelDims, window_s: f64) -> Result<Prepared<'a>> {
    Ok(Prepared {
        seq,
        targets: seq.labels(window_s),
        attention: loss::attention_targets(&seq.attention, dims.feat)?,
        entropy: (0..seq.frames())
            .map(|t| head::attention_entropy(seq.attention_frame(t)))
            .collect::<Result<_>>()?,
    })
}

/// Stratified split into (train, validation) index lists.
pub fn split(seqs: &[Sequence], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (k, class) in [true, false].into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..seqs.len()).filter(|&i| seqs[i].label == class).collect();
        Rng::derive(seed, k as u64).shuffle(&mut idx);
        let n_val = (idx.len() as f64 * val_fraction).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

struct StepResult {
    loss: LossTerms,
    grads: BTreeMap<String, Tensor>,
    lambda_grad: (f64, f64),
}

/// Forward and backward on one sequence. Also returns the gradient of the
/// softened trigger loss with respect to (λ1, λ2), computed on detached values.
fn step(model: &Model, item: &Prepared, cfg: &TrainConfig) -> Result<StepResult> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &item.seq.input())?;
    let lv = loss::composite_graph(
        &mut g,
        out.prob,
        out.risk_map,
        &item.targets,
        &item.attention,
        cfg.focal,
        cfg.kl_direction,
    )?;
    let terms = lv.values(&g);
    if !terms.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = g.backward(lv.total)?;
    let lambda_grad = if cfg.freeze_lambdas {
        (0.0, 0.0)
    } else {
        lambda_gradient(model, item, g.value(out.prob).data(), g.value(out.context))
    };
    Ok(StepResult {
        loss: terms,
        grads: g.param_grads(&grads),
        lambda_grad,
    })
}

/// Mean over evaluated frames of `BCE(σ((p − τ)/s), y)` differentiated with
/// respect to λ1 and λ2. Frames where τ sits on its clamp contribute nothing.
fn lambda_gradient(model: &Model, item: &Prepared, p: &[f64], ctx: &Tensor) -> (f64, f64) {
    let (l1, l2) = model.lambdas();
    let c = ctx.shape()[1];
    let n_eval = match item.seq.t_accident {
        Some(ta) if item.seq.label => ta + 1,
        _ => p.len(),
    };
    let (mut g1, mut g2) = (0.0, 0.0);
    for t in 0..n_eval {
        let e = item.entropy[t];
        let n = head::context_complexity(&ctx.data()[t * c..(t + 1) * c]);
        let raw = head::raw_threshold(l1, l2, e, n);
        if !(head::TAU_MIN..=head::TAU_MAX).contains(&raw) {
            continue;
        }
        let s = sigmoid_scalar((p[t] - raw) / TRIGGER_SOFTNESS);
        // d BCE / d τ = −(s − y) / softness
        let d_tau = -(s - item.targets[t]) / TRIGGER_SOFTNESS;
        g1 += d_tau * e;
        g2 -= d_tau * n;
    }
    (g1 / n_eval as f64, g2 / n_eval as f64)
}

fn validation(model: &Model, items: &[Prepared], cfg: &TrainConfig) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut traces: Vec<RiskTrace> = Vec::with_capacity(items.len());
    for item in items {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &item.seq.input())?;
        let lv = loss::composite_graph(
            &mut g,
            out.prob,
            out.risk_map,
            &item.targets,
            &item.attention,
            cfg.focal,
            cfg.kl_direction,
        )?;
        total += g.value(lv.total).item();
        traces.push(RiskTrace::from_scores(
            item.seq.label,
            item.seq.t_accident,
            item.seq.fps,
            g.value(out.prob).data().to_vec(),
        ));
    }
    let ap = eval::average_precision(&eval::sweep(&traces)?)?;
    Ok((ap, total / items.len() as f64))
}

/// Trains a fresh model. `on_epoch` sees every epoch's log and the weights
/// after that epoch, so callers can persist the last good state.
pub fn train_with(
    seqs: &[Sequence],
    dims: ModelDims,
    variant: Variant,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if seqs.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut model = Model::new(dims, variant, split_seed(cfg.seed, 0))?;
    let (train_idx, val_idx) = split(seqs, cfg.val_fraction, split_seed(cfg.seed, 1));
    let prep = |idx: &[usize]| -> Result<Vec<Prepared>> { idx.iter().map(|&i| prepare(&seqs[i], &dims, cfg.window_s)).collect() };
    let train_items = prep(&train_idx)?;
    let val_items = prep(&val_idx)?;
    let can_validate = val_items.iter().any(|p| p.seq.label);

    let steps_per_epoch = train_items.len().div_ceil(cfg.batch_size);
    let schedule = Schedule {
        peak: cfg.lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
        floor_ratio: 0.1,
    };
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });

    let mut log = Vec::new();
    let mut best: Option<(f64, f64, usize, Model)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut global_step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        Rng::derive(split_seed(cfg.seed, 2), epoch as u64).shuffle(&mut order);
        let mut epoch_loss = LossTerms::default();
        let mut norm_sum = 0.0;
        let mut seen = 0;
        let mut lr = schedule.lr(global_step);
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
            let (mut lg1, mut lg2) = (0.0, 0.0);
            for &i in batch {
                let r = step(&model, &train_items[i], cfg).map_err(|e| match e {
                    Error::NonFinite(m) => Error::Diverged {
                        epoch,
                        msg: format!("non-finite {m}"),
                    },
                    other => other,
                })?;
                seen += 1;
                epoch_loss.accumulate(&r.loss, seen);
                for (name, gr) in r.grads {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.add_assign(&gr),
                        None => {
                            sum.insert(name, gr);
                        }
                    }
                }
                lg1 += r.lambda_grad.0;
                lg2 += r.lambda_grad.1;
            }
            let k = 1.0 / batch.len() as f64;
            for gr in sum.values_mut() {
                gr.scale_assign(k);
            }
            optim::check_finite(&sum)?;
            norm_sum += optim::clip_global_norm(&mut sum, cfg.clip_norm);
            lr = schedule.lr(global_step);
            opt.update(&mut model.params, &sum, lr)?;
            if !cfg.freeze_lambdas {
                let (l1, l2) = model.lambdas();
                model.set_lambdas(
                    (l1 - cfg.lambda_lr * lg1 * k).clamp(0.0, LAMBDA_MAX),
                    (l2 - cfg.lambda_lr * lg2 * k).clamp(0.0, LAMBDA_MAX),
                );
            }
            global_step += 1;
        }

        let (val_ap, val_loss) = if can_validate {
            let (ap, l) = validation(&model, &val_items, cfg)?;
            (Some(ap), Some(l))
        } else {
            (None, None)
        };
        let (lambda1, lambda2) = model.lambdas();
        let entry = EpochLog {
            epoch,
            loss: epoch_loss,
            lr,
            grad_norm: norm_sum / steps_per_epoch as f64,
            val_ap,
            val_loss,
            lambda1,
            lambda2,
        };
        on_epoch(&entry, &model)?;
        log.push(entry);

        if let (Some(ap), Some(vl)) = (val_ap, val_loss) {
            let improved = match &best {
                None => true,
                Some((bap, bl, _, _)) => ap > *bap || (ap == *bap && vl < *bl),
            };
            if improved {
                best = Some((ap, vl, epoch, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let (model, best_epoch) = match best {
        Some((_, _, e, m)) => (m, e),
        None => (model, log.len() - 1),
    };
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        stopped_early,
    })
}

pub fn train(seqs: &[Sequence], dims: ModelDims, variant: Variant, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(seqs, dims, variant, cfg, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate, SimConfig};

    fn tiny_data() -> Vec<Sequence> {
        let cfg = SimConfig {
            frames: 44,
            grid: 16,
            ..SimConfig::default()
        };
        generate(11, 8, 0.5, &cfg).unwrap()
    }

    fn tiny_dims() -> ModelDims {
        ModelDims {
            grid: 16,
            feat: 4,
            channels: 4,
            refine_channels: 4,
            hidden: 4,
            ..ModelDims::default()
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            val_fraction: 0.25,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let data = tiny_data();
        let (tr, va) = split(&data, 0.25, 1);
        assert_eq!(tr.len() + va.len(), data.len());
        assert_eq!(va.iter().filter(|&&i| data[i].label).count(), 1);
        assert!(tr.iter().all(|i| !va.contains(i)));
    }

    #[test]
    fn same_seed_same_weights() {
        let data = tiny_data();
        let a = train(&data, tiny_dims(), Variant::Full, &tiny_cfg()).unwrap();
        let b = train(&data, tiny_dims(), Variant::Full, &tiny_cfg()).unwrap();
        assert_eq!(checkpoint::to_bytes(&a.model), checkpoint::to_bytes(&b.model));
        assert_eq!(a.log, b.log);
        for e in &a.log {
            assert!((0.0..=LAMBDA_MAX).contains(&e.lambda1) && (0.0..=LAMBDA_MAX).contains(&e.lambda2));
            assert!(e.loss.is_finite());
        }
    }

    #[test]
    fn frozen_zero_lambdas_keep_half_threshold() {
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 1,
            freeze_lambdas: true,
            ..tiny_cfg()
        };
        let mut out = train(&data, tiny_dims(), Variant::Full, &cfg).unwrap();
        assert_eq!(out.model.lambdas(), (crate::model::LAMBDA_INIT, crate::model::LAMBDA_INIT));
        out.model.set_lambdas(0.0, 0.0);
        let tr = eval::trace(&out.model, &data[0]).unwrap();
        assert!(tr.tau.iter().all(|&t| t == 0.5));
    }

    #[test]
    fn lambda_gradient_signs() {
        // A missed positive frame (p below τ, y = 1) asks for a lower τ:
        // smaller λ1 and larger λ2.
        let data = tiny_data();
        let pos = data.iter().find(|s| s.label).unwrap();
        let dims = tiny_dims();
        let mut item = prepare(pos, &dims, 3.0).unwrap();
        item.targets = vec![1.0; pos.frames()];
        let model = Model::new(dims, Variant::Full, 0).unwrap();
        let ctx = Tensor::full(&[pos.frames(), dims.channels], 0.5);
        let (g1, g2) = lambda_gradient(&model, &item, &vec![0.2; pos.frames()], &ctx);
        assert!(g1 > 0.0 && g2 < 0.0, "{g1} {g2}");
    }

    #[test]
    fn invalid_config_rejected() {
        let data = tiny_data();
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&data, tiny_dims(), Variant::Full, &cfg), Err(Error::Config(_))));
        assert!(matches!(train(&[], tiny_dims(), Variant::Full, &TrainConfig::default()), Err(Error::Input(_))));
    }
}
