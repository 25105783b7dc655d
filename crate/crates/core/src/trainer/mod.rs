//! The self-training loop: supervised training with online distillation
//! on the labeled pool, then confident ensemble predictions on the
//! unlabeled pool move examples into the labeled pool, repeated for a
//! fixed number of iterations.
//!
//! Members see one shared strong augmentation draw per example and batch
//! (optionally one draw per member), distill toward per-batch ensemble
//! targets, and keep their parameters and optimizer moments across
//! iterations unless reinitialization is requested.

mod checkpoint;
mod optim;
mod pseudo;

use std::collections::HashMap;
use std::path::PathBuf;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointContext,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optim::{adam_step, cosine_lr, AdamHyper, AdamState};
pub use pseudo::{expand_dataset, pseudo_label, PseudoLabelRecord};

use crate::augment::{
    eval_transform, fit_normalizer, strong_augment, AugmentConfig, AugmentationPolicy, Normalizer, PolicySet,
};
use crate::data::{payload_matrix, DatasetPools, Example};
use crate::ensemble::{ensemble_logits, soft_targets, EnsembleState};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::losses::{class_weights, combined_loss};
use crate::metrics::{evaluate_predictions, MetricsReport};
use crate::model::{Architecture, Mode, ModelSpec};
use crate::numkernel::{argmax, Matrix};

/// Consecutive non-finite batches tolerated before training aborts.
pub const MAX_NONFINITE_BATCHES: usize = 3;

const INFERENCE_CHUNK: usize = 256;

/// Random streams used by the trainer, keyed by position in the run so
/// any step can be replayed independently of what ran before it.
pub mod streams {
    use crate::numkernel::RngStream;

    const TRAIN_STREAM: u64 = 0x7a11;

    fn root(seed: u64) -> RngStream {
        RngStream::new(seed, TRAIN_STREAM)
    }

    /// Minibatch order for one epoch.
    pub fn shuffle(seed: u64, iteration: usize, epoch: usize) -> RngStream {
        root(seed).derive(&[1, iteration as u64, epoch as u64])
    }

    /// Strong augmentation of one example in one epoch; `member` is `None`
    /// when the draw is shared by the whole ensemble.
    pub fn strong_augment(seed: u64, iteration: usize, epoch: usize, id: u64, member: Option<usize>) -> RngStream {
        let m = member.map_or(0, |m| m as u64 + 1);
        root(seed).derive(&[2, iteration as u64, epoch as u64, id, m])
    }

    /// Dropout masks of one member on one minibatch.
    pub fn dropout(seed: u64, iteration: usize, epoch: usize, batch: usize, member: usize) -> RngStream {
        root(seed).derive(&[3, iteration as u64, epoch as u64, batch as u64, member as u64])
    }

    /// Weak augmentation used for pseudo-labeling.
    pub fn weak_augment(seed: u64, iteration: usize, id: u64) -> RngStream {
        root(seed).derive(&[4, iteration as u64, id])
    }

    /// Base seed for members reinitialized at the start of `iteration`.
    pub fn reinit_seed(seed: u64, iteration: usize) -> u64 {
        use rand::RngCore;
        root(seed).derive(&[5, iteration as u64]).next_u64()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Number of ensemble members `K`.
    pub ensemble_size: usize,
    /// Weight `λ` of the distillation term.
    pub lambda: f64,
    /// Distillation temperature `T`.
    pub temperature: f64,
    /// Pseudo-label confidence threshold `τ` (strict).
    pub threshold: f64,
    pub learning_rate: f64,
    /// Epochs per self-training iteration.
    pub epochs: usize,
    /// Self-training iterations.
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    pub dropout: f64,
    /// Defaults to a one-hidden-layer MLP of width 64.
    pub architecture: Option<Architecture>,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Draw a separate strong augmentation per member instead of one shared draw.
    pub per_member_augmentation: bool,
    /// Reinitialize members (and optimizer state) at every iteration.
    pub reinitialize_each_iteration: bool,
    /// Execution strategy; not part of the configuration's identity since
    /// results do not depend on it.
    #[serde(skip)]
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 3,
            lambda: 10.0,
            temperature: 2.0,
            threshold: 0.95,
            learning_rate: 1e-3,
            epochs: 40,
            iterations: 3,
            batch_size: 32,
            adam: AdamHyper::default(),
            dropout: 0.5,
            architecture: None,
            seed: 0,
            augment: AugmentConfig::default(),
            per_member_augmentation: false,
            reinitialize_each_iteration: false,
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be ≥ 1".into());
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be ≥ 0, got {}", self.lambda));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad(format!("threshold must be in (0, 1], got {}", self.threshold));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 || self.iterations == 0 || self.batch_size == 0 {
            return bad("epochs, iterations and batch_size must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        self.adam.validate()?;
        self.augment.validate()?;
        if num_classes >= 2 && self.threshold <= 1.0 / num_classes as f64 {
            warn!(
                "threshold {} ≤ 1/{num_classes}: every unlabeled example will be admitted",
                self.threshold
            );
        }
        Ok(())
    }

    pub fn model_spec(&self, input_dim: usize, num_classes: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
            num_classes,
            architecture: self
                .architecture
                .clone()
                .unwrap_or(Architecture::Mlp { hidden: vec![64] }),
            dropout: self.dropout,
        }
    }
}

/// Members plus their optimizer state.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub ensemble: EnsembleState,
    pub optimizers: Vec<AdamState>,
    nonfinite_run: usize,
}

impl TrainerState {
    pub fn new(spec: &ModelSpec, k: usize, seed: u64) -> Result<Self> {
        Ok(Self::from_ensemble(EnsembleState::new(spec, k, seed)?))
    }

    pub fn from_ensemble(ensemble: EnsembleState) -> Self {
        let optimizers = ensemble
            .members()
            .iter()
            .map(|m| AdamState::new(m.param_count()))
            .collect();
        Self {
            ensemble,
            optimizers,
            nonfinite_run: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
}

/// Example-weighted mean losses of each member over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub iteration: usize,
    pub epoch: usize,
    pub learning_rate: f64,
    pub members: Vec<LossStats>,
    pub skipped_batches: usize,
}

fn augmented_batch(
    labeled: &[Example],
    batch: &[usize],
    policy: &AugmentationPolicy,
    cfg: &TrainConfig,
    iteration: usize,
    epoch: usize,
    member: Option<usize>,
) -> Result<Matrix> {
    let views: Vec<Example> = exec::map(cfg.exec, batch, |_, &i| {
        let ex = &labeled[i];
        let mut rng = streams::strong_augment(cfg.seed, iteration, epoch, ex.id, member);
        strong_augment(ex, policy, &mut rng)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    payload_matrix(views.iter().map(|e| &e.payload))
}

/// One pass over the labeled pool in shuffled minibatches.
///
/// Per batch: every member computes logits on the augmented inputs, the
/// averaged logits are softened into frozen targets, and each member takes
/// one Adam step on `CE + λ·KD`. A batch with any non-finite loss or
/// gradient is skipped; [`MAX_NONFINITE_BATCHES`] in a row abort training.
pub fn train_epoch(
    state: &mut TrainerState,
    pools: &DatasetPools,
    cfg: &TrainConfig,
    policies: &PolicySet,
    iteration: usize,
    epoch: usize,
) -> Result<EpochStats> {
    let labeled = pools.labeled();
    if labeled.is_empty() {
        return Err(Error::Config("labeled pool is empty".into()));
    }
    let weights = class_weights(&pools.labeled_counts())?;
    let lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs)?;
    let k = state.ensemble.k();
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    streams::shuffle(cfg.seed, iteration, epoch).shuffle(&mut order);

    let mut sums = vec![LossStats::default(); k];
    let mut seen = 0usize;
    let mut skipped = 0usize;
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let labels: Vec<usize> = batch
            .iter()
            .map(|&i| labeled[i].label.expect("labeled pool entries carry labels"))
            .collect();
        let inputs: Vec<Matrix> = if cfg.per_member_augmentation {
            (0..k)
                .map(|m| augmented_batch(labeled, batch, &policies.strong, cfg, iteration, epoch, Some(m)))
                .collect::<Result<_>>()?
        } else {
            vec![augmented_batch(
                labeled,
                batch,
                &policies.strong,
                cfg,
                iteration,
                epoch,
                None,
            )?]
        };

        let members = state.ensemble.members();
        let forwards = exec::map(cfg.exec, members, |m, model| {
            let x = &inputs[if cfg.per_member_augmentation { m } else { 0 }];
            let mut rng = streams::dropout(cfg.seed, iteration, epoch, b, m);
            model.forward(x, Mode::Train, &mut rng)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let (logits, caches): (Vec<Matrix>, Vec<_>) = forwards.into_iter().unzip();

        let step = if logits.iter().all(Matrix::is_finite) {
            let targets = soft_targets(&ensemble_logits(&logits)?, cfg.temperature)?;
            let results = exec::map_range(cfg.exec, k, |m| {
                let loss = combined_loss(&logits[m], &labels, &weights, &targets, cfg.lambda)?;
                let grads = members[m].backward(&caches[m], &loss.dlogits)?;
                Ok((loss, grads))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let finite = results
                .iter()
                .all(|(l, g)| l.total.is_finite() && g.values.iter().all(|v| v.is_finite()));
            finite.then_some(results)
        } else {
            None
        };

        let Some(results) = step else {
            skipped += 1;
            state.nonfinite_run += 1;
            warn!("iteration {iteration} epoch {epoch} batch {b}: non-finite loss, update skipped");
            if state.nonfinite_run >= MAX_NONFINITE_BATCHES {
                return Err(Error::Divergence {
                    message: format!(
                        "{MAX_NONFINITE_BATCHES} consecutive non-finite batches (iteration {iteration}, epoch {epoch}, batch {b})"
                    ),
                    checkpoint: None,
                });
            }
            continue;
        };
        state.nonfinite_run = 0;

        let n = batch.len() as f64;
        seen += batch.len();
        for (s, (l, _)) in sums.iter_mut().zip(&results) {
            s.ce += l.ce * n;
            s.kd += l.kd * n;
            s.total += l.total * n;
        }
        let mut jobs: Vec<_> = state
            .ensemble
            .members_mut()
            .iter_mut()
            .zip(state.optimizers.iter_mut())
            .zip(results.iter().map(|(_, g)| g))
            .collect();
        exec::map_mut(cfg.exec, &mut jobs, |_, ((model, opt), grads)| {
            adam_step(model.params_mut(), &grads.values, opt, lr, &cfg.adam)
        })
        .into_iter()
        .collect::<Result<()>>()?;
    }

    let denom = if seen == 0 { 1.0 } else { seen as f64 };
    let members = sums
        .into_iter()
        .map(|s| LossStats {
            ce: s.ce / denom,
            kd: s.kd / denom,
            total: s.total / denom,
        })
        .collect();
    Ok(EpochStats {
        iteration,
        epoch,
        learning_rate: lr,
        members,
        skipped_batches: skipped,
    })
}

/// Eval-mode logits of every member over `views`, in chunks.
pub(crate) fn member_logits_chunked(
    ensemble: &EnsembleState,
    views: &[Example],
    mode: ExecMode,
) -> Result<Vec<Matrix>> {
    let c = ensemble.num_classes();
    let mut acc: Vec<Vec<f64>> = vec![Vec::with_capacity(views.len() * c); ensemble.k()];
    for chunk in views.chunks(INFERENCE_CHUNK) {
        let x = payload_matrix(chunk.iter().map(|e| &e.payload))?;
        for (a, z) in acc.iter_mut().zip(ensemble.member_logits(&x, mode)?) {
            a.extend_from_slice(z.values());
        }
    }
    acc.into_iter()
        .enumerate()
        .map(|(k, v)| {
            Matrix::from_vec(views.len(), c, v).map_err(|_| Error::Divergence {
                message: format!("member {k} produced non-finite logits"),
                checkpoint: None,
            })
        })
        .collect()
}

pub(crate) fn ensemble_logits_chunked(ensemble: &EnsembleState, views: &[Example], mode: ExecMode) -> Result<Matrix> {
    ensemble_logits(&member_logits_chunked(ensemble, views, mode)?)
}

/// Metrics of the ensemble and of each member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ensemble: MetricsReport,
    pub members: Vec<MetricsReport>,
}

/// Evaluates on labeled examples through the deterministic eval transform.
pub fn evaluate(
    ensemble: &EnsembleState,
    examples: &[Example],
    eval: &AugmentationPolicy,
    mode: ExecMode,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::NoData("evaluation set is empty".into()));
    }
    let labels: Vec<usize> = examples
        .iter()
        .map(|e| {
            e.label
                .ok_or_else(|| Error::InvalidInput(format!("evaluation example {} has no label", e.id)))
        })
        .collect::<Result<_>>()?;
    let views: Vec<Example> = exec::map(mode, examples, |_, e| eval_transform(e, eval))
        .into_iter()
        .collect::<Result<_>>()?;
    let member_logits = member_logits_chunked(ensemble, &views, mode)?;
    let predict = |z: &Matrix| z.iter_rows().map(argmax).collect::<Vec<_>>();
    let c = ensemble.num_classes();
    let members = member_logits
        .iter()
        .map(|z| evaluate_predictions(&predict(z), &labels, c))
        .collect::<Result<_>>()?;
    let mean = ensemble_logits(&member_logits)?;
    Ok(EvalReport {
        ensemble: evaluate_predictions(&predict(&mean), &labels, c)?,
        members,
    })
}

/// Pseudo-labels admitted in one iteration, checked against the withheld
/// ground truth where it is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub iteration: usize,
    pub admitted: usize,
    pub admitted_per_class: Vec<usize>,
    /// Admitted examples whose withheld label is known.
    pub audited: usize,
    pub correct: usize,
    /// `correct / audited`, absent when nothing could be audited.
    pub precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epochs: Vec<EpochStats>,
    pub labeled_before: usize,
    pub labeled_after: usize,
    pub unlabeled_after: usize,
    pub validation: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub iteration: usize,
    pub validation: EvalReport,
    pub ensemble: EnsembleState,
}

#[derive(Debug, Clone)]
pub struct SslOutcome {
    /// Ensemble after the last iteration.
    pub ensemble: EnsembleState,
    /// Ensemble at the end of the iteration with the best validation
    /// balanced accuracy (earliest on ties); absent without validation data.
    pub best: Option<BestSnapshot>,
    pub history: Vec<IterationRecord>,
    pub audit: Vec<AuditEntry>,
    pub pools: DatasetPools,
    pub normalizer: Normalizer,
    pub policies: PolicySet,
}

impl SslOutcome {
    /// The best-validation snapshot if there is one, else the final ensemble.
    pub fn selected(&self) -> &EnsembleState {
        self.best.as_ref().map_or(&self.ensemble, |b| &b.ensemble)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where to write a checkpoint if training diverges.
    pub diagnostic_dir: Option<PathBuf>,
}

pub fn run_ssl(cfg: &TrainConfig, pools: DatasetPools, validation: &[Example]) -> Result<SslOutcome> {
    run_ssl_with(cfg, pools, validation, &RunOptions::default())
}

/// Full self-training run. Normalization statistics are fitted once on the
/// payloads of both pools; labels are not used for that.
pub fn run_ssl_with(
    cfg: &TrainConfig,
    pools: DatasetPools,
    validation: &[Example],
    options: &RunOptions,
) -> Result<SslOutcome> {
    let c = pools.num_classes();
    cfg.validate(c)?;
    if pools.labeled().is_empty() {
        return Err(Error::Config("labeled pool is empty".into()));
    }
    let all: Vec<Example> = pools
        .labeled()
        .iter()
        .cloned()
        .chain(pools.unlabeled().iter().map(|u| u.example().clone()))
        .collect();
    let normalizer = fit_normalizer(&all)?;
    drop(all);
    let policies = cfg.augment.policies(&normalizer)?;
    let input_dim = policies.eval.output_len(&pools.labeled()[0].payload);
    let spec = cfg.model_spec(input_dim, c);
    let mut state = TrainerState::new(&spec, cfg.ensemble_size, cfg.seed)?;
    let mut pools = pools;
    let total = pools.total();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut audit = Vec::with_capacity(cfg.iterations);
    let mut best: Option<BestSnapshot> = None;

    for t in 1..=cfg.iterations {
        if t > 1 && cfg.reinitialize_each_iteration {
            state = TrainerState::new(&spec, cfg.ensemble_size, streams::reinit_seed(cfg.seed, t))?;
        }
        let labeled_before = pools.labeled().len();
        let mut epochs = Vec::with_capacity(cfg.epochs);
        for m in 0..cfg.epochs {
            match train_epoch(&mut state, &pools, cfg, &policies, t, m) {
                Ok(stats) => {
                    debug!("iteration {t} epoch {m}: {:?}", stats.members);
                    epochs.push(stats);
                }
                Err(Error::Divergence { message, .. }) => {
                    let checkpoint = diagnostic(options, &state, cfg, &normalizer, t, Some(m));
                    return Err(Error::Divergence { message, checkpoint });
                }
                Err(e) => return Err(e),
            }
        }
        // Skipped batches can still leave a member with non-finite weights
        // when the run ends before the consecutive-failure limit.
        if let Some(k) = state
            .ensemble
            .members()
            .iter()
            .position(|m| !m.params().iter().all(|p| p.is_finite()))
        {
            let checkpoint = diagnostic(options, &state, cfg, &normalizer, t, None);
            return Err(Error::Divergence {
                message: format!("member {k} has non-finite parameters after iteration {t}"),
                checkpoint,
            });
        }

        let with_checkpoint = |e: Error| match e {
            Error::Divergence { message, .. } => Error::Divergence {
                message: format!("{message} after iteration {t}"),
                checkpoint: diagnostic(options, &state, cfg, &normalizer, t, None),
            },
            e => e,
        };
        let records = pseudo_label(
            &state.ensemble,
            pools.unlabeled(),
            cfg.threshold,
            &policies.weak,
            cfg.seed,
            t,
            cfg.exec,
        )
        .map_err(with_checkpoint)?;
        audit.push(audit_records(&pools, &records, t));
        pools = expand_dataset(pools, &records)?;
        if pools.total() != total || pools.labeled().len() < labeled_before {
            return Err(Error::InvalidState("pool conservation violated".into()));
        }

        let report = if validation.is_empty() {
            None
        } else {
            Some(evaluate(&state.ensemble, validation, &policies.eval, cfg.exec).map_err(with_checkpoint)?)
        };
        if let Some(r) = &report {
            info!(
                "iteration {t}: admitted {}, |D_L| = {}, validation BAcc {:.4}",
                records.len(),
                pools.labeled().len(),
                r.ensemble.bacc
            );
            if best
                .as_ref()
                .is_none_or(|b| r.ensemble.bacc > b.validation.ensemble.bacc)
            {
                best = Some(BestSnapshot {
                    iteration: t,
                    validation: r.clone(),
                    ensemble: state.ensemble.clone(),
                });
            }
        }
        history.push(IterationRecord {
            iteration: t,
            epochs,
            labeled_before,
            labeled_after: pools.labeled().len(),
            unlabeled_after: pools.unlabeled().len(),
            validation: report,
        });
    }

    Ok(SslOutcome {
        ensemble: state.ensemble,
        best,
        history,
        audit,
        pools,
        normalizer,
        policies,
    })
}

fn diagnostic(
    options: &RunOptions,
    state: &TrainerState,
    cfg: &TrainConfig,
    normalizer: &Normalizer,
    iteration: usize,
    epoch: Option<usize>,
) -> Option<PathBuf> {
    let dir = options.diagnostic_dir.as_ref()?;
    let name = match epoch {
        Some(m) => format!("diverged-iter{iteration}-epoch{m}.ckpt"),
        None => format!("diverged-iter{iteration}.ckpt"),
    };
    let path = dir.join(name);
    let ctx = CheckpointContext {
        config: cfg.clone(),
        normalizer: Some(normalizer.clone()),
        iteration,
        epoch,
        validation: None,
    };
    save_checkpoint(&state.ensemble, &ctx, &path).ok().map(|_| path)
}

fn audit_records(pools: &DatasetPools, records: &[PseudoLabelRecord], iteration: usize) -> AuditEntry {
    let truth: HashMap<u64, Option<usize>> = pools.unlabeled().iter().map(|u| (u.id(), u.audit_label())).collect();
    let mut per_class = vec![0; pools.num_classes()];
    let (mut audited, mut correct) = (0, 0);
    for r in records {
        per_class[r.label] += 1;
        if let Some(Some(y)) = truth.get(&r.id) {
            audited += 1;
            correct += usize::from(*y == r.label);
        }
    }
    AuditEntry {
        iteration,
        admitted: records.len(),
        admitted_per_class: per_class,
        audited,
        correct,
        precision: (audited > 0).then(|| correct as f64 / audited as f64),
    }
}
