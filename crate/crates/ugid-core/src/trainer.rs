//! Training procedures: cross-entropy pretraining of the reference model,
//! and the counterfactual fine-tuning loop that dispatches between target
//! and anchor batches, freezes everything outside the target layers, and
//! applies plain gradient-descent updates.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, ValueId};
use crate::data::{Corpus, CounterfactualPair, PairKind};
use crate::diagnostics;
use crate::graph_loss::{edge_loss_on_tape, node_loss_on_tape, GraphLossError, SaliencySource};
use crate::model::{Model, ModelError, Trace, Trainability};
use crate::rng::Rng;
use crate::stability_loss::{
    logit_loss_on_tape, masked_kl_side_on_tape, topk_loss_on_tape, SensitiveMask,
    StabilityLossError,
};
use crate::TokenId;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("student and teacher dimensions differ")]
    ConfigMismatch,
    #[error("dataset must contain both target and anchor pairs")]
    MissingPairKind,
    #[error("pronoun at position 0 has no preceding context")]
    PronounAtStart,
    #[error("non-finite loss at step {step}; components {bundle:?}")]
    NonFiniteLoss { step: usize, bundle: LossBundle },
    #[error("training diverged at step {step}: {source}")]
    Diverged { step: usize, source: Box<TrainError> },
    #[error("perplexity target {target:.3} not reached after {steps} steps (got {achieved:.3})")]
    PretrainTargetNotReached { target: f64, steps: usize, achieved: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    GraphLoss(#[from] GraphLossError),
    #[error(transparent)]
    StabilityLoss(#[from] StabilityLossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Diagnostics(#[from] crate::diagnostics::DiagnosticsError),
}

/// Hyperparameters of the counterfactual fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Blocks whose parameters update and on which the structural losses act.
    pub target_layers: BTreeSet<usize>,
    pub edge_weight: f64,
    pub node_weight: f64,
    pub topk_weight: f64,
    pub kl_weight: f64,
    pub anchor_weight: f64,
    pub top_k: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip applied before the SGD update; 0 disables.
    /// The update rule itself stays plain descent.
    pub grad_clip: f64,
    pub steps: usize,
    /// Fraction of steps that draw an anchor pair.
    pub anchor_mix: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults at toy scale: balanced structural supervision (20/20),
    /// unit stability weights, anchor weight 10, middle-third target band.
    pub fn toy_default(seed: u64) -> Self {
        TrainConfig {
            target_layers: [2, 3].into(),
            edge_weight: 20.0,
            node_weight: 20.0,
            topk_weight: 1.0,
            kl_weight: 1.0,
            anchor_weight: 10.0,
            top_k: 5,
            learning_rate: 0.03,
            grad_clip: 0.0,
            steps: 2000,
            anchor_mix: 1.0 / 3.0,
            seed,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<(), TrainError> {
        if self.target_layers.is_empty() {
            return Err(TrainError::InvalidConfig("target_layers is empty".into()));
        }
        if let Some(&l) = self.target_layers.iter().find(|&&l| l >= n_layers) {
            return Err(TrainError::InvalidConfig(format!(
                "target layer {l} out of range for {n_layers} layers"
            )));
        }
        for (name, w) in [
            ("edge_weight", self.edge_weight),
            ("node_weight", self.node_weight),
            ("topk_weight", self.topk_weight),
            ("kl_weight", self.kl_weight),
            ("anchor_weight", self.anchor_weight),
        ] {
            if !(w >= 0.0) {
                return Err(TrainError::InvalidConfig(format!("{name} must be >= 0, got {w}")));
            }
        }
        if !(self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if self.top_k == 0 {
            return Err(TrainError::InvalidConfig("top_k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.anchor_mix) {
            return Err(TrainError::InvalidConfig("anchor_mix must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Scalar loss components of one batch plus their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBundle {
    pub edge: f64,
    pub node: f64,
    pub logit: f64,
    pub topk: f64,
    pub kl: f64,
    pub anchor: f64,
    pub total: f64,
}

impl LossBundle {
    /// Recombine the components under a config; the invariant is that this
    /// reproduces `total` exactly for the batch kind that produced it.
    pub fn recombine(&self, kind: PairKind, cfg: &TrainConfig) -> f64 {
        match kind {
            PairKind::Target => {
                cfg.edge_weight * self.edge
                    + cfg.node_weight * self.node
                    + self.logit
                    + cfg.topk_weight * self.topk
                    + cfg.kl_weight * self.kl
            }
            PairKind::Anchor => cfg.anchor_weight * self.anchor,
        }
    }
}

/// One metric-log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub kind: PairKind,
    pub edge: f64,
    pub node: f64,
    pub logit: f64,
    pub topk: f64,
    pub kl: f64,
    pub anchor: f64,
    pub total: f64,
}

impl StepRecord {
    pub fn bundle(&self) -> LossBundle {
        LossBundle {
            edge: self.edge,
            node: self.node,
            logit: self.logit,
            topk: self.topk,
            kl: self.kl,
            anchor: self.anchor,
            total: self.total,
        }
    }
}

/// Light diagnostic probe taken during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSnapshot {
    pub step: usize,
    pub bias_id_mean: f64,
    pub anchor_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<TrainSnapshot>,
}

/// Which parameters a run may update, by canonical name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPartition {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl ParamPartition {
    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }
}

/// Trainable set = every parameter of the blocks in the target set.
/// Embeddings, other blocks, the final norm and the tied unembedding are
/// all frozen.
pub fn freeze_non_target(model: &Model, target_layers: &BTreeSet<usize>) -> ParamPartition {
    let mut trainable = BTreeSet::new();
    let mut frozen = BTreeSet::new();
    for (name, _) in model.params.named() {
        let in_target = target_layers
            .iter()
            .any(|l| name.starts_with(&format!("blocks.{l}.")));
        if in_target {
            trainable.insert(name);
        } else {
            frozen.insert(name);
        }
    }
    ParamPartition { trainable, frozen }
}

struct TeacherSides {
    x: Trace,
    xp: Trace,
}

fn teacher_sides(teacher: &Model, pair: &CounterfactualPair) -> Result<TeacherSides, TrainError> {
    Ok(TeacherSides {
        x: teacher.forward_with_trace(&pair.x)?,
        xp: teacher.forward_with_trace(&pair.xp)?,
    })
}

/// Assemble the batch loss on a tape. Returns the total-loss node and the
/// component values.
fn batch_loss_on_tape(
    tape: &mut Tape,
    student: &Model,
    vars: &crate::model::ModelVars,
    teacher: &TeacherSides,
    pair: &CounterfactualPair,
    cfg: &TrainConfig,
) -> Result<(ValueId, LossBundle), TrainError> {
    let trace_x = student.forward_on_tape(tape, vars, &pair.x, None)?;
    let trace_xp = student.forward_on_tape(tape, vars, &pair.xp, None)?;

    let mut bundle = LossBundle::default();
    let total = match pair.kind {
        PairKind::Target => {
            if pair.pronoun_pos == 0 {
                return Err(TrainError::PronounAtStart);
            }
            let saliency_pos = pair.saliency_pos();
            let edge = edge_loss_on_tape(
                tape,
                &trace_x.attn,
                &trace_xp.attn,
                saliency_pos,
                &cfg.target_layers,
                SaliencySource::Live,
            )?;
            let node = node_loss_on_tape(
                tape,
                &trace_x.attn,
                &trace_xp.attn,
                &trace_x.hidden,
                &trace_xp.hidden,
                saliency_pos,
                &cfg.target_layers,
                SaliencySource::Live,
            )?;
            let slot = pair.pronoun_pos - 1;
            let logit = logit_loss_on_tape(
                tape,
                trace_x.logits,
                trace_xp.logits,
                slot,
                slot,
                crate::stability_loss::PronounPair {
                    male: pair.x[pair.pronoun_pos],
                    female: pair.xp[pair.pronoun_pos],
                },
            )?;
            let topk_x = topk_loss_on_tape(tape, &trace_x.attn, &teacher.x, cfg.top_k)?;
            let topk_xp = topk_loss_on_tape(tape, &trace_xp.attn, &teacher.xp, cfg.top_k)?;
            let topk_sum = tape.add(topk_x, topk_xp);
            let topk = tape.scale(topk_sum, 0.5);
            let mask = pair.sensitive_mask();
            let kl_x = masked_kl_side_on_tape(tape, trace_x.logits, &teacher.x.logits, &mask)?;
            let kl_xp = masked_kl_side_on_tape(tape, trace_xp.logits, &teacher.xp.logits, &mask)?;
            let kl_sum = tape.add(kl_x, kl_xp);
            let kl = tape.scale(kl_sum, 0.5);

            bundle.edge = tape.value(edge).data()[0];
            bundle.node = tape.value(node).data()[0];
            bundle.logit = tape.value(logit).data()[0];
            bundle.topk = tape.value(topk).data()[0];
            bundle.kl = tape.value(kl).data()[0];

            let we = tape.scale(edge, cfg.edge_weight);
            let wn = tape.scale(node, cfg.node_weight);
            let wt = tape.scale(topk, cfg.topk_weight);
            let wk = tape.scale(kl, cfg.kl_weight);
            let s1 = tape.add(we, wn);
            let s2 = tape.add(s1, logit);
            let s3 = tape.add(s2, wt);
            tape.add(s3, wk)
        }
        PairKind::Anchor => {
            let zeros_x = SensitiveMask::zeros(pair.x.len());
            let zeros_xp = SensitiveMask::zeros(pair.xp.len());
            let kl_x = masked_kl_side_on_tape(tape, trace_x.logits, &teacher.x.logits, &zeros_x)?;
            let kl_xp =
                masked_kl_side_on_tape(tape, trace_xp.logits, &teacher.xp.logits, &zeros_xp)?;
            let kl_sum = tape.add(kl_x, kl_xp);
            let anchor = tape.scale(kl_sum, 0.5);
            bundle.anchor = tape.value(anchor).data()[0];
            tape.scale(anchor, cfg.anchor_weight)
        }
    };
    bundle.total = tape.value(total).data()[0];
    Ok((total, bundle))
}

/// Component values of one batch against a frozen student, without updates.
pub fn total_loss_for_batch(
    student: &Model,
    teacher: &Model,
    pair: &CounterfactualPair,
    cfg: &TrainConfig,
) -> Result<LossBundle, TrainError> {
    cfg.validate(student.config.n_layers)?;
    let sides = teacher_sides(teacher, pair)?;
    let mut tape = Tape::new();
    let vars = student.register(&mut tape, Trainability::Frozen);
    let (_, bundle) = batch_loss_on_tape(&mut tape, student, &vars, &sides, pair, cfg)?;
    Ok(bundle)
}

fn same_dims(a: &crate::model::ModelConfig, b: &crate::model::ModelConfig) -> bool {
    a.vocab_size == b.vocab_size
        && a.d_model == b.d_model
        && a.n_layers == b.n_layers
        && a.n_heads == b.n_heads
        && a.d_ff == b.d_ff
        && a.max_seq_len == b.max_seq_len
}

const SNAPSHOT_EVERY: usize = 250;

/// The counterfactual fine-tuning loop.
///
/// One pair per step; anchors are interleaved at the configured frequency
/// via a deterministic accumulator. Teacher traces never change, so they
/// are computed once up front. Updates are plain `θ ← θ − η ∇L` on the
/// target-layer parameters only.
pub fn train(
    student: &mut Model,
    teacher: &Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate(student.config.n_layers)?;
    if !same_dims(&student.config, &teacher.config) {
        return Err(TrainError::ConfigMismatch);
    }
    if corpus.target_pairs.is_empty() || corpus.anchor_pairs.is_empty() {
        return Err(TrainError::MissingPairKind);
    }

    let rng = Rng::new(cfg.seed);
    let shuffled = |pairs: &[CounterfactualPair], label: &str| -> Vec<CounterfactualPair> {
        let mut order: Vec<CounterfactualPair> = pairs.to_vec();
        let mut r = rng.fork(label);
        for i in (1..order.len()).rev() {
            order.swap(i, r.index(i + 1));
        }
        order
    };
    let targets = shuffled(&corpus.target_pairs, "target-order");
    let anchors = shuffled(&corpus.anchor_pairs, "anchor-order");

    let teacher_targets: Result<Vec<TeacherSides>, TrainError> =
        targets.iter().map(|p| teacher_sides(teacher, p)).collect();
    let teacher_targets = teacher_targets?;
    let teacher_anchors: Result<Vec<TeacherSides>, TrainError> =
        anchors.iter().map(|p| teacher_sides(teacher, p)).collect();
    let teacher_anchors = teacher_anchors?;

    let partition = freeze_non_target(student, &cfg.target_layers);

    let mut records = Vec::with_capacity(cfg.steps);
    let mut snapshots = Vec::new();
    let mut anchor_acc = 0.0f64;
    let mut target_cursor = 0usize;
    let mut anchor_cursor = 0usize;

    for step in 0..cfg.steps {
        anchor_acc += cfg.anchor_mix;
        let draw_anchor = anchor_acc >= 1.0;
        if draw_anchor {
            anchor_acc -= 1.0;
        }
        let (pair, sides) = if draw_anchor {
            let i = anchor_cursor % anchors.len();
            anchor_cursor += 1;
            (&anchors[i], &teacher_anchors[i])
        } else {
            let i = target_cursor % targets.len();
            target_cursor += 1;
            (&targets[i], &teacher_targets[i])
        };

        let mut tape = Tape::new();
        let vars = student.register(&mut tape, Trainability::Blocks(&cfg.target_layers));
        let (total, bundle) = batch_loss_on_tape(&mut tape, student, &vars, sides, pair, cfg)
            .map_err(|e| TrainError::Diverged { step, source: Box::new(e) })?;
        if !bundle.total.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, bundle });
        }
        tape.backward(total)
            .map_err(|e| TrainError::Diverged { step, source: Box::new(e.into()) })?;

        let var_ids = vars.named();
        let mut clip_scale = 1.0;
        if cfg.grad_clip > 0.0 {
            let mut norm_sq = 0.0;
            for (name, id) in &var_ids {
                if partition.is_trainable(name) {
                    if let Some(grad) = tape.grad(*id) {
                        norm_sq += grad.iter().map(|g| g * g).sum::<f64>();
                    }
                }
            }
            let norm = norm_sq.sqrt();
            if std::env::var("UGID_TRACE_GRAD").is_ok() && step % 100 == 0 {
                eprintln!("step {step} grad_norm {norm:.3}");
            }
            if norm > cfg.grad_clip {
                clip_scale = cfg.grad_clip / norm;
            }
        }
        for ((name, tensor), (var_name, id)) in student.params.named_mut().into_iter().zip(var_ids)
        {
            debug_assert_eq!(name, var_name);
            if !partition.is_trainable(&name) {
                continue;
            }
            if let Some(grad) = tape.grad(id) {
                for (w, g) in tensor.data_mut().iter_mut().zip(grad) {
                    *w -= cfg.learning_rate * clip_scale * g;
                }
            }
        }

        records.push(StepRecord {
            step,
            kind: pair.kind,
            edge: bundle.edge,
            node: bundle.node,
            logit: bundle.logit,
            topk: bundle.topk,
            kl: bundle.kl,
            anchor: bundle.anchor,
            total: bundle.total,
        });

        if (step + 1) % SNAPSHOT_EVERY == 0 || step + 1 == cfg.steps {
            let (bias_id_mean, _) =
                diagnostics::bias_ratio_eval(student, &corpus.id_templates, corpus.pronouns)?;
            let (anchor_accuracy, _) = diagnostics::anchor_eval(student, &corpus.anchor_prompts)?;
            snapshots.push(TrainSnapshot { step: step + 1, bias_id_mean, anchor_accuracy });
        }
    }

    Ok(TrainOutcome { records, snapshots })
}

// ── Pretraining ──────────────────────────────────────────────────────

/// Pretraining hyperparameters for the reference model. Adam is used here
/// (the fine-tuning loop stays plain SGD).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    /// Sentences whose gradients are averaged into one update.
    pub batch_size: usize,
    /// Decoupled weight decay on matrix weights and embeddings (norm gains
    /// and biases are exempt). Keeps logits soft and the landscape benign.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub max_steps: usize,
    /// Run at least this long even if the perplexity target is already met;
    /// the pronoun conditionals sharpen well after raw perplexity converges.
    pub min_steps: usize,
    /// After this step the learning rate decays linearly toward a tenth of
    /// its base value at `max_steps`, so runs end settled rather than
    /// mid-oscillation.
    pub decay_from: usize,
    /// Stop once corpus perplexity falls below this value.
    pub target_perplexity: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn toy_default(vocab_size: usize, seed: u64) -> Self {
        PretrainConfig {
            learning_rate: 4e-3,
            batch_size: 8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            max_steps: 2400,
            min_steps: 2400,
            decay_from: 1200,
            target_perplexity: vocab_size as f64 / 4.0,
            eval_every: 300,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub steps_run: usize,
    pub final_perplexity: f64,
    pub perplexity_log: Vec<(usize, f64)>,
}

/// Next-token cross-entropy training until the corpus perplexity target is
/// reached. Errors if the budget runs out first.
pub fn pretrain(
    model: &mut Model,
    corpus: &[Vec<TokenId>],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::InvalidConfig("pretraining corpus is empty".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut r = Rng::new(cfg.seed).fork("pretrain-order");
    for i in (1..order.len()).rev() {
        order.swap(i, r.index(i + 1));
    }

    // Adam state per parameter, in canonical order.
    let sizes: Vec<usize> = model.params.named().iter().map(|(_, t)| t.numel()).collect();
    let mut m: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut v: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    let batch = cfg.batch_size.max(1);
    let mut log = Vec::new();
    let mut steps_run = 0usize;
    let mut cursor = 0usize;
    for step in 0..cfg.max_steps {
        // Mean gradient over the batch, accumulated in canonical order.
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        for _ in 0..batch {
            let seq = &corpus[order[cursor % order.len()]];
            cursor += 1;
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, Trainability::All);
            let trace = model.forward_on_tape(&mut tape, &vars, seq, None)?;
            let ls = tape.log_softmax_rows(trace.logits)?;
            let vocab = model.config.vocab_size;
            let mut nll: Option<ValueId> = None;
            for (pos, &target) in seq.iter().enumerate().skip(1) {
                let term = tape.pick(ls, (pos - 1) * vocab + target);
                nll = Some(match nll {
                    Some(acc) => tape.add(acc, term),
                    None => term,
                });
            }
            let total = tape
                .scale(nll.expect("sequence has >= 2 tokens"), -1.0 / (seq.len() - 1) as f64);
            tape.backward(total)?;
            for (acc, (_, id)) in grads.iter_mut().zip(vars.named()) {
                if let Some(g) = tape.grad(id) {
                    for (a, gv) in acc.iter_mut().zip(g) {
                        *a += gv / batch as f64;
                    }
                }
            }
        }

        if cfg.grad_clip > 0.0 {
            let norm: f64 =
                grads.iter().flat_map(|g| g.iter().map(|v| v * v)).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let scale = cfg.grad_clip / norm;
                for g in &mut grads {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
            }
        }

        let lr = if step >= cfg.decay_from && cfg.max_steps > cfg.decay_from {
            let progress =
                (step - cfg.decay_from) as f64 / (cfg.max_steps - cfg.decay_from) as f64;
            cfg.learning_rate * (1.0 - 0.9 * progress)
        } else {
            cfg.learning_rate
        };

        let t = (step + 1) as f64;
        let bias1 = 1.0 - beta1.powf(t);
        let bias2 = 1.0 - beta2.powf(t);
        for (idx, (name, tensor)) in model.params.named_mut().into_iter().enumerate() {
            let decays = cfg.weight_decay > 0.0
                && !name.contains("ln1")
                && !name.contains("ln2")
                && !name.contains("final_norm")
                && !name.contains(".b");
            let (ms, vs) = (&mut m[idx], &mut v[idx]);
            for (j, g) in grads[idx].iter().enumerate() {
                ms[j] = beta1 * ms[j] + (1.0 - beta1) * g;
                vs[j] = beta2 * vs[j] + (1.0 - beta2) * g * g;
                let mhat = ms[j] / bias1;
                let vhat = vs[j] / bias2;
                let w = &mut tensor.data_mut()[j];
                if decays {
                    *w -= lr * cfg.weight_decay * *w;
                }
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        steps_run = step + 1;

        if steps_run % cfg.eval_every == 0 || steps_run == cfg.max_steps {
            let ppl = model.perplexity(corpus)?;
            log.push((steps_run, ppl));
            if ppl < cfg.target_perplexity && steps_run >= cfg.min_steps {
                return Ok(PretrainOutcome {
                    steps_run,
                    final_perplexity: ppl,
                    perplexity_log: log,
                });
            }
        }
    }
    let achieved = model.perplexity(corpus)?;
    Err(TrainError::PretrainTargetNotReached {
        target: cfg.target_perplexity,
        steps: steps_run,
        achieved,
    })
}
