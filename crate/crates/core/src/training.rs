//! Training loops for the classifier and the interpretation network.
//!
//! The interpretation network minimizes the expected number of unmasked
//! patches subject to `KL <= m`, relaxed to a Lagrangian whose multiplier is
//! updated by projected gradient ascent.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TensorSet;
use crate::divergence::kl_rows;
use crate::hardconcrete::{self, uniform_noise};
use crate::maskgen::{self, gate_logits, make_mask, GateConfig, GateStack, MaskMode};
use crate::numerics::{Fault, Gradients, Param, Scalar, Tape, Tensor};
use crate::vit::{self, Binding, Masking, ViT, ViTConfig};
use crate::{Error, Result};

/// Adam with optional decoupled weight decay on matrices.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            moments: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn with_weight_decay(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::default()
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Param<T>], grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for p in params.iter_mut() {
            let Some(g) = grads.param(&p.name) else { continue };
            let n = p.value.numel();
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let decay = if p.value.ndim() >= 2 { self.weight_decay } else { 0.0 };
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i].as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                let wf = w.as_f64();
                *w = T::of(wf - lr * (update + decay * wf));
            }
        }
    }
}

/// Slow weights pulled toward the fast ones every `k` inner steps.
#[derive(Clone, Debug)]
pub struct LookAhead {
    pub inner: Adam,
    pub k: usize,
    pub alpha: f64,
    steps: usize,
    slow: HashMap<String, Vec<f64>>,
}

impl LookAhead {
    pub fn new(inner: Adam, k: usize, alpha: f64) -> Self {
        Self {
            inner,
            k,
            alpha,
            steps: 0,
            slow: HashMap::new(),
        }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Param<T>], grads: &Gradients<T>, lr: f64) {
        for p in params.iter() {
            self.slow
                .entry(p.name.clone())
                .or_insert_with(|| p.value.to_f64_vec());
        }
        self.inner.step(params, grads, lr);
        self.steps += 1;
        if self.steps % self.k != 0 {
            return;
        }
        for p in params.iter_mut() {
            let slow = self.slow.get_mut(&p.name).expect("slow weights seeded above");
            for (s, w) in slow.iter_mut().zip(p.value.data_mut()) {
                *s += self.alpha * (w.as_f64() - *s);
                *w = T::of(*s);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Guardrails {
    pub patience_steps: usize,
    /// (a) multiplier below this while nearly everything is masked.
    pub whole_lambda: f64,
    pub whole_fraction: f64,
    /// (b) KL above `kl_factor * margin`.
    pub kl_factor: f64,
    /// (c) masked fraction below this for a whole epoch ...
    pub nothing_fraction: f64,
    /// ... once this many epochs have completed.
    pub nothing_after_epochs: usize,
}

impl Default for Guardrails {
    fn default() -> Self {
        Self {
            patience_steps: 100,
            whole_lambda: 1e-3,
            whole_fraction: 0.95,
            kl_factor: 50.0,
            nothing_fraction: 0.01,
            nothing_after_epochs: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_gates: f64,
    pub lr_baseline: f64,
    pub lr_lambda: f64,
    pub margin: f64,
    pub lambda_init: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    pub seed: u64,
    pub guardrails: Guardrails,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            // 2e-5 leaves the gates nearly static over a few thousand steps
            lr_gates: 2e-3,
            lr_baseline: 1e-3,
            lr_lambda: 0.3,
            margin: 0.1,
            lambda_init: 20.0,
            epochs: 100,
            batch_size: 16,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            seed: 0,
            guardrails: Guardrails::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.lr_gates > 0.0 && self.lr_baseline > 0.0) {
            return bad("gate and baseline learning rates must be positive");
        }
        // zero is allowed for the multiplier rate: it freezes lambda at its initial value
        if !(self.lr_lambda >= 0.0) {
            return bad("lr_lambda must be non-negative");
        }
        if !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if !(self.lambda_init >= 0.0) {
            return bad("lambda_init must be non-negative");
        }
        if !(self.lookahead_alpha > 0.0 && self.lookahead_alpha <= 1.0) || self.lookahead_k == 0 {
            return bad("lookahead needs k >= 1 and alpha in (0, 1]");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l0: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l0: f64,
    pub kl: f64,
    /// Multiplier used for this step's loss.
    pub lambda: f64,
    pub masked_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LagrangianState {
    pub lambda: f64,
    pub history: Vec<StepRecord>,
}

impl LagrangianState {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            history: Vec::new(),
        }
    }

    /// Projected ascent: `lambda <- max(0, lambda + lr * (kl - m))`.
    pub fn update(&mut self, kl: f64, margin: f64, lr: f64) {
        self.lambda = (self.lambda + lr * (kl - margin)).max(0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureMode {
    MaskingWholeImage,
    KlRunaway,
    MasksNothing,
}

impl fmt::Display for FailureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureMode::MaskingWholeImage => "masking the whole image",
            FailureMode::KlRunaway => "divergence far above the margin",
            FailureMode::MasksNothing => "will not mask anything at all",
        })
    }
}

/// A guardrail tripped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("training diverged at step {step}: {mode}")]
pub struct Divergence {
    pub mode: FailureMode,
    pub step: usize,
    /// The most recent step records, oldest first.
    pub history: Vec<StepRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_kl: f64,
    pub mean_masked_fraction: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,l0,kl,lambda,masked_fraction\n");
        for r in &self.steps {
            writeln!(out, "{},{},{},{},{}", r.step, r.l0, r.kl, r.lambda, r.masked_fraction).unwrap();
        }
        out
    }
}

/// The frozen model's unmasked pass over a batch.
#[derive(Clone, Debug)]
pub struct Reference<T: Scalar> {
    pub patches: Tensor<T>,
    pub hbar0: Tensor<T>,
    pub hidden: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> Reference<T> {
    pub fn compute(vit: &ViT<T>, images: &Tensor<T>) -> Result<Self> {
        let patches = vit::patchify_batch(images, &vit.config)?;
        let tape = Tape::new();
        let trace = vit.trace_on(&tape, tape.constant(patches.clone()), None, Binding::Frozen)?;
        Ok(Self {
            patches,
            hbar0: trace.hbar0.value(),
            hidden: trace.hidden.iter().map(|h| h.value()).collect(),
            logits: trace.logits.value(),
        })
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            patches: self.patches.select_rows(indices)?,
            hbar0: self.hbar0.select_rows(indices)?,
            hidden: self
                .hidden
                .iter()
                .map(|h| h.select_rows(indices))
                .collect::<Result<_, _>>()?,
            logits: self.logits.select_rows(indices)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.logits.shape()[0]
    }
}

/// Reference passes over a whole set, computed in chunks.
pub fn reference_for_set(vit: &ViT<f32>, set: &TensorSet, chunk: usize) -> Result<Reference<f32>> {
    let mut parts = Vec::new();
    let idx: Vec<usize> = (0..set.len()).collect();
    for c in idx.chunks(chunk.max(1)) {
        parts.push(Reference::compute(vit, &set.gather(c)?)?);
    }
    let cat = |f: &dyn Fn(&Reference<f32>) -> &Tensor<f32>| -> Result<Tensor<f32>> {
        let mut shape = f(&parts[0]).shape().to_vec();
        shape[0] = set.len();
        let data = parts.iter().flat_map(|p| f(p).data().iter().copied()).collect();
        Ok(Tensor::new(&shape, data)?)
    };
    let layers = parts[0].hidden.len();
    Ok(Reference {
        patches: cat(&|p| &p.patches)?,
        hbar0: cat(&|p| &p.hbar0)?,
        hidden: (0..layers).map(|l| cat(&|p| &p.hidden[l])).collect::<Result<_>>()?,
        logits: cat(&|p| &p.logits)?,
    })
}

/// Loss on the tape plus its scalar parts and the gate logits used.
pub struct DiffMaskLoss<'t, T: Scalar> {
    pub total: crate::numerics::Var<'t, T>,
    pub breakdown: LossBreakdown,
    pub gate_logits: Vec<Tensor<T>>,
}

/// `l0 + lambda * (kl - m)` for one batch with training-mode masks.
///
/// `l0` is the expected number of open gates summed over gates and patches
/// and averaged over the batch; `kl` is the batch mean of `KL(y || y_hat)`.
pub fn diffmask_loss<'t, T: Scalar>(
    tape: &'t Tape<T>,
    vit: &ViT<T>,
    stack: &GateStack<T>,
    reference: &Reference<T>,
    noise: &[Tensor<T>],
    lambda: f64,
    margin: f64,
) -> Result<DiffMaskLoss<'t, T>> {
    let batch = reference.batch_size();
    let hbar0 = tape.constant(reference.hbar0.clone());
    let hidden: Vec<_> = reference.hidden.iter().map(|h| tape.constant(h.clone())).collect();
    let u = gate_logits(hbar0, &hidden, stack, Binding::Trainable)?;
    let hc = &stack.config.hc;
    let mask = make_mask(&u, MaskMode::Train, Some(noise), hc)?;
    let masked = vit.trace_on(
        tape,
        tape.constant(reference.patches.clone()),
        Some(Masking {
            z: mask.z,
            baseline: tape.param(&stack.baseline),
        }),
        Binding::Frozen,
    )?;
    let mut l0 = hardconcrete::expected_l0(u[0], hc)?;
    for &row in &u[1..] {
        l0 = l0.add(hardconcrete::expected_l0(row, hc)?)?;
    }
    let l0 = l0.scale(1.0 / batch as f64)?;
    let kl = kl_rows(&reference.logits, masked.logits)?.mean()?;
    let total = l0.add(kl.affine(lambda, -lambda * margin)?)?;
    Ok(DiffMaskLoss {
        breakdown: LossBreakdown {
            l0: l0.item().as_f64(),
            kl: kl.item().as_f64(),
            total: total.item().as_f64(),
        },
        gate_logits: u.iter().map(|v| v.value()).collect(),
        total,
    })
}

/// One `[B, N]` noise tensor per gate.
pub fn draw_noise<T: Scalar>(rng: &mut ChaCha8Rng, gates: usize, batch: usize, n: usize) -> Vec<Tensor<T>> {
    (0..gates).map(|_| uniform_noise(rng, &[batch, n])).collect()
}

/// Optimizer state for the two parameter groups.
pub struct DiffMaskOptimizer {
    pub gates: LookAhead,
    pub baseline: LookAhead,
}

impl DiffMaskOptimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        let la = || LookAhead::new(Adam::default(), cfg.lookahead_k, cfg.lookahead_alpha);
        Self {
            gates: la(),
            baseline: la(),
        }
    }
}

/// Descends `phi` and `b`, then ascends `lambda`.
pub fn step<T: Scalar>(
    stack: &mut GateStack<T>,
    grads: &Gradients<T>,
    breakdown: &LossBreakdown,
    opt: &mut DiffMaskOptimizer,
    state: &mut LagrangianState,
    cfg: &TrainConfig,
) {
    let mut gate_params: Vec<&mut Param<T>> = stack
        .gates
        .iter_mut()
        .flat_map(|g| [&mut g.w1, &mut g.b1, &mut g.w2, &mut g.b2])
        .collect();
    opt.gates.step(&mut gate_params, grads, cfg.lr_gates);
    opt.baseline.step(&mut [&mut stack.baseline], grads, cfg.lr_baseline);
    state.update(breakdown.kl, cfg.margin, cfg.lr_lambda);
}

struct GuardState {
    whole: usize,
    kl_high: usize,
    epoch_all_unmasked: bool,
}

impl GuardState {
    fn observe(&mut self, g: &Guardrails, margin: f64, r: &StepRecord) -> Option<FailureMode> {
        self.whole = if r.lambda < g.whole_lambda && r.masked_fraction > g.whole_fraction {
            self.whole + 1
        } else {
            0
        };
        self.kl_high = if r.kl > g.kl_factor * margin { self.kl_high + 1 } else { 0 };
        self.epoch_all_unmasked &= r.masked_fraction < g.nothing_fraction;
        if self.whole >= g.patience_steps {
            Some(FailureMode::MaskingWholeImage)
        } else if self.kl_high >= g.patience_steps {
            Some(FailureMode::KlRunaway)
        } else {
            None
        }
    }
}

/// Trains a fresh gate stack against a frozen classifier.
pub fn train_diffmask(
    train: &TensorSet,
    vit: &ViT<f32>,
    gate_config: GateConfig,
    cfg: &TrainConfig,
) -> Result<(GateStack<f32>, TrainReport)> {
    train_diffmask_with(train, vit, gate_config, cfg, |_| {})
}

/// [`train_diffmask`] with a callback after every epoch.
pub fn train_diffmask_with(
    train: &TensorSet,
    vit: &ViT<f32>,
    gate_config: GateConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<(GateStack<f32>, TrainReport)> {
    cfg.validate()?;
    let vcfg = &vit.config;
    let mut stack = GateStack::init(vcfg, gate_config, cfg.seed)?;
    let reference = reference_for_set(vit, train, 256)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);
    let mut opt = DiffMaskOptimizer::new(cfg);
    let mut state = LagrangianState::new(cfg.lambda_init);
    let mut report = TrainReport::default();
    let mut guard = GuardState {
        whole: 0,
        kl_high: 0,
        epoch_all_unmasked: true,
    };
    let g = &cfg.guardrails;
    let diverged = |mode, step, history: &[StepRecord]| {
        let from = history.len().saturating_sub(g.patience_steps);
        Error::Diverged(Box::new(Divergence {
            mode,
            step,
            history: history[from..].to_vec(),
        }))
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        guard.epoch_all_unmasked = true;
        let (mut kl_sum, mut mf_sum, mut steps) = (0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let step_no = state.history.len();
            let batch = reference.select(idx)?;
            let noise = draw_noise(&mut noise_rng, stack.n_gates(), idx.len(), vcfg.n_patches());
            let tape = Tape::new();
            let loss = diffmask_loss(&tape, vit, &stack, &batch, &noise, state.lambda, cfg.margin)
                .map_err(|e| e.at_step(step_no))?;
            let grads = tape.backward(loss.total).map_err(|e| Error::from(e).at_step(step_no))?;
            let record = StepRecord {
                step: step_no,
                epoch,
                l0: loss.breakdown.l0,
                kl: loss.breakdown.kl,
                lambda: state.lambda,
                masked_fraction: maskgen::expected_masked_fraction(&loss.gate_logits, &stack.config.hc),
            };
            step(&mut stack, &grads, &loss.breakdown, &mut opt, &mut state, cfg);
            state.history.push(record);
            kl_sum += record.kl;
            mf_sum += record.masked_fraction;
            steps += 1;
            if let Some(mode) = guard.observe(g, cfg.margin, &record) {
                return Err(diverged(mode, step_no, &state.history));
            }
        }
        let summary = EpochSummary {
            epoch,
            mean_kl: kl_sum / steps as f64,
            mean_masked_fraction: mf_sum / steps as f64,
            lambda: state.lambda,
        };
        report.epochs.push(summary);
        on_epoch(&summary);
        if epoch >= g.nothing_after_epochs && guard.epoch_all_unmasked {
            let last = state.history.len() - 1;
            return Err(diverged(FailureMode::MasksNothing, last, &state.history));
        }
    }
    report.steps = state.history;
    Ok((stack, report))
}

/// Classifier recipe: AdamW, linear decay to zero, early stopping on
/// validation accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitRecipe {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Epoch after which accuracy must beat chance.
    pub chance_check_epochs: usize,
    pub seed: u64,
}

impl Default for VitRecipe {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 1e-2,
            epochs: 20,
            batch_size: 16,
            patience: 5,
            chance_check_epochs: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VitReport {
    pub epochs: Vec<VitEpoch>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Mean cross-entropy of `labels` under the model's logits.
pub fn cross_entropy<'t, T: Scalar>(
    logits: crate::numerics::Var<'t, T>,
    labels: &[usize],
) -> Result<crate::numerics::Var<'t, T>> {
    let shape = logits.shape();
    let classes = shape[1];
    let mut onehot = Tensor::<T>::zeros(&shape);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Dimension(format!("label {y} for {classes} classes")));
        }
        onehot.data_mut()[i * classes + y] = T::one();
    }
    let picked = logits.log_softmax()?.mul(logits.tape().constant(onehot))?.sum()?;
    Ok(picked.scale(-1.0 / labels.len() as f64)?)
}

/// Predicted classes for a whole set, in chunks.
pub fn predict(vit: &ViT<f32>, set: &TensorSet, chunk: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for c in idx.chunks(chunk.max(1)) {
        out.extend(vit.forward(&set.gather(c)?)?.predictions());
    }
    Ok(out)
}

pub fn accuracy(vit: &ViT<f32>, set: &TensorSet) -> Result<f64> {
    Ok(evaluate(vit, set)?.0)
}

/// Accuracy and mean cross-entropy over a whole set.
pub fn evaluate(vit: &ViT<f32>, set: &TensorSet) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let (mut hits, mut nll) = (0usize, 0.0);
    for c in idx.chunks(256) {
        let trace = vit.forward(&set.gather(c)?)?;
        let classes = trace.probs.shape()[1];
        for (k, (pred, &i)) in trace.predictions().into_iter().zip(c).enumerate() {
            let y = set.labels[i];
            hits += usize::from(pred == y);
            nll -= (trace.probs.data()[k * classes + y].as_f64()).max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok((hits as f64 / set.len() as f64, nll / set.len() as f64))
}

pub fn train_vit(train: &TensorSet, val: &TensorSet, config: &ViTConfig, recipe: &VitRecipe) -> Result<(ViT<f32>, VitReport)> {
    train_vit_with(train, val, config, recipe, |_| {})
}

pub fn train_vit_with(
    train: &TensorSet,
    val: &TensorSet,
    config: &ViTConfig,
    recipe: &VitRecipe,
    mut on_epoch: impl FnMut(&VitEpoch),
) -> Result<(ViT<f32>, VitReport)> {
    if !(recipe.lr > 0.0) || recipe.epochs == 0 || recipe.batch_size == 0 {
        return Err(Error::Config("recipe needs lr > 0, epochs > 0, batch_size > 0".into()));
    }
    let mut vit = ViT::init(config.clone(), recipe.seed)?;
    let mut best = vit.clone();
    let mut report = VitReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    rng.set_stream(1);
    let mut opt = Adam::with_weight_decay(recipe.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = train.len().div_ceil(recipe.batch_size);
    let total_steps = (steps_per_epoch * recipe.epochs) as f64;
    let mut t = 0usize;
    let mut best_acc = -1.0;
    let mut best_loss = f64::INFINITY;
    let mut since_best = 0;
    for epoch in 0..recipe.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(recipe.batch_size) {
            let images = train.gather(idx)?;
            let tape = Tape::new();
            let patches = tape.constant(vit::patchify_batch(&images, config)?);
            let trace = vit.trace_on(&tape, patches, None, Binding::Trainable)?;
            let loss = cross_entropy(trace.logits, &train.labels_at(idx))?;
            loss_sum += loss.item() as f64;
            let grads = tape.backward(loss)?;
            let lr = recipe.lr * (1.0 - t as f64 / total_steps);
            opt.step(&mut vit.named_params_mut(), &grads, lr);
            t += 1;
        }
        let (val_accuracy, val_loss) = evaluate(&vit, val)?;
        let record = VitEpoch {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_loss,
            val_accuracy,
        };
        report.epochs.push(record);
        on_epoch(&record);
        // ties in accuracy keep the lower validation loss; only a strict
        // accuracy gain resets the patience counter
        if val_accuracy > best_acc || (val_accuracy == best_acc && val_loss < best_loss) {
            best = vit.clone();
            report.best_epoch = epoch;
            best_loss = val_loss;
        }
        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if epoch + 1 == recipe.chance_check_epochs && best_acc <= 1.0 / config.n_classes as f64 {
            return Err(Error::Config(format!(
                "validation accuracy {best_acc:.3} is not above chance after {} epochs",
                recipe.chance_check_epochs
            )));
        }
        if since_best >= recipe.patience {
            break;
        }
    }
    report.best_val_accuracy = best_acc;
    Ok((best, report))
}

/// Largest relative error between backprop and central differences of the
/// full interpretation loss, over sampled coordinates of every gate tensor.
pub fn check_loss_gradient(seed: u64, coords_per_tensor: usize, fault: Option<Fault>) -> Result<f64> {
    use rand::Rng;
    let cfg = ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        mlp_ratio: 2,
        n_classes: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vit: ViT<f64> = ViT::<f32>::init(cfg.clone(), seed)?.cast();
    let gate_cfg = GateConfig {
        alpha: 1.0,
        beta: 0.5,
        ..GateConfig::default()
    };
    let mut stack: GateStack<f64> = GateStack::init(&cfg, gate_cfg, seed)?;
    for p in stack.named_params_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    let batch = 2;
    let numel = batch * cfg.image_size * cfg.image_size * cfg.channels;
    let images = Tensor::new(
        &[batch, cfg.image_size, cfg.image_size, cfg.channels],
        (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let reference = Reference::compute(&vit, &images)?;
    let noise: Vec<Tensor<f64>> = draw_noise(&mut rng, stack.n_gates(), batch, cfg.n_patches());
    let (lambda, margin) = (1.7, 0.1);
    let total = |s: &GateStack<f64>| -> Result<f64> {
        let tape = Tape::new();
        Ok(diffmask_loss(&tape, &vit, s, &reference, &noise, lambda, margin)?.breakdown.total)
    };
    let tape = Tape::new();
    if let Some(f) = fault {
        tape.inject_fault(f);
    }
    let loss = diffmask_loss(&tape, &vit, &stack, &reference, &noise, lambda, margin)?;
    let grads = tape.backward(loss.total)?;
    let eps = 1e-5;
    let mut worst = 0f64;
    let names: Vec<String> = stack.named_params().iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let analytic = grads
            .param(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(stack.named_params()[pi].value.shape()));
        let n = analytic.numel();
        for _ in 0..coords_per_tensor.min(n) {
            let i = rng.gen_range(0..n);
            let orig = stack.named_params()[pi].value.data()[i];
            stack.named_params_mut()[pi].value.data_mut()[i] = orig + eps;
            let plus = total(&stack)?;
            stack.named_params_mut()[pi].value.data_mut()[i] = orig - eps;
            let minus = total(&stack)?;
            stack.named_params_mut()[pi].value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_counting_dataset, GridSpec};

    #[test]
    fn lambda_update_rule() {
        let mut s = LagrangianState::new(2.0);
        s.update(0.1, 0.1, 0.3);
        assert_eq!(s.lambda, 2.0);
        s.update(0.2, 0.1, 0.3);
        assert!((s.lambda - 2.03).abs() < 1e-12);
        let mut z = LagrangianState::new(0.0);
        z.update(0.05, 0.1, 0.3);
        assert_eq!(z.lambda, 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Param::new("w", Tensor::<f64>::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let tape = Tape::new();
        let loss = tape.param(&p).mul(tape.constant(Tensor::from_f64(&[2], &[3.0, -0.5]).unwrap())).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        Adam::default().step(&mut [&mut p], &grads, 0.01);
        let v = p.value.to_f64_vec();
        assert!((v[0] - 0.99).abs() < 1e-6 && (v[1] + 0.99).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn lookahead_interpolates_every_k_steps() {
        let mut p = Param::new("w", Tensor::<f64>::from_f64(&[1], &[0.0]).unwrap());
        let mut la = LookAhead::new(Adam::default(), 2, 0.5);
        for _ in 0..2 {
            let tape = Tape::new();
            let loss = tape.param(&p).scale(-1.0).unwrap().sum().unwrap();
            let grads = tape.backward(loss).unwrap();
            la.step(&mut [&mut p], &grads, 0.1);
        }
        // two fast steps of +0.1, then halfway back to the slow copy at 0
        assert!((p.value.data()[0] - 0.1).abs() < 1e-6, "{:?}", p.value);
    }

    fn tiny_setup() -> (ViT<f32>, TensorSet) {
        let spec = GridSpec {
            grid: 2,
            patch_px: 4,
            ..GridSpec::default()
        };
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 2,
            n_classes: 5,
        };
        let set = TensorSet::from_images(&gen_counting_dataset(1, 24, &spec).unwrap()).unwrap();
        (ViT::init(cfg, 3).unwrap(), set)
    }

    #[test]
    fn identical_logits_give_zero_kl() {
        let (vit, set) = tiny_setup();
        let mut reference = Reference::compute(&vit, &set.gather(&[0, 1]).unwrap()).unwrap();
        let cfg = GateConfig {
            beta: 40.0,
            ..GateConfig::default()
        };
        let stack = GateStack::init(&vit.config, cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = draw_noise(&mut rng, stack.n_gates(), 2, vit.config.n_patches());
        let tape = Tape::new();
        let loss = diffmask_loss(&tape, &vit, &stack, &reference, &noise, 3.0, 0.1).unwrap();
        let b = loss.breakdown;
        assert_eq!(b.kl, 0.0);
        assert!((b.total - (b.l0 - 0.3)).abs() < 1e-5);
        assert!((b.total - (b.l0 + 3.0 * (b.kl - 0.1))).abs() < 1e-6);
        drop(loss);

        // lambda = 0 leaves only the sparsity term
        reference.logits.data_mut()[0] += 5.0;
        let tape = Tape::new();
        let loss = diffmask_loss(&tape, &vit, &stack, &reference, &noise, 0.0, 0.1).unwrap();
        assert!(loss.breakdown.kl > 0.0);
        assert_eq!(loss.breakdown.total, loss.breakdown.l0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let err = check_loss_gradient(5, 4, None).unwrap();
        assert!(err < 1e-3, "{err}");
        let broken = check_loss_gradient(5, 4, Some(Fault::TanhBackward)).unwrap();
        assert!(broken > 1e-2, "{broken}");
    }

    #[test]
    fn diffmask_training_is_deterministic_and_leaves_vit_untouched() {
        let (vit, set) = tiny_setup();
        let before = vit.clone();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr_gates: 1e-3,
            ..TrainConfig::default()
        };
        let (a, ra) = train_diffmask(&set, &vit, GateConfig::default(), &cfg).unwrap();
        let (b, rb) = train_diffmask(&set, &vit, GateConfig::default(), &cfg).unwrap();
        assert_eq!(vit, before);
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert_eq!(ra.steps.len(), 6);
        assert_eq!(ra.epochs.len(), 2);
        assert!(ra.steps.iter().all(|r| r.lambda >= 0.0));
        let csv = ra.to_csv();
        assert!(csv.starts_with("step,l0,kl,lambda,masked_fraction\n"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (vit, set) = tiny_setup();
        for cfg in [
            TrainConfig { margin: 0.0, ..TrainConfig::default() },
            TrainConfig { lookahead_alpha: 1.5, ..TrainConfig::default() },
            TrainConfig { lr_gates: 0.0, ..TrainConfig::default() },
            TrainConfig { lambda_init: -1.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(
                train_diffmask(&set, &vit, GateConfig::default(), &cfg),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn constant_label_dataset_is_trivially_learned() {
        let (_, mut set) = tiny_setup();
        set.labels.iter_mut().for_each(|y| *y = 2);
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 2,
            n_classes: 5,
        };
        let recipe = VitRecipe {
            epochs: 3,
            batch_size: 8,
            lr: 1e-2,
            ..VitRecipe::default()
        };
        let (vit, report) = train_vit(&set, &set, &cfg, &recipe).unwrap();
        assert_eq!(accuracy(&vit, &set).unwrap(), 1.0);
        assert_eq!(report.best_val_accuracy, 1.0);
    }

    #[test]
    fn early_stopping_after_plateau() {
        let (_, mut set) = tiny_setup();
        set.labels.iter_mut().for_each(|y| *y = 1);
        let cfg = tiny_setup().0.config;
        let recipe = VitRecipe {
            epochs: 20,
            batch_size: 8,
            lr: 1e-2,
            patience: 5,
            ..VitRecipe::default()
        };
        let (_, report) = train_vit(&set, &set, &cfg, &recipe).unwrap();
        // accuracy saturates at 1.0 and cannot improve further
        let first_perfect = report.epochs.iter().position(|e| e.val_accuracy == 1.0).unwrap();
        assert_eq!(report.epochs.len(), first_perfect + 1 + 5);
        assert_eq!(report.best_epoch, report.epochs.len() - 1);
        assert!(report.epochs.len() < 20);
    }
}
