//! The interpretation network: one gate per hidden state, stretched logits,
//! Hard Concrete masks multiplied across gates, and pixel-level upsampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::divergence::kl_from_logits;
use crate::hardconcrete::{self, HCParams};
use crate::numerics::{Param, Scalar, Tape, Tensor, Var};
use crate::vit::{self, Binding, Masking, ViT, ViTConfig};
use crate::{Error, Result};

/// Stretch and gate-distribution settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub alpha: f64,
    pub beta: f64,
    pub hc: HCParams,
}

/// Fraction of patches the freshly initialized stack is expected to mask.
pub const DESK_INITIAL_MASKED_FRACTION: f64 = 0.3;

impl Default for GateConfig {
    fn default() -> Self {
        let hc = HCParams::default();
        Self {
            alpha: 10.0,
            beta: beta_for_masked_fraction(DESK_INITIAL_MASKED_FRACTION, ViTConfig::default().n_layers + 2, &hc),
            hc,
        }
    }
}

impl GateConfig {
    /// Stretch used for the CIFAR-10 runs of the original method.
    pub fn cifar_preset() -> Self {
        Self {
            alpha: 15.0,
            beta: 8.0,
            hc: HCParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hc.validate()?;
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config("stretch parameters must be finite".into()));
        }
        Ok(())
    }
}

/// The offset that makes zero-output gates mask `fraction` of patches in
/// expectation, i.e. `1 - P(z_l > 0)^gates = fraction`.
pub fn beta_for_masked_fraction(fraction: f64, gates: usize, hc: &HCParams) -> f64 {
    let keep = (1.0 - fraction).powf(1.0 / gates as f64);
    (keep / (1.0 - keep)).ln() + hc.tau * (-hc.l / hc.r).ln()
}

/// Two-layer tanh MLP from `[hbar0; h]` (width `2d`) to one logit per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate<T: Scalar> {
    pub w1: Param<T>,
    pub b1: Param<T>,
    pub w2: Param<T>,
    pub b2: Param<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateStack<T: Scalar = f32> {
    pub config: GateConfig,
    /// `L + 2` gates: `hbar0`, `h(0)`, then `h(1)..h(L)`.
    pub gates: Vec<Gate<T>>,
    /// Replacement embedding for masked patches, `[d]`.
    pub baseline: Param<T>,
}

pub fn param_layout(d: usize, n_layers: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for k in 0..n_layers + 2 {
        out.extend([
            (format!("gates.{k}.w1"), vec![2 * d, d]),
            (format!("gates.{k}.b1"), vec![d]),
            (format!("gates.{k}.w2"), vec![d, 1]),
            (format!("gates.{k}.b2"), vec![1]),
        ]);
    }
    out.push(("gates.baseline".to_string(), vec![d]));
    out
}

impl<T: Scalar> GateStack<T> {
    /// Hidden layers get Xavier-normal weights; the output layer starts at
    /// zero so every initial logit equals `beta`.
    pub fn init(vit: &ViTConfig, config: GateConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = vit.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xavier = Normal::new(0.0, (2.0 / (3 * d) as f64).sqrt()).expect("valid std");
        let params = param_layout(d, vit.n_layers)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if name.ends_with(".w1") {
                    (0..n).map(|_| xavier.sample(&mut rng)).collect()
                } else {
                    vec![0.0; n]
                };
                Ok(Param::new(name, Tensor::from_f64(&shape, &data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(vit, config, params)
    }

    pub fn from_params(vit: &ViTConfig, config: GateConfig, params: Vec<Param<T>>) -> Result<Self> {
        let layout = param_layout(vit.d_model, vit.n_layers);
        if params.len() != layout.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} gate tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        let mut by_name: std::collections::HashMap<String, Param<T>> =
            params.into_iter().map(|p| (p.name.clone(), p)).collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Param<T>> {
            let p = by_name
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if p.value.shape() != shape {
                return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {shape:?}", p.value.shape())));
            }
            Ok(p)
        };
        let mut gates = Vec::with_capacity(vit.n_layers + 2);
        for chunk in layout[..layout.len() - 1].chunks(4) {
            gates.push(Gate {
                w1: take(&chunk[0].0, &chunk[0].1)?,
                b1: take(&chunk[1].0, &chunk[1].1)?,
                w2: take(&chunk[2].0, &chunk[2].1)?,
                b2: take(&chunk[3].0, &chunk[3].1)?,
            });
        }
        let (bn, bs) = &layout[layout.len() - 1];
        let baseline = take(bn, bs)?;
        Ok(Self {
            config,
            gates,
            baseline,
        })
    }

    pub fn named_params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for g in &self.gates {
            out.extend([&g.w1, &g.b1, &g.w2, &g.b2]);
        }
        out.push(&self.baseline);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for g in &mut self.gates {
            out.extend([&mut g.w1, &mut g.b1, &mut g.w2, &mut g.b2]);
        }
        out.push(&mut self.baseline);
        out
    }

    pub fn cast<U: Scalar>(&self, vit: &ViTConfig) -> GateStack<U> {
        let params = self.named_params().into_iter().map(Param::cast).collect();
        GateStack::from_params(vit, self.config.clone(), params).expect("cast preserves layout")
    }

    pub fn n_gates(&self) -> usize {
        self.gates.len()
    }
}

/// `L + 2` rows of per-patch logits, each `[B, N]`.
pub fn gate_logits<'t, T: Scalar>(
    hbar0: Var<'t, T>,
    hidden: &[Var<'t, T>],
    stack: &GateStack<T>,
    binding: Binding,
) -> Result<Vec<Var<'t, T>>> {
    if hidden.len() + 1 != stack.n_gates() {
        return Err(Error::Dimension(format!(
            "{} hidden states for {} gates (need L + 1 states for L + 2 gates)",
            hidden.len(),
            stack.n_gates()
        )));
    }
    let tape = hbar0.tape();
    let hs = hbar0.shape();
    let &[batch, n, d] = hs.as_slice() else {
        return Err(Error::Dimension(format!("hbar0 must be [B, N, d], got {hs:?}")));
    };
    let bind = |p: &Param<T>| match binding {
        Binding::Trainable => tape.param(p),
        Binding::Frozen => tape.frozen(p),
    };
    let (alpha, beta) = (stack.config.alpha, stack.config.beta);
    let mut rows = Vec::with_capacity(stack.n_gates());
    for (k, gate) in stack.gates.iter().enumerate() {
        let state = if k == 0 { hbar0 } else { hidden[k - 1] };
        let ss = state.shape();
        let patches = match ss.as_slice() {
            s if s == [batch, n, d] => state,
            s if s == [batch, n + 1, d] => state.narrow(1, 1, n)?,
            s => {
                return Err(Error::Dimension(format!("gate {k}: state {s:?} does not match hbar0 {hs:?}")));
            }
        };
        let w1 = bind(&gate.w1);
        if w1.shape() != [2 * d, d] {
            return Err(Error::Dimension(format!("gate {k}: weights {:?} for d = {d}", w1.shape())));
        }
        let u = Var::concat_last(&[hbar0, patches])?
            .matmul(w1)?
            .add(bind(&gate.b1))?
            .tanh()?
            .matmul(bind(&gate.w2))?
            .add(bind(&gate.b2))?
            .reshape(&[batch, n])?
            .affine(alpha, beta)?;
        rows.push(u);
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Train,
    Infer,
}

/// Aggregated mask on the tape.
pub struct MaskVars<'t, T: Scalar> {
    pub per_layer: Vec<Var<'t, T>>,
    /// `[B, N]`, the product of the per-layer masks.
    pub z: Var<'t, T>,
}

/// Per-layer masks from gate logits and their product.
///
/// Training draws Hard Concrete samples (`noise` holds one `[B, N]` tensor
/// per gate); inference uses the deterministic gate.
pub fn make_mask<'t, T: Scalar>(
    logits: &[Var<'t, T>],
    mode: MaskMode,
    noise: Option<&[Tensor<T>]>,
    hc: &HCParams,
) -> Result<MaskVars<'t, T>> {
    if logits.is_empty() {
        return Err(Error::Contract("no gate logits".into()));
    }
    let per_layer = match (mode, noise) {
        (MaskMode::Train, None) => return Err(Error::Contract("training masks need noise".into())),
        (MaskMode::Train, Some(noise)) => {
            if noise.len() != logits.len() {
                return Err(Error::Dimension(format!("{} noise tensors for {} gates", noise.len(), logits.len())));
            }
            logits
                .iter()
                .zip(noise)
                .map(|(&u, e)| hardconcrete::sample(u, e, hc))
                .collect::<Result<Vec<_>>>()?
        }
        (MaskMode::Infer, _) => logits
            .iter()
            .map(|&u| hardconcrete::deterministic_gate(u, hc))
            .collect::<Result<Vec<_>>>()?,
    };
    let mut z = per_layer[0];
    for &layer in &per_layer[1..] {
        z = z.mul(layer)?;
    }
    Ok(MaskVars { per_layer, z })
}

/// Per-patch mask of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchMask {
    pub z: Vec<f64>,
    /// `L + 2` rows before aggregation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_layer: Option<Vec<Vec<f64>>>,
}

impl PatchMask {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { z, per_layer: None })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Pixel-level saliency, row-major `size x size`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub size: usize,
    pub values: Vec<f64>,
}

/// Bilinear upsampling with each patch value anchored at its patch centre.
///
/// Pixel `x` sits at patch coordinate `x / P - 1/2`, so the pixel at offset
/// `P / 2` inside a patch reproduces the patch value exactly; pixels beyond
/// the outermost centres take the nearest centre's value.
pub fn upsample(mask: &PatchMask, cfg: &ViTConfig) -> Result<SaliencyMap> {
    let grid = cfg.grid();
    if mask.len() != grid * grid {
        return Err(Error::Dimension(format!("{} mask values for a {grid}x{grid} grid", mask.len())));
    }
    let size = cfg.image_size;
    let p = cfg.patch_size as f64;
    let axis: Vec<(usize, usize, f64)> = (0..size)
        .map(|x| {
            let g = (x as f64 / p - 0.5).clamp(0.0, (grid - 1) as f64);
            let i0 = (g.floor() as usize).min(grid - 1);
            let i1 = (i0 + 1).min(grid - 1);
            (i0, i1, g - i0 as f64)
        })
        .collect();
    let z = |r: usize, c: usize| mask.z[r * grid + c];
    let mut values = Vec::with_capacity(size * size);
    for &(r0, r1, fy) in &axis {
        for &(c0, c1, fx) in &axis {
            let top = z(r0, c0) * (1.0 - fx) + z(r0, c1) * fx;
            let bottom = z(r1, c0) * (1.0 - fx) + z(r1, c1) * fx;
            values.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(SaliencyMap { size, values })
}

/// Inference-mode output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub mask: PatchMask,
    pub saliency: SaliencyMap,
    /// `KL(y || y_hat)` between the unmasked and masked predictions.
    pub kl: f64,
    pub class_before: usize,
    pub class_after: usize,
    pub probs_before: Vec<f64>,
    pub probs_after: Vec<f64>,
}

/// Batched inference: masks, masked logits and divergences for `[B, H, W, C]` images.
pub fn explain_batch<T: Scalar>(images: &Tensor<T>, vit: &ViT<T>, stack: &GateStack<T>) -> Result<Vec<Explanation>> {
    let cfg = &vit.config;
    let tape = Tape::<T>::new();
    let patches = tape.constant(vit::patchify_batch(images, cfg)?);
    let trace = vit.trace_on(&tape, patches, None, Binding::Frozen)?;
    let logits = gate_logits(trace.hbar0, &trace.hidden, stack, Binding::Frozen)?;
    let mask = make_mask(&logits, MaskMode::Infer, None, &stack.config.hc)?;
    let masked = vit.trace_on(
        &tape,
        patches,
        Some(Masking {
            z: mask.z,
            baseline: tape.frozen(&stack.baseline),
        }),
        Binding::Frozen,
    )?;
    let before = trace.values()?;
    let after = masked.values()?;
    let z = mask.z.value();
    let layers: Vec<Tensor<T>> = mask.per_layer.iter().map(Var::value).collect();
    let (n, classes) = (cfg.n_patches(), cfg.n_classes);
    (0..before.batch_size())
        .map(|i| {
            let to_f64 = |t: &Tensor<T>, w: usize| t.data()[i * w..(i + 1) * w].iter().map(|v| v.as_f64()).collect::<Vec<_>>();
            let mut mask = PatchMask::new(to_f64(&z, n))?;
            mask.per_layer = Some(layers.iter().map(|l| to_f64(l, n)).collect());
            let saliency = upsample(&mask, cfg)?;
            let (lb, la) = (before.logits.row(i), after.logits.row(i));
            Ok(Explanation {
                saliency,
                mask,
                kl: kl_from_logits(lb, la),
                class_before: vit::argmax(lb),
                class_after: vit::argmax(la),
                probs_before: to_f64(&before.probs, classes),
                probs_after: to_f64(&after.probs, classes),
            })
        })
        .collect()
}

/// Full inference pipeline for a single `H x W x C` image.
pub fn explain<T: Scalar>(image: &Tensor<T>, vit: &ViT<T>, stack: &GateStack<T>) -> Result<Explanation> {
    let batch = vit::stack_images(&[image])?;
    Ok(explain_batch(&batch, vit, stack)?.remove(0))
}

/// `1 - prod_l P(z_l > 0)` averaged over patches, from `[gates][B * N]` logits.
pub fn expected_masked_fraction<T: Scalar>(logits: &[Tensor<T>], hc: &HCParams) -> f64 {
    let Some(first) = logits.first() else { return 0.0 };
    let n = first.numel();
    let total: f64 = (0..n)
        .map(|i| {
            let keep: f64 = logits
                .iter()
                .map(|u| hardconcrete::scalar::prob_nonzero(u.data()[i].as_f64(), hc))
                .product();
            1.0 - keep
        })
        .sum();
    total / n as f64
}
