//! Faithfulness scoring, perturbation curves and baseline attributions.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledImage, TensorSet};
use crate::divergence::kl_from_logits;
use crate::maskgen::{explain_batch, GateStack, PatchMask};
use crate::numerics::Scalar;
use crate::vit::{self, ForwardTrace, ViT};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    DiffMask,
    Rollout,
    Random,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::DiffMask, Method::Rollout, Method::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::DiffMask => "diffmask",
            Method::Rollout => "rollout",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Method::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!("unknown method {s:?}; valid methods: {}", valid.join(", ")))
            })
    }
}

/// Per-patch importance scores; higher means more important.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub method: Method,
    pub scores: Vec<f64>,
}

impl Attribution {
    pub fn new(method: Method, scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Contract("attribution scores must be finite".into()));
        }
        Ok(Self { method, scores })
    }
}

/// Row-major `n x n` matrix product.
fn matmul_square(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Rollout matrix `A_L ... A_1` of image `index`, where each `A_l` is the
/// head-averaged attention mixed half-and-half with the identity and
/// row-normalized.
pub fn rollout_matrix<T: Scalar>(trace: &ForwardTrace<T>, index: usize) -> Result<Vec<f64>> {
    let first = trace
        .attn
        .first()
        .ok_or_else(|| Error::Contract("trace has no attention layers".into()))?;
    let &[_, heads, t, t2] = first.shape() else {
        return Err(Error::Dimension(format!("attention must be [B, H, T, T], got {:?}", first.shape())));
    };
    if t != t2 {
        return Err(Error::Dimension(format!("attention must be square, got {t}x{t2}")));
    }
    let mut rollout: Option<Vec<f64>> = None;
    for layer in &trace.attn {
        let a = layer.row(index);
        let mut mixed = vec![0.0; t * t];
        for h in 0..heads {
            for (m, &v) in mixed.iter_mut().zip(&a[h * t * t..(h + 1) * t * t]) {
                *m += 0.5 * v.as_f64() / heads as f64;
            }
        }
        for i in 0..t {
            mixed[i * t + i] += 0.5;
            let row = &mut mixed[i * t..(i + 1) * t];
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        rollout = Some(match rollout {
            None => mixed,
            Some(r) => matmul_square(&mixed, &r, t),
        });
    }
    Ok(rollout.expect("at least one layer"))
}

/// CLS row of the rollout restricted to patch columns, one per image.
pub fn attention_rollout<T: Scalar>(trace: &ForwardTrace<T>) -> Result<Vec<Attribution>> {
    (0..trace.batch_size())
        .map(|i| {
            let r = rollout_matrix(trace, i)?;
            let t = (r.len() as f64).sqrt() as usize;
            Attribution::new(Method::Rollout, r[1..t].to_vec())
        })
        .collect()
}

/// Deterministic uniform scores in `[0, 1)`.
pub fn random_attributions(seed: u64, images: usize, n_patches: usize) -> Vec<Attribution> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..images)
        .map(|_| Attribution {
            method: Method::Random,
            scores: (0..n_patches).map(|_| rng.gen()).collect(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    /// Most important patches removed first.
    Positive,
    /// Least important patches removed first.
    Negative,
}

impl Order {
    pub fn as_str(self) -> &'static str {
        match self {
            Order::Positive => "positive",
            Order::Negative => "negative",
        }
    }
}

/// Replacement color for removed patches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    /// Per-channel mean over the reference set.
    #[default]
    Mean,
    /// Normalized zero, i.e. mid-gray.
    Gray,
}

impl Fill {
    pub fn color(self, reference: &TensorSet) -> [f32; 3] {
        match self {
            Fill::Gray => [0.0; 3],
            Fill::Mean => reference.mean_color(),
        }
    }
}

impl FromStr for Fill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" => Ok(Fill::Gray),
            "mean" => Ok(Fill::Mean),
            _ => Err(Error::Config(format!("unknown fill {s:?}; valid fills: gray, mean"))),
        }
    }
}

/// `{0.0, 0.1, ..., 0.9}`.
pub fn default_fractions() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

/// Number of patches removed at fraction `f`: `ceil(f * n)`.
pub fn removal_count(fraction: f64, n: usize) -> usize {
    // the slack keeps e.g. 0.3 * 10 from rounding up to 4
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Patch indices in removal order, ties broken by ascending index.
pub fn removal_order(scores: &[f64], order: Order) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let by_score = match order {
            Order::Positive => scores[b].total_cmp(&scores[a]),
            Order::Negative => scores[a].total_cmp(&scores[b]),
        };
        by_score.then(a.cmp(&b))
    });
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub method: Method,
    pub order: Order,
    pub fractions: Vec<f64>,
    /// Mean `KL(y || y_perturbed)` at each fraction.
    pub kl: Vec<f64>,
    /// Top-1 accuracy at each fraction.
    pub acc: Vec<f64>,
    /// `[fraction][image]` divergences, kept for resampling.
    #[serde(skip)]
    pub per_image_kl: Vec<Vec<f64>>,
}

/// Replaces whole patches by `fill` (normalized color) in a `[H, W, C]` image.
fn fill_patches(image: &mut [f32], size: usize, patch: usize, removed: &[usize], fill: [f32; 3]) {
    let grid = size / patch;
    for &k in removed {
        let (r, c) = (k / grid, k % grid);
        for y in r * patch..(r + 1) * patch {
            for x in c * patch..(c + 1) * patch {
                let o = (y * size + x) * 3;
                image[o..o + 3].copy_from_slice(&fill);
            }
        }
    }
}

/// Removes patches in attribution order and scores the model at each fraction.
pub fn perturb_and_score(
    set: &TensorSet,
    vit: &ViT<f32>,
    attributions: &[Attribution],
    order: Order,
    fractions: &[f64],
    fill: [f32; 3],
) -> Result<PerturbationCurve> {
    let cfg = &vit.config;
    if attributions.len() != set.len() {
        return Err(Error::Dimension(format!(
            "{} attributions for {} images",
            attributions.len(),
            set.len()
        )));
    }
    if cfg.channels != 3 {
        return Err(Error::Config("perturbation expects RGB images".into()));
    }
    let n = cfg.n_patches();
    if let Some(a) = attributions.iter().find(|a| a.scores.len() != n) {
        return Err(Error::Dimension(format!("{} scores for {n} patches", a.scores.len())));
    }
    let method = attributions.first().map_or(Method::Random, |a| a.method);
    let orders: Vec<Vec<usize>> = attributions.iter().map(|a| removal_order(&a.scores, order)).collect();
    let idx: Vec<usize> = (0..set.len()).collect();
    let chunk = 250;
    let mut reference = Vec::with_capacity(set.len());
    for c in idx.chunks(chunk) {
        reference.push(vit.forward(&set.gather(c)?)?.logits);
    }
    let mut curve = PerturbationCurve {
        method,
        order,
        fractions: fractions.to_vec(),
        kl: Vec::new(),
        acc: Vec::new(),
        per_image_kl: Vec::new(),
    };
    for &f in fractions {
        let k = removal_count(f, n);
        let mut kls = Vec::with_capacity(set.len());
        let mut hits = 0usize;
        for (ci, c) in idx.chunks(chunk).enumerate() {
            let mut images = set.gather(c)?;
            let w = set.image_numel();
            for (j, &i) in c.iter().enumerate() {
                let img = &mut images.data_mut()[j * w..(j + 1) * w];
                fill_patches(img, cfg.image_size, cfg.patch_size, &orders[i][..k], fill);
            }
            let logits = vit.forward(&images)?.logits;
            for (j, &i) in c.iter().enumerate() {
                let row = logits.row(j);
                kls.push(if k == 0 { 0.0 } else { kl_from_logits(reference[ci].row(j), row) });
                hits += usize::from(vit::argmax(row) == set.labels[i]);
            }
        }
        curve.kl.push(kls.iter().sum::<f64>() / kls.len() as f64);
        curve.acc.push(hits as f64 / set.len() as f64);
        curve.per_image_kl.push(kls);
    }
    Ok(curve)
}

/// Trapezoidal area over the fraction range, divided by its width.
pub fn auc(fractions: &[f64], values: &[f64]) -> Result<f64> {
    if fractions.len() != values.len() || fractions.len() < 2 {
        return Err(Error::Contract("auc needs at least two matching points".into()));
    }
    if fractions.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Contract("fractions must be strictly ascending".into()));
    }
    let area: f64 = fractions
        .windows(2)
        .zip(values.windows(2))
        .map(|(f, v)| (f[1] - f[0]) * (v[0] + v[1]) / 2.0)
        .sum();
    Ok(area / (fractions[fractions.len() - 1] - fractions[0]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub pos_kl: f64,
    pub neg_kl: f64,
    pub pos_acc: f64,
    pub neg_acc: f64,
}

impl AucSummary {
    pub fn from_curves(pos: &PerturbationCurve, neg: &PerturbationCurve) -> Result<Self> {
        Ok(Self {
            pos_kl: auc(&pos.fractions, &pos.kl)?,
            neg_kl: auc(&neg.fractions, &neg.kl)?,
            pos_acc: auc(&pos.fractions, &pos.acc)?,
            neg_acc: auc(&neg.fractions, &neg.acc)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    MatchesRed,
    MatchesComplement,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Faithfulness {
    pub verdict: Verdict,
    pub best_iou: f64,
}

/// Threshold for a binarized mask to count as a match.
pub const MATCH_IOU: f64 = 0.99;

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Binarizes the mask at 0.5 and compares it to the red set and its complement.
pub fn faithfulness_check(mask: &PatchMask, red_set: &[usize]) -> Faithfulness {
    let kept: Vec<bool> = mask.z.iter().map(|&z| z >= 0.5).collect();
    let red: Vec<bool> = (0..kept.len()).map(|k| red_set.contains(&k)).collect();
    let complement: Vec<bool> = red.iter().map(|r| !r).collect();
    let (to_red, to_comp) = (iou(&kept, &red), iou(&kept, &complement));
    let best_iou = to_red.max(to_comp);
    let verdict = if to_red >= MATCH_IOU && to_red >= to_comp {
        Verdict::MatchesRed
    } else if to_comp >= MATCH_IOU {
        Verdict::MatchesComplement
    } else {
        Verdict::None
    };
    Faithfulness { verdict, best_iou }
}

/// Inference masks, divergences and faithfulness on a labeled set.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskEvaluation {
    pub masks: Vec<PatchMask>,
    pub kl: Vec<f64>,
    pub faithfulness: Vec<Faithfulness>,
}

impl MaskEvaluation {
    pub fn mean_kl(&self) -> f64 {
        self.kl.iter().sum::<f64>() / self.kl.len() as f64
    }

    pub fn match_rate(&self) -> f64 {
        let hits = self.faithfulness.iter().filter(|f| f.verdict != Verdict::None).count();
        hits as f64 / self.faithfulness.len() as f64
    }

    pub fn attributions(&self) -> Vec<Attribution> {
        self.masks
            .iter()
            .map(|m| Attribution {
                method: Method::DiffMask,
                scores: m.z.clone(),
            })
            .collect()
    }
}

pub fn evaluate_masks(
    images: &[LabeledImage],
    set: &TensorSet,
    vit: &ViT<f32>,
    stack: &GateStack<f32>,
) -> Result<MaskEvaluation> {
    let mut out = MaskEvaluation {
        masks: Vec::new(),
        kl: Vec::new(),
        faithfulness: Vec::new(),
    };
    let idx: Vec<usize> = (0..set.len()).collect();
    for c in idx.chunks(250) {
        for (e, &i) in explain_batch(&set.gather(c)?, vit, stack)?.into_iter().zip(c) {
            out.faithfulness.push(faithfulness_check(&e.mask, &images[i].red_set));
            out.kl.push(e.kl);
            out.masks.push(e.mask);
        }
    }
    Ok(out)
}

/// Rollout attributions for a whole set.
pub fn rollout_for_set(set: &TensorSet, vit: &ViT<f32>) -> Result<Vec<Attribution>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for c in idx.chunks(250) {
        out.extend(attention_rollout(&vit.forward(&set.gather(c)?)?)?);
    }
    Ok(out)
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * resamples as f64) as usize).min(resamples - 1)];
    (at(tail), at(1.0 - tail))
}
