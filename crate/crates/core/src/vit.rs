//! Desk-scale Vision Transformer that exposes every intermediate state.
//!
//! Pre-norm encoder blocks with learned positional embeddings and a CLS
//! token. Besides logits, each forward returns a trace holding the patch
//! embeddings before positions are added (`hbar0`), the hidden state after
//! every block and the attention matrices, which the gates and attention
//! rollout consume.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Param, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 48,
            patch_size: 16,
            channels: 3,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            mlp_ratio: 4,
            n_classes: 10,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 {
            return fail("at least one encoder layer is required".into());
        }
        if self.channels == 0 || self.mlp_ratio == 0 || self.n_classes == 0 {
            return fail("channels, mlp_ratio and n_classes must be positive".into());
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Patches plus CLS.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Splits an `H x W x C` image into row-major patches of `P * P * C` values.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let [h, w, c] = image3(image)?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Dimension(format!("image {h}x{w} is not divisible into {patch}px patches")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for pr in 0..gh {
        for pc in 0..gw {
            for py in 0..patch {
                let row = (pr * patch + py) * w + pc * patch;
                out.extend_from_slice(&src[row * c..(row + patch) * c]);
            }
        }
    }
    Ok(Tensor::new(&[gh * gw, patch * patch * c], out)?)
}

/// Inverse of [`patchify`] for a square image.
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, image_size: usize, patch: usize, channels: usize) -> Result<Tensor<T>> {
    let grid = image_size / patch.max(1);
    if patches.shape() != [grid * grid, patch * patch * channels] || grid * patch != image_size {
        return Err(Error::Dimension(format!(
            "patches {:?} do not tile a {image_size}px image",
            patches.shape()
        )));
    }
    let mut out = vec![T::zero(); image_size * image_size * channels];
    let src = patches.data();
    let run = patch * channels;
    for pr in 0..grid {
        for pc in 0..grid {
            let p = pr * grid + pc;
            for py in 0..patch {
                let dst = ((pr * patch + py) * image_size + pc * patch) * channels;
                let s = p * patch * run + py * run;
                out[dst..dst + run].copy_from_slice(&src[s..s + run]);
            }
        }
    }
    Ok(Tensor::new(&[image_size, image_size, channels], out)?)
}

fn image3<T: Scalar>(image: &Tensor<T>) -> Result<[usize; 3]> {
    match image.shape() {
        &[h, w, c] => Ok([h, w, c]),
        s => Err(Error::Dimension(format!("expected an H x W x C image, got {s:?}"))),
    }
}

/// Patchifies a `[B, H, W, C]` batch into `[B, N, P * P * C]`.
pub fn patchify_batch<T: Scalar>(images: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let &[b, h, w, c] = images.shape() else {
        return Err(Error::Dimension(format!("expected [B, H, W, C] images, got {:?}", images.shape())));
    };
    if h != cfg.image_size || w != cfg.image_size || c != cfg.channels {
        return Err(Error::Dimension(format!(
            "images are {h}x{w}x{c}, model expects {0}x{0}x{1}",
            cfg.image_size, cfg.channels
        )));
    }
    let per = h * w * c;
    let mut data = Vec::with_capacity(images.numel());
    for i in 0..b {
        let img = Tensor::new(&[h, w, c], images.data()[i * per..(i + 1) * per].to_vec())?;
        data.extend(patchify(&img, cfg.patch_size)?.into_data());
    }
    Ok(Tensor::new(&[b, cfg.n_patches(), cfg.patch_dim()], data)?)
}

/// Stacks equally sized `H x W x C` images into one `[B, H, W, C]` batch.
pub fn stack_images<T: Scalar>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for img in images {
        if img.shape() != shape {
            return Err(Error::Dimension(format!("{:?} vs {:?} in one batch", img.shape(), shape)));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Ok(Tensor::new(&full, data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T: Scalar> {
    pub ln1_g: Param<T>,
    pub ln1_b: Param<T>,
    pub qkv_w: Param<T>,
    pub qkv_b: Param<T>,
    pub proj_w: Param<T>,
    pub proj_b: Param<T>,
    pub ln2_g: Param<T>,
    pub ln2_b: Param<T>,
    pub fc1_w: Param<T>,
    pub fc1_b: Param<T>,
    pub fc2_w: Param<T>,
    pub fc2_b: Param<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams<T: Scalar> {
    pub patch_w: Param<T>,
    pub patch_b: Param<T>,
    pub cls: Param<T>,
    /// One row per token, CLS first.
    pub pos: Param<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_g: Param<T>,
    pub norm_b: Param<T>,
    pub head_w: Param<T>,
    pub head_b: Param<T>,
}

impl<T: Scalar> BlockParams<T> {
    fn all(&self) -> [&Param<T>; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.qkv_w, &self.qkv_b, &self.proj_w, &self.proj_b,
            &self.ln2_g, &self.ln2_b, &self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b,
        ]
    }

    fn all_mut(&mut self) -> [&mut Param<T>; 12] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.qkv_w, &mut self.qkv_b, &mut self.proj_w,
            &mut self.proj_b, &mut self.ln2_g, &mut self.ln2_b, &mut self.fc1_w, &mut self.fc1_b,
            &mut self.fc2_w, &mut self.fc2_b,
        ]
    }
}

/// Expected `(name, shape)` of every parameter, in canonical order.
pub fn param_layout(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let hidden = d * cfg.mlp_ratio;
    let mut out = vec![
        ("vit.patch.w".to_string(), vec![cfg.patch_dim(), d]),
        ("vit.patch.b".to_string(), vec![d]),
        ("vit.cls".to_string(), vec![d]),
        ("vit.pos".to_string(), vec![cfg.n_tokens(), d]),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("vit.blocks.{l}.{s}");
        out.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("qkv.w"), vec![d, 3 * d]),
            (p("qkv.b"), vec![3 * d]),
            (p("proj.w"), vec![d, d]),
            (p("proj.b"), vec![d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("fc1.w"), vec![d, hidden]),
            (p("fc1.b"), vec![hidden]),
            (p("fc2.w"), vec![hidden, d]),
            (p("fc2.b"), vec![d]),
        ]);
    }
    out.extend([
        ("vit.norm.g".to_string(), vec![d]),
        ("vit.norm.b".to_string(), vec![d]),
        ("vit.head.w".to_string(), vec![d, cfg.n_classes]),
        ("vit.head.b".to_string(), vec![cfg.n_classes]),
    ]);
    out
}

/// Per-image attention matrices and hidden states, materialized.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T: Scalar = f32> {
    /// `[B, N, d]`: patch embeddings before positions (after masking, if any).
    pub hbar0: Tensor<T>,
    /// `L + 1` tensors of `[B, N + 1, d]`, token 0 is CLS.
    pub hidden: Vec<Tensor<T>>,
    /// `L` tensors of `[B, heads, N + 1, N + 1]`.
    pub attn: Vec<Tensor<T>>,
    /// `[B, classes]`.
    pub logits: Tensor<T>,
    /// `[B, classes]`, softmax of the logits.
    pub probs: Tensor<T>,
}

/// The same trace as tape variables, for differentiating through the model.
pub struct TapeTrace<'t, T: Scalar> {
    pub hbar0: Var<'t, T>,
    pub hidden: Vec<Var<'t, T>>,
    pub attn: Vec<Var<'t, T>>,
    pub logits: Var<'t, T>,
}

impl<T: Scalar> TapeTrace<'_, T> {
    pub fn values(&self) -> Result<ForwardTrace<T>> {
        let tape = self.logits.tape();
        let probs = tape.constant(self.logits.value()).softmax()?.value();
        Ok(ForwardTrace {
            hbar0: self.hbar0.value(),
            hidden: self.hidden.iter().map(Var::value).collect(),
            attn: self.attn.iter().map(Var::value).collect(),
            logits: self.logits.value(),
            probs,
        })
    }
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn batch_size(&self) -> usize {
        self.logits.shape()[0]
    }

    /// Argmax of every row of the logits, ties to the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        let classes = self.logits.shape()[1];
        self.logits.data().chunks_exact(classes).map(argmax).collect()
    }
}

/// Index of the largest value, ties broken toward the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of every image in a trace.
pub fn classify<T: Scalar>(trace: &ForwardTrace<T>) -> Vec<usize> {
    trace.predictions()
}

/// Whether the model's weights receive gradients on this tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

/// Per-patch mixing weights and the replacement vector for masked patches.
#[derive(Clone, Copy)]
pub struct Masking<'t, T: Scalar> {
    /// `[B, N]` in `[0, 1]`.
    pub z: Var<'t, T>,
    /// `[d]`.
    pub baseline: Var<'t, T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViT<T: Scalar = f32> {
    pub config: ViTConfig,
    pub params: ViTParams<T>,
}

impl<T: Scalar> ViT<T> {
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = param_layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if name.ends_with(".g") {
                    vec![1.0; n]
                } else if name.ends_with(".b") {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Ok(Param::new(name, Tensor::from_f64(&shape, &data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(config, params)
    }

    /// Reassembles a model from named parameters, checking every shape.
    pub fn from_params(config: ViTConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if params.len() != layout.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} ViT tensors, found {}",
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
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    p.value.shape()
                )));
            }
            Ok(p)
        };
        let mut it = layout.iter();
        let mut next = || {
            let (n, s) = it.next().expect("layout length checked");
            take(n, s)
        };
        let (patch_w, patch_b, cls, pos) = (next()?, next()?, next()?, next()?);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(BlockParams {
                ln1_g: next()?,
                ln1_b: next()?,
                qkv_w: next()?,
                qkv_b: next()?,
                proj_w: next()?,
                proj_b: next()?,
                ln2_g: next()?,
                ln2_b: next()?,
                fc1_w: next()?,
                fc1_b: next()?,
                fc2_w: next()?,
                fc2_b: next()?,
            });
        }
        let (norm_g, norm_b, head_w, head_b) = (next()?, next()?, next()?, next()?);
        Ok(Self {
            config,
            params: ViTParams {
                patch_w,
                patch_b,
                cls,
                pos,
                blocks,
                norm_g,
                norm_b,
                head_w,
                head_b,
            },
        })
    }

    /// Every parameter in canonical order.
    pub fn named_params(&self) -> Vec<&Param<T>> {
        let p = &self.params;
        let mut out = vec![&p.patch_w, &p.patch_b, &p.cls, &p.pos];
        for b in &p.blocks {
            out.extend(b.all());
        }
        out.extend([&p.norm_g, &p.norm_b, &p.head_w, &p.head_b]);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<&mut Param<T>> {
        let p = &mut self.params;
        let mut out = vec![&mut p.patch_w, &mut p.patch_b, &mut p.cls, &mut p.pos];
        for b in &mut p.blocks {
            out.extend(b.all_mut());
        }
        out.extend([&mut p.norm_g, &mut p.norm_b, &mut p.head_w, &mut p.head_b]);
        out
    }

    pub fn cast<U: Scalar>(&self) -> ViT<U> {
        let params = self.named_params().into_iter().map(Param::cast).collect();
        ViT::from_params(self.config.clone(), params).expect("cast preserves layout")
    }

    /// Records a forward pass over `[B, N, P * P * C]` patches on `tape`.
    ///
    /// With `masking`, each patch embedding `x_i` becomes
    /// `z_i * x_i + (1 - z_i) * b` before positional embeddings are added;
    /// CLS is never masked.
    pub fn trace_on<'t>(
        &self,
        tape: &'t Tape<T>,
        patches: Var<'t, T>,
        masking: Option<Masking<'t, T>>,
        binding: Binding,
    ) -> Result<TapeTrace<'t, T>> {
        let cfg = &self.config;
        let shape = patches.shape();
        let &[batch, n, pd] = shape.as_slice() else {
            return Err(Error::Dimension(format!("expected [B, N, P*P*C] patches, got {shape:?}")));
        };
        if n != cfg.n_patches() || pd != cfg.patch_dim() {
            return Err(Error::Dimension(format!(
                "patches {shape:?} do not match {} patches of {} values",
                cfg.n_patches(),
                cfg.patch_dim()
            )));
        }
        let bind = |p: &Param<T>| match binding {
            Binding::Trainable => tape.param(p),
            Binding::Frozen => tape.frozen(p),
        };
        let p = &self.params;
        let d = cfg.d_model;

        let embed = || -> std::result::Result<_, NumericsError> {
            patches.matmul(bind(&p.patch_w))?.add(bind(&p.patch_b))
        };
        let mut hbar0 = embed().map_err(Error::at_layer(0))?;
        if let Some(m) = masking {
            let (zs, bs) = (m.z.shape(), m.baseline.shape());
            if zs != [batch, n] || bs != [d] {
                return Err(Error::Dimension(format!(
                    "mask {zs:?} and baseline {bs:?} for {batch} images of {n} patches, d = {d}"
                )));
            }
            let mix = || -> std::result::Result<_, NumericsError> {
                let z = m.z.expand_last(d)?;
                let keep = z.mul(hbar0)?;
                let fill = z.affine(-1.0, 1.0)?.mul(m.baseline)?;
                keep.add(fill)
            };
            hbar0 = mix().map_err(Error::at_layer(0))?;
        }
        let h0 = || -> std::result::Result<_, NumericsError> {
            let cls = bind(&p.cls).expand(&[batch, 1])?;
            Var::concat(&[cls, hbar0], 1)?.add(bind(&p.pos))
        };
        let mut h = h0().map_err(Error::at_layer(0))?;

        let mut hidden = vec![h];
        let mut attn = Vec::with_capacity(cfg.n_layers);
        for (l, block) in p.blocks.iter().enumerate() {
            let (next, a) = self.block(h, block, &bind).map_err(Error::at_layer(l + 1))?;
            h = next;
            hidden.push(h);
            attn.push(a);
        }
        let head = || -> std::result::Result<_, NumericsError> {
            let normed = h.layer_norm(bind(&p.norm_g), bind(&p.norm_b), LN_EPS)?;
            let cls = normed.narrow(1, 0, 1)?.reshape(&[batch, d])?;
            cls.matmul(bind(&p.head_w))?.add(bind(&p.head_b))
        };
        let logits = head().map_err(Error::at_layer(cfg.n_layers + 1))?;
        Ok(TapeTrace {
            hbar0,
            hidden,
            attn,
            logits,
        })
    }

    fn block<'t>(
        &self,
        x: Var<'t, T>,
        p: &BlockParams<T>,
        bind: &dyn Fn(&Param<T>) -> Var<'t, T>,
    ) -> std::result::Result<(Var<'t, T>, Var<'t, T>), NumericsError> {
        let cfg = &self.config;
        let shape = x.shape();
        let (batch, tokens) = (shape[0], shape[1]);
        let (d, heads, hd) = (cfg.d_model, cfg.n_heads, cfg.head_dim());

        let normed = x.layer_norm(bind(&p.ln1_g), bind(&p.ln1_b), LN_EPS)?;
        let qkv = normed
            .matmul(bind(&p.qkv_w))?
            .add(bind(&p.qkv_b))?
            .reshape(&[batch, tokens, 3, heads, hd])?
            .permute(&[2, 0, 3, 1, 4])?;
        let pick = |i: usize| qkv.narrow(0, i, 1)?.reshape(&[batch, heads, tokens, hd]);
        let (q, k, v) = (pick(0)?, pick(1)?, pick(2)?);
        let scores = q.matmul(k.transpose_last()?)?.scale(1.0 / (hd as f64).sqrt())?;
        let attn = scores.softmax()?;
        let mixed = attn
            .matmul(v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[batch, tokens, d])?;
        let x = x.add(mixed.matmul(bind(&p.proj_w))?.add(bind(&p.proj_b))?)?;

        let normed = x.layer_norm(bind(&p.ln2_g), bind(&p.ln2_b), LN_EPS)?;
        let mlp = normed
            .matmul(bind(&p.fc1_w))?
            .add(bind(&p.fc1_b))?
            .gelu()?
            .matmul(bind(&p.fc2_w))?
            .add(bind(&p.fc2_b))?;
        Ok((x.add(mlp)?, attn))
    }

    /// Forward pass over a `[B, H, W, C]` batch without gradients.
    pub fn forward(&self, images: &Tensor<T>) -> Result<ForwardTrace<T>> {
        let tape = Tape::new();
        let patches = tape.constant(patchify_batch(images, &self.config)?);
        self.trace_on(&tape, patches, None, Binding::Frozen)?.values()
    }

    /// Forward pass with patch embeddings mixed toward `baseline` by `1 - z`.
    pub fn masked_forward(&self, images: &Tensor<T>, z: &Tensor<T>, baseline: &Tensor<T>) -> Result<ForwardTrace<T>> {
        let tape = Tape::new();
        let patches = tape.constant(patchify_batch(images, &self.config)?);
        let masking = Masking {
            z: tape.constant(z.clone()),
            baseline: tape.constant(baseline.clone()),
        };
        self.trace_on(&tape, patches, Some(masking), Binding::Frozen)?.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            mlp_ratio: 2,
            n_classes: 3,
        }
    }

    fn random_images(cfg: &ViTConfig, batch: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = batch * cfg.image_size * cfg.image_size * cfg.channels;
        let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::new(&[batch, cfg.image_size, cfg.image_size, cfg.channels], data).unwrap()
    }

    #[test]
    fn patch_counts() {
        let img = Tensor::<f32>::zeros(&[48, 48, 3]);
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.shape(), &[9, 768]);
        assert!(patchify(&Tensor::<f32>::zeros(&[50, 50, 3]), 16).is_err());
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let img = Tensor::<f32>::full(&[48, 48, 3], 0.25);
        let p = patchify(&img, 16).unwrap();
        for i in 1..9 {
            assert_eq!(p.row(i), p.row(0));
        }
    }

    #[test]
    fn patchify_round_trip_is_exact() {
        let cfg = ViTConfig::default();
        let img = random_images(&cfg, 1, 4).reshaped(&[48, 48, 3]).unwrap();
        let back = unpatchify(&patchify(&img, 16).unwrap(), 48, 16, 3).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn patch_order_is_row_major() {
        // pixel value = patch index
        let mut data = vec![0.0f32; 8 * 8];
        for y in 0..8 {
            for x in 0..8 {
                data[y * 8 + x] = ((y / 4) * 2 + x / 4) as f32;
            }
        }
        let p = patchify(&Tensor::new(&[8, 8, 1], data).unwrap(), 4).unwrap();
        for i in 0..4 {
            assert!(p.row(i).iter().all(|&v| v == i as f32));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.image_size = 9;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.n_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_is_deterministic_and_normalized() {
        let cfg = tiny();
        let vit = ViT::<f32>::init(cfg.clone(), 1).unwrap();
        let imgs = random_images(&cfg, 3, 2);
        let a = vit.forward(&imgs).unwrap();
        let b = vit.forward(&imgs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hidden.len(), cfg.n_layers + 1);
        for row in a.probs.data().chunks(cfg.n_classes) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        for layer in &a.attn {
            assert_eq!(layer.shape(), &[3, 2, 5, 5]);
            for row in layer.data().chunks(5) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn swapping_patches_permutes_hbar0_rows() {
        let cfg = tiny();
        let vit = ViT::<f32>::init(cfg.clone(), 1).unwrap();
        let img = random_images(&cfg, 1, 3).reshaped(&[8, 8, 3]).unwrap();
        let mut patches = patchify(&img, 4).unwrap();
        let width = cfg.patch_dim();
        let (p0, p3) = (patches.row(0).to_vec(), patches.row(3).to_vec());
        patches.data_mut()[..width].copy_from_slice(&p3);
        patches.data_mut()[3 * width..4 * width].copy_from_slice(&p0);
        let swapped = unpatchify(&patches, 8, 4, 3).unwrap();

        let a = vit.forward(&img.reshaped(&[1, 8, 8, 3]).unwrap()).unwrap();
        let b = vit.forward(&swapped.reshaped(&[1, 8, 8, 3]).unwrap()).unwrap();
        let d = cfg.d_model;
        let rows = |t: &Tensor<f32>, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
        assert_eq!(rows(&a.hbar0, 0), rows(&b.hbar0, 3));
        assert_eq!(rows(&a.hbar0, 3), rows(&b.hbar0, 0));
        assert_eq!(rows(&a.hbar0, 1), rows(&b.hbar0, 1));
    }

    #[test]
    fn full_mask_matches_plain_forward_bit_exactly() {
        let cfg = tiny();
        let vit = ViT::<f32>::init(cfg.clone(), 5).unwrap();
        let imgs = random_images(&cfg, 2, 6);
        let b = Tensor::full(&[cfg.d_model], 3.5);
        let z = Tensor::full(&[2, cfg.n_patches()], 1.0);
        assert_eq!(vit.masked_forward(&imgs, &z, &b).unwrap(), vit.forward(&imgs).unwrap());
    }

    #[test]
    fn empty_mask_ignores_the_image() {
        let cfg = tiny();
        let vit = ViT::<f32>::init(cfg.clone(), 5).unwrap();
        let b = Tensor::full(&[cfg.d_model], -0.3);
        let z = Tensor::zeros(&[1, cfg.n_patches()]);
        let a = vit.masked_forward(&random_images(&cfg, 1, 7), &z, &b).unwrap();
        let c = vit.masked_forward(&random_images(&cfg, 1, 8), &z, &b).unwrap();
        assert_eq!(a.logits, c.logits);
    }

    #[test]
    fn half_mask_averages_embedding_with_baseline() {
        let cfg = tiny();
        let vit = ViT::<f64>::init(cfg.clone(), 5).unwrap();
        let imgs: Tensor<f64> = random_images(&cfg, 1, 9).cast();
        let b = Tensor::full(&[cfg.d_model], 0.8);
        let z = Tensor::full(&[1, cfg.n_patches()], 0.5);
        let plain = vit.forward(&imgs).unwrap();
        let masked = vit.masked_forward(&imgs, &z, &b).unwrap();
        for (m, x) in masked.hbar0.data().iter().zip(plain.hbar0.data()) {
            assert!((m - (x + 0.8) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_length_mismatch_is_rejected() {
        let cfg = tiny();
        let vit = ViT::<f32>::init(cfg.clone(), 5).unwrap();
        let z = Tensor::full(&[1, cfg.n_patches() + 1], 1.0);
        let b = Tensor::zeros(&[cfg.d_model]);
        assert!(matches!(
            vit.masked_forward(&random_images(&cfg, 1, 1), &z, &b),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0f32, 3.0, 1.0]), 1);
        assert_eq!(argmax(&[2.0f32, 2.0, 0.0]), 0);
    }

    #[test]
    fn from_params_rejects_bad_shapes() {
        let cfg = tiny();
        let vit = ViT::<f32>::init(cfg.clone(), 1).unwrap();
        let mut params: Vec<Param<f32>> = vit.named_params().into_iter().cloned().collect();
        params[0].value = Tensor::zeros(&[2, 2]);
        assert!(ViT::from_params(cfg, params).is_err());
    }
}
