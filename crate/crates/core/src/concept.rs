//! Concept filters: group prompts are condensed into a per-task 1×1 kernel
//! (`w_obj`) and scalar bias (`b_ctx`) that act on the decoder output.
//!
//! Pipeline for one group prompt:
//!
//! 1. prompt images → frozen encoder → deepest features `F_g [G, 64, h, w]`
//! 2. per-position projection to `C` channels, flattened into memory tokens
//!    `F_mem [G·h·w, C]` in (group, row, col) order
//! 3. foreground / background descriptors by masked average pooling with
//!    the masks bilinearly resized to `h×w`
//! 4. `L` cascaded cross-attention blocks refine both descriptors against
//!    `F_mem`
//! 5. refined foreground descriptor → `w_obj`; refined background
//!    descriptor → scalar `b_ctx` (see [`BiasMode`])

use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{dim_err, Error, Result};
use crate::kernels;
use crate::networks::{linear_init, ModelConfig, ModelParams};
use crate::params::{Forward, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Denominator guard of masked average pooling.
pub const POOL_EPS: f64 = 1e-6;

/// How the refined background descriptor becomes the scalar bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasMode {
    /// `b_ctx = <u, D_bg>` with a learned vector `u`.
    Projection,
    /// `b_ctx = mean(D_bg)`.
    ChannelMean,
    /// `b_ctx = <w_obj, D_bg>`, i.e. `D_bg` added to every feature before
    /// the dot product.
    FeatureShift,
}

impl BiasMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(Self::Projection),
            "channel_mean" => Ok(Self::ChannelMean),
            "feature_shift" => Ok(Self::FeatureShift),
            _ => Err(Error::Config(format!("unknown bias mode {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Projection => "projection",
            Self::ChannelMean => "channel_mean",
            Self::FeatureShift => "feature_shift",
        }
    }
}

/// One cross-attention block: `Z = X + softmax(QKᵀ/d)·V·W_Z`, then
/// `X' = Z + FFN(Z)`. Projection matrices are stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct MhcaBlockParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wz: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct PromptStreamParams {
    /// `[feature_width, C]`.
    pub w_proj: ParamId,
    pub blocks: Vec<MhcaBlockParams>,
    /// `[C, 1]`, used by [`BiasMode::Projection`].
    pub bias_proj: ParamId,
    pub heads: usize,
}

/// Prefix of every prompt-stream parameter name.
pub const PROMPT_STREAM: &str = "prompt_stream.";

impl PromptStreamParams {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let f = cfg.feature_width();
        let hidden = cfg.ffn_mult * c;
        let w_proj = store.add_weight("prompt_stream.w_proj", linear_init(rng, &[f, c], f));
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let mut lin = |name: &str, shape: [usize; 2]| {
                    store.add_weight(&format!("prompt_stream.block{i}.{name}"), linear_init(rng, &shape, shape[0]))
                };
                let (wq, wk, wv, wz) = (lin("wq", [c, c]), lin("wk", [c, c]), lin("wv", [c, c]), lin("wz", [c, c]));
                let ffn_w1 = lin("ffn_w1", [c, hidden]);
                let ffn_w2 = lin("ffn_w2", [hidden, c]);
                MhcaBlockParams {
                    wq,
                    wk,
                    wv,
                    wz,
                    ffn_w1,
                    ffn_b1: store.add_weight(&format!("prompt_stream.block{i}.ffn_b1"), Tensor::zeros([hidden])),
                    ffn_w2,
                    ffn_b2: store.add_weight(&format!("prompt_stream.block{i}.ffn_b2"), Tensor::zeros([c])),
                }
            })
            .collect();
        let bias_proj = store.add_weight("prompt_stream.bias_proj", linear_init(rng, &[c, 1], c));
        if cfg.bias_mode != BiasMode::Projection {
            store.set_trainable(bias_proj, false);
        }
        Self {
            w_proj,
            blocks,
            bias_proj,
            heads: cfg.heads,
        }
    }
}

/// `G` image–mask pairs defining one task by example.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPrompt<T> {
    pub task: String,
    /// `[G, 3, H, W]`.
    pub images: Tensor<T>,
    /// `[G, 1, H, W]`, values in `[0, 1]`.
    pub fg_masks: Tensor<T>,
    /// `1 - fg_masks`.
    pub bg_masks: Tensor<T>,
    /// Identifiers of the samples the prompt was assembled from.
    pub provenance: Vec<String>,
}

impl<T: Scalar> GroupPrompt<T> {
    pub fn new(task: impl Into<String>, images: Tensor<T>, fg_masks: Tensor<T>, provenance: Vec<String>) -> Result<Self> {
        let task = task.into();
        let (si, sm) = (images.shape(), fg_masks.shape());
        if si.len() != 4 || sm.len() != 4 || sm[1] != 1 || si[0] != sm[0] || si[2..] != sm[2..] {
            return Err(dim_err!("prompt images {si:?} and masks {sm:?} disagree"));
        }
        if fg_masks.data().iter().any(|&m| !(m >= T::zero() && m <= T::one())) {
            return Err(Error::Data(format!("prompt masks for {task} leave [0, 1]")));
        }
        let plane = sm[2] * sm[3];
        let mass = |c: &[T]| c.iter().map(|v| v.f64()).sum::<f64>();
        let any_fg = fg_masks.data().chunks(plane).any(|c| mass(c) > 0.0);
        let any_bg = fg_masks.data().chunks(plane).any(|c| mass(c) < plane as f64);
        if !any_fg || !any_bg {
            return Err(Error::Data(format!(
                "prompt group for {task} needs foreground and background pixels"
            )));
        }
        let bg_masks = fg_masks.map(|m| T::one() - m);
        Ok(Self {
            task,
            images,
            fg_masks,
            bg_masks,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The same prompt with foreground and background exchanged.
    pub fn inverted(&self) -> Self {
        Self {
            fg_masks: self.bg_masks.clone(),
            bg_masks: self.fg_masks.clone(),
            ..self.clone()
        }
    }

    /// The same prompt with its members reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let pick = |t: &Tensor<T>| {
            let items: Vec<_> = order.iter().map(|&i| t.index_first(i)).collect();
            Tensor::stack(&items.iter().collect::<Vec<_>>())
        };
        let mut out = Self::new(
            self.task.clone(),
            pick(&self.images)?,
            pick(&self.fg_masks)?,
            order.iter().map(|&i| self.provenance.get(i).cloned().unwrap_or_default()).collect(),
        )?;
        out.bg_masks = pick(&self.bg_masks)?;
        Ok(out)
    }

    /// The same prompt with different foreground masks.
    pub fn with_fg_masks(&self, fg_masks: Tensor<T>) -> Result<Self> {
        Self::new(self.task.clone(), self.images.clone(), fg_masks, self.provenance.clone())
    }
}

/// Dynamic-head parameters for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptFilter<T> {
    pub w_obj: Vec<T>,
    pub b_ctx: T,
    pub task: String,
    pub provenance: Vec<String>,
}

impl<T: Scalar> ConceptFilter<T> {
    /// Binds the filter onto a tape as constants `([1, C], [1])`.
    pub fn bind(&self, fw: &mut Forward<'_, T>) -> (Var, Var) {
        let c = self.w_obj.len();
        let w = fw.tape.input(vec![1, c], self.w_obj.clone(), false);
        let b = fw.tape.input(vec![1], vec![self.b_ctx], false);
        (w, b)
    }

    pub fn is_finite(&self) -> bool {
        self.b_ctx.is_finite() && self.w_obj.iter().all(|v| v.is_finite())
    }
}

/// Tape handles of a filter built inside a differentiable pass.
#[derive(Debug, Clone, Copy)]
pub struct FilterVars {
    /// `[1, C]`.
    pub w_obj: Var,
    /// `[1]`.
    pub b_ctx: Var,
}

/// Projects prompt features `[G, F, h, w]` into memory tokens `[G·h·w, C]`.
pub fn project_memory<T: Scalar>(fw: &mut Forward<'_, T>, stream: &PromptStreamParams, features: Var) -> Result<Var> {
    let tokens = fw.tape.nchw_to_tokens(features)?;
    let w = fw.param(stream.w_proj);
    fw.tape.matmul(tokens, w)
}

/// Resizes `[G, 1, H, W]` masks to `h×w` and flattens them in token order.
pub fn downsample_masks<T: Scalar>(masks: &Tensor<T>, h: usize, w: usize) -> Vec<T> {
    let s = masks.shape();
    kernels::resize_forward(masks.data(), s[0] * s[1], (s[2], s[3]), (h, w))
}

/// `Σ_t F_mem[t]·m[t] / (Σ_t m[t] + ε)`, a `[1, C]` descriptor.
pub fn masked_average_pool<T: Scalar>(fw: &mut Forward<'_, T>, memory: Var, mask: &[T], task: &str) -> Result<Var> {
    let t = fw.tape.shape(memory)[0];
    if mask.len() != t {
        return Err(dim_err!("mask has {} weights for {t} tokens", mask.len()));
    }
    let mass: f64 = mask.iter().map(|v| v.f64()).sum();
    if mass < POOL_EPS {
        return Err(Error::EmptyMask {
            task: task.to_string(),
            mass,
        });
    }
    let scale = T::of(1.0 / (mass + POOL_EPS));
    let row = fw.tape.input(vec![1, t], mask.iter().map(|&m| m * scale).collect(), false);
    fw.tape.matmul(row, memory)
}

/// One cross-attention refinement of the query rows `x [q, C]` against
/// `memory [T, C]`. When `attention` is given, the per-head attention maps
/// (`[q, T]` each) are pushed onto it.
pub fn mhca_block<T: Scalar>(
    fw: &mut Forward<'_, T>,
    block: &MhcaBlockParams,
    heads: usize,
    x: Var,
    memory: Var,
    mut attention: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let c = fw.tape.shape(x)[1];
    if fw.tape.shape(memory)[1] != c || c % heads != 0 {
        return Err(dim_err!(
            "attention widths: query {:?}, memory {:?}, {heads} heads",
            fw.tape.shape(x),
            fw.tape.shape(memory)
        ));
    }
    let dh = c / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let (wq, wk, wv, wz) = (fw.param(block.wq), fw.param(block.wk), fw.param(block.wv), fw.param(block.wz));
    let q = fw.tape.matmul(x, wq)?;
    let k = fw.tape.matmul(memory, wk)?;
    let v = fw.tape.matmul(memory, wv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                fw.tape.narrow(q, 1, h * dh, dh)?,
                fw.tape.narrow(k, 1, h * dh, dh)?,
                fw.tape.narrow(v, 1, h * dh, dh)?,
            )
        };
        let scores = fw.tape.matmul_nt(qh, kh)?;
        let scores = fw.tape.scale(scores, scale)?;
        let m = fw.tape.softmax(scores, 1)?;
        if let Some(maps) = attention.as_deref_mut() {
            maps.push(m);
        }
        outs.push(fw.tape.matmul(m, vh)?);
    }
    let mv = if heads == 1 { outs[0] } else { fw.tape.concat(&outs, 1)? };
    let proj = fw.tape.matmul(mv, wz)?;
    let z = fw.tape.add(x, proj)?;
    let (w1, b1, w2, b2) = (
        fw.param(block.ffn_w1),
        fw.param(block.ffn_b1),
        fw.param(block.ffn_w2),
        fw.param(block.ffn_b2),
    );
    let hdn = fw.tape.matmul(z, w1)?;
    let hdn = fw.tape.row_bias(hdn, b1)?;
    let hdn = fw.tape.relu(hdn)?;
    let ffn = fw.tape.matmul(hdn, w2)?;
    let ffn = fw.tape.row_bias(ffn, b2)?;
    fw.tape.add(z, ffn)
}

/// Builds the filter of `prompt` on an existing pass. Gradients reach the
/// prompt-stream weights but never the encoder.
pub fn filter_vars<T: Scalar>(fw: &mut Forward<'_, T>, model: &ModelParams<T>, prompt: &GroupPrompt<T>) -> Result<FilterVars> {
    let features = model.prompt_encode(&prompt.images)?;
    let (h, w) = (features.shape()[2], features.shape()[3]);
    let fvar = fw.tape.constant(&features);
    filter_vars_from_features(fw, model, fvar, prompt, (h, w))
}

/// [`filter_vars`] with the prompt-encoder features already on the tape.
pub fn filter_vars_from_features<T: Scalar>(
    fw: &mut Forward<'_, T>,
    model: &ModelParams<T>,
    features: Var,
    prompt: &GroupPrompt<T>,
    (h, w): (usize, usize),
) -> Result<FilterVars> {
    let stream = &model.prompt_stream;
    let memory = project_memory(fw, stream, features)?;
    let fg = downsample_masks(&prompt.fg_masks, h, w);
    let bg = downsample_masks(&prompt.bg_masks, h, w);
    let d_fg = masked_average_pool(fw, memory, &fg, &prompt.task)?;
    let d_bg = masked_average_pool(fw, memory, &bg, &prompt.task)?;
    // both descriptors are independent query rows of the same blocks
    let mut x = fw.tape.concat(&[d_fg, d_bg], 0)?;
    for block in &stream.blocks {
        x = mhca_block(fw, block, stream.heads, x, memory, None)?;
    }
    let w_obj = fw.tape.narrow(x, 0, 0, 1)?;
    let d_bg = fw.tape.narrow(x, 0, 1, 1)?;
    let b_ctx = match model.config.bias_mode {
        BiasMode::Projection => {
            let u = fw.param(stream.bias_proj);
            fw.tape.matmul(d_bg, u)?
        }
        BiasMode::ChannelMean => {
            let s = fw.tape.sum(d_bg)?;
            fw.tape.scale(s, T::of(1.0 / model.config.channels as f64))?
        }
        BiasMode::FeatureShift => {
            let p = fw.tape.mul(w_obj, d_bg)?;
            fw.tape.sum(p)?
        }
    };
    let b_ctx = fw.tape.reshape(b_ctx, &[1])?;
    Ok(FilterVars { w_obj, b_ctx })
}

/// Inference-mode filter for a prompt.
pub fn build_filter<T: Scalar>(model: &ModelParams<T>, prompt: &GroupPrompt<T>) -> Result<ConceptFilter<T>> {
    let mut fw = Forward::frozen(&model.store);
    let vars = filter_vars(&mut fw, model, prompt)?;
    let filter = ConceptFilter {
        w_obj: fw.tape.value(vars.w_obj).to_vec(),
        b_ctx: fw.tape.item(vars.b_ctx),
        task: prompt.task.clone(),
        provenance: prompt.provenance.clone(),
    };
    if !filter.is_finite() {
        return Err(Error::Numeric(format!("concept filter for {} is not finite", prompt.task)));
    }
    Ok(filter)
}

/// Per-pixel `<w_obj, f(p)> + b_ctx` on `f [B, C, h, w]`, resized to
/// `out_h × out_w`; returns logits `[B, 1, out_h, out_w]`.
pub fn dynamic_head<T: Scalar>(
    fw: &mut Forward<'_, T>,
    features: Var,
    w_obj: Var,
    b_ctx: Var,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let s = fw.tape.shape(features).to_vec();
    let c = fw.tape.value(w_obj).len();
    if s.len() != 4 || s[1] != c {
        return Err(dim_err!("dynamic head: features {s:?} vs filter of length {c}"));
    }
    let kernel = fw.tape.reshape(w_obj, &[1, c, 1, 1])?;
    let logits = fw.tape.conv2d(features, kernel, 1, 0)?;
    let logits = fw.tape.channel_bias(logits, b_ctx)?;
    fw.tape.resize(logits, out_h, out_w)
}
