//! Segmentation stream (encoder + top-down decoder) and the
//! gradient-isolated prompt encoder.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::concept::{BiasMode, PromptStreamParams};
use crate::error::{dim_err, Error, Result};
use crate::params::{Forward, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Which weights the prompt stream encodes images with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptEncoder {
    /// The segmentation encoder's weights, evaluated without gradients and
    /// with running batch-norm statistics.
    Shared,
    /// A separate, permanently frozen encoder initialized from its own seed.
    Independent,
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output width of each encoder stage; stage `i` runs at stride `2^(i+1)`.
    pub encoder_widths: Vec<usize>,
    /// Hidden width of the low-resolution context block on the deepest
    /// stage (0 disables it).
    pub context_width: usize,
    /// Decoder output channels, also the concept-filter length.
    pub channels: usize,
    /// Cascaded cross-attention blocks in the prompt stream.
    pub blocks: usize,
    pub heads: usize,
    /// FFN hidden width as a multiple of `channels`.
    pub ffn_mult: usize,
    pub bias_mode: BiasMode,
    pub prompt_encoder: PromptEncoder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// The default desk-scale model.
    pub fn desk() -> Self {
        Self {
            in_channels: 3,
            encoder_widths: vec![16, 32, 64],
            context_width: 1024,
            channels: 16,
            blocks: 2,
            heads: 4,
            ffn_mult: 4,
            bias_mode: BiasMode::Projection,
            prompt_encoder: PromptEncoder::Shared,
        }
    }

    /// Tiny configuration used for end-to-end gradient checks.
    pub fn micro() -> Self {
        Self {
            in_channels: 3,
            encoder_widths: vec![4, 4, 6],
            context_width: 4,
            channels: 4,
            blocks: 1,
            heads: 1,
            ffn_mult: 4,
            bias_mode: BiasMode::Projection,
            prompt_encoder: PromptEncoder::Independent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::Config("encoder widths must be non-empty and positive".into()));
        }
        if self.channels == 0 || self.blocks == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("channels, blocks, heads and ffn_mult must be positive".into()));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} channels cannot be split over {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    /// Required divisor of input height and width.
    pub fn stride(&self) -> usize {
        1 << self.encoder_widths.len()
    }

    pub fn feature_width(&self) -> usize {
        *self.encoder_widths.last().expect("validated")
    }
}

/// He-uniform initialisation, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.gen_range(-bound..bound)))
}

/// Uniform `±1/sqrt(fan_in)` for linear maps.
pub(crate) fn linear_init<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.gen_range(-bound..bound)))
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub pad: usize,
}

impl ConvLayer {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        bias: bool,
    ) -> Self {
        let weight = store.add_weight(&format!("{name}.weight"), he_uniform(rng, &[cout, cin, k, k], cin * k * k));
        let bias = bias.then(|| store.add_weight(&format!("{name}.bias"), Tensor::zeros([cout])));
        Self { weight, bias, pad: k / 2 }
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = fw.param(self.weight);
        let y = fw.tape.conv2d(x, w, 1, self.pad)?;
        match self.bias {
            Some(b) => {
                let b = fw.param(b);
                fw.tape.channel_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNormLayer {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add_weight(&format!("{name}.gamma"), Tensor::ones([c])),
            beta: store.add_weight(&format!("{name}.beta"), Tensor::zeros([c])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros([c])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::ones([c])),
        }
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var, training: bool) -> Result<Var> {
        let (g, b) = (fw.param(self.gamma), fw.param(self.beta));
        let store = fw.store();
        let running = (
            store.get(self.running_mean).data(),
            store.get(self.running_var).data(),
        );
        let y = fw.tape.batch_norm(x, g, b, running, training)?;
        if let Some(stats) = fw.tape.batch_stats(y) {
            fw.record_batch_stats(self.running_mean, self.running_var, stats);
        }
        Ok(y)
    }
}

/// Two 3×3 conv + BN + ReLU units followed by 2×2 average pooling.
#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub conv1: ConvLayer,
    pub bn1: BatchNormLayer,
    pub conv2: ConvLayer,
    pub bn2: BatchNormLayer,
}

/// Two 3×3 convolutions at half the deepest resolution, upsampled and added
/// back onto the deepest stage.
#[derive(Debug, Clone)]
pub struct ContextBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub stages: Vec<EncoderStage>,
    pub context: Option<ContextBlock>,
}

impl EncoderParams {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) -> Self {
        let mut cin = cfg.in_channels;
        let stages = cfg
            .encoder_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let name = format!("{prefix}.stage{}", i + 1);
                let stage = EncoderStage {
                    conv1: ConvLayer::new(store, rng, &format!("{name}.conv1"), (cin, w, 3), false),
                    bn1: BatchNormLayer::new(store, &format!("{name}.bn1"), w),
                    conv2: ConvLayer::new(store, rng, &format!("{name}.conv2"), (w, w, 3), false),
                    bn2: BatchNormLayer::new(store, &format!("{name}.bn2"), w),
                };
                cin = w;
                stage
            })
            .collect();
        let context = (cfg.context_width > 0).then(|| {
            let (f, h) = (cfg.feature_width(), cfg.context_width);
            ContextBlock {
                conv1: ConvLayer::new(store, rng, &format!("{prefix}.context.conv1"), (f, h, 3), true),
                conv2: ConvLayer::new(store, rng, &format!("{prefix}.context.conv2"), (h, f, 3), true),
            }
        });
        Self { stages, context }
    }

    /// Runs the encoder, returning one feature map per stage (strides 2, 4, 8, ...).
    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, images: Var, training: bool) -> Result<Vec<Var>> {
        let shape = fw.tape.shape(images).to_vec();
        let div = 1 << self.stages.len();
        if shape.len() != 4 || shape[2] % div != 0 || shape[3] % div != 0 {
            return Err(dim_err!("encoder input {shape:?} must be [B, C, H, W] with H, W divisible by {div}"));
        }
        let mut x = images;
        let mut pyramid = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            x = s.conv1.forward(fw, x)?;
            x = s.bn1.forward(fw, x, training)?;
            x = fw.tape.relu(x)?;
            x = s.conv2.forward(fw, x)?;
            x = s.bn2.forward(fw, x, training)?;
            x = fw.tape.relu(x)?;
            x = fw.tape.avg_pool2(x)?;
            pyramid.push(x);
        }
        if let Some(ctx) = &self.context {
            let deepest = *pyramid.last().expect("at least one stage");
            let s = fw.tape.shape(deepest).to_vec();
            let (h, w) = (s[2], s[3]);
            let low = fw.tape.resize(deepest, h.div_ceil(2), w.div_ceil(2))?;
            let y = ctx.conv1.forward(fw, low)?;
            let y = fw.tape.relu(y)?;
            let y = ctx.conv2.forward(fw, y)?;
            let y = fw.tape.resize(y, h, w)?;
            let out = fw.tape.add(deepest, y)?;
            *pyramid.last_mut().expect("at least one stage") = out;
        }
        Ok(pyramid)
    }
}

/// Top-down pathway: lateral 1×1 convs, 2× bilinear upsampling, addition,
/// 3×3 fusion. `fusions[0]` produces the final stride-2 map.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub laterals: Vec<ConvLayer>,
    pub fusions: Vec<ConvLayer>,
}

/// Name of the decoder's last layer (the one fine-tuned in continual learning).
pub const FINAL_FUSION: &str = "decoder.fuse0";

impl DecoderParams {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let laterals = cfg
            .encoder_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| ConvLayer::new(store, rng, &format!("decoder.lateral{i}"), (w, c, 1), true))
            .collect();
        let fusions = (0..cfg.encoder_widths.len() - 1)
            .map(|i| ConvLayer::new(store, rng, &format!("decoder.fuse{i}"), (c, c, 3), true))
            .collect();
        Self { laterals, fusions }
    }

    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, pyramid: &[Var]) -> Result<Var> {
        if pyramid.len() != self.laterals.len() {
            return Err(dim_err!(
                "decoder expects {} pyramid levels, got {}",
                self.laterals.len(),
                pyramid.len()
            ));
        }
        let top = pyramid.len() - 1;
        let mut p = self.laterals[top].forward(fw, pyramid[top])?;
        for level in (0..top).rev() {
            let lat = self.laterals[level].forward(fw, pyramid[level])?;
            let s = fw.tape.shape(lat).to_vec();
            let up = fw.tape.resize(p, s[2], s[3])?;
            let sum = fw.tape.add(lat, up)?;
            p = self.fusions[level].forward(fw, sum)?;
            if level > 0 {
                p = fw.tape.relu(p)?;
            }
        }
        Ok(p)
    }
}

/// All tensors of the model and the layer layout that indexes them.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub prompt_stream: PromptStreamParams,
    /// Present when [`PromptEncoder::Independent`] is configured.
    pub prompt_encoder: Option<EncoderParams>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(&mut store, &mut rng, "encoder", &config);
        let decoder = DecoderParams::new(&mut store, &mut rng, &config);
        let prompt_stream = PromptStreamParams::new(&mut store, &mut rng, &config);
        let prompt_encoder = match config.prompt_encoder {
            PromptEncoder::Shared => None,
            PromptEncoder::Independent => {
                let mut copy_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
                let enc = EncoderParams::new(&mut store, &mut copy_rng, "prompt_encoder", &config);
                store.train_only(|n| !n.starts_with("prompt_encoder."));
                Some(enc)
            }
        };
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            prompt_stream,
            prompt_encoder,
        })
    }

    /// Same architecture with every tensor converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            prompt_stream: self.prompt_stream.clone(),
            prompt_encoder: self.prompt_encoder.clone(),
        }
    }

    pub fn num_weights(&self) -> usize {
        self.store.num_weights()
    }

    pub fn num_trainable(&self) -> usize {
        self.store.num_trainable()
    }

    /// Encoder pass on the segmentation stream.
    pub fn encode(&self, fw: &mut Forward<'_, T>, images: Var, training: bool) -> Result<Vec<Var>> {
        self.encoder.forward(fw, images, training)
    }

    pub fn decode(&self, fw: &mut Forward<'_, T>, pyramid: &[Var]) -> Result<Var> {
        self.decoder.forward(fw, pyramid)
    }

    /// Deepest encoder feature of the prompt images, computed on a separate
    /// frozen tape in inference mode so no gradient can reach the encoder.
    pub fn prompt_encode(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let encoder = self.prompt_encoder.as_ref().unwrap_or(&self.encoder);
        let mut fw = Forward::frozen(&self.store);
        let x = fw.tape.constant(images);
        let pyramid = encoder.forward(&mut fw, x, false)?;
        Ok(fw.tape.tensor(*pyramid.last().expect("at least one stage")))
    }

    /// Globally pooled prompt-encoder features, `[G, feature_width]`.
    pub fn gap_embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let features = self.prompt_encode(images)?;
        let mut tape = crate::autograd::Tape::new();
        let f = tape.constant(&features);
        let e = tape.global_avg_pool(f)?;
        Ok(tape.tensor(e))
    }

    /// Inference-mode decoder map for a batch of images.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut fw = Forward::frozen(&self.store);
        let x = fw.tape.constant(images);
        let pyramid = self.encode(&mut fw, x, false)?;
        let f = self.decode(&mut fw, &pyramid)?;
        Ok(fw.tape.tensor(f))
    }

    /// How the context bias is derived from the background descriptor.
    pub fn bias_mode(&self) -> BiasMode {
        self.config.bias_mode
    }
}
