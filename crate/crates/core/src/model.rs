//! The full restoration network.
//!
//! A 3×3 convolution lifts the degraded image to `C` channels; a residual
//! convolutional encoder produces five scales `e1..e5` (widths `C..16C`,
//! each half the resolution of the previous one); `n` chained sub-decoders
//! each run four stages from coarse to fine and emit a residual image that
//! is added to the input.
//!
//! Decoder stage at scale `k` (width `w_k`): the deeper feature is mapped to
//! `w_k` channels by a 1×1 convolution and upsampled 2× (nearest), then
//! concatenated with `e_k` (and with the previous sub-decoder's `d_k`),
//! fused back to `w_k` by another 1×1 convolution and refined by a stack of
//! decoder blocks. The coarsest stage starts from `e5`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::memvssm::{DecoderBlock, DecoderBlockConfig};
use crate::nn::{Conv2d, Init, Linear};
use crate::tensor::{FeatureMap, Tensor};

/// Number of encoder scales.
pub const SCALES: usize = 5;
/// Number of decoding stages per sub-decoder.
pub const STAGES: usize = 4;
/// Parameter-name prefixes of the part that can be frozen.
pub const ENCODER_PREFIXES: [&str; 2] = ["shallow.", "encoder."];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Shallow feature width `C`.
    pub base_width: usize,
    pub n_subdecoders: usize,
    pub chunks: usize,
    pub bank_depth: usize,
    pub state_dim: usize,
    pub encoder_blocks_per_scale: usize,
    pub decoder_blocks_per_stage: usize,
    pub ffn_expansion: f64,
    pub freeze_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 16,
            n_subdecoders: 1,
            chunks: 4,
            bank_depth: 1,
            state_dim: 8,
            encoder_blocks_per_scale: 2,
            decoder_blocks_per_stage: 2,
            ffn_expansion: 2.0,
            freeze_encoder: false,
        }
    }
}

impl ModelConfig {
    /// Width of scale `k` (1-based): `C·2^(k−1)`.
    pub fn width(&self, k: usize) -> usize {
        self.base_width << (k - 1)
    }

    pub fn block_config(&self, k: usize) -> DecoderBlockConfig {
        DecoderBlockConfig {
            channels: self.width(k),
            chunks: self.chunks,
            bank_depth: self.bank_depth,
            state_dim: self.state_dim,
            ffn_expansion: self.ffn_expansion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::config("base width must be positive"));
        }
        if ![1, 2, 4].contains(&self.n_subdecoders) {
            return Err(Error::config(format!(
                "n_subdecoders must be 1, 2 or 4, got {}",
                self.n_subdecoders
            )));
        }
        for k in 1..=SCALES {
            if self.width(k) % self.chunks.max(1) != 0 {
                return Err(Error::config(format!(
                    "width {} at scale {k} is not divisible by {} chunks",
                    self.width(k),
                    self.chunks
                )));
            }
        }
        if self.encoder_blocks_per_scale == 0 || self.decoder_blocks_per_stage == 0 {
            return Err(Error::config("block counts must be positive"));
        }
        for k in 1..=STAGES {
            self.block_config(k).validate()?;
        }
        Ok(())
    }
}

/// Images must have both sides divisible by this.
pub const SPATIAL_MULTIPLE: usize = 1 << (SCALES - 1);

pub fn check_image_dims(h: usize, w: usize) -> Result<()> {
    if h < SPATIAL_MULTIPLE || w < SPATIAL_MULTIPLE || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
        return Err(Error::config(format!(
            "image {h}×{w} must have sides that are positive multiples of {SPATIAL_MULTIPLE}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(init: &mut Init, c: usize) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv2d::same(&mut init.scope("conv1"), c, c, 3)?,
            conv2: Conv2d::same(&mut init.scope("conv2"), c, c, 3)?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, x)?;
        let y = g.silu(y);
        let y = self.conv2.forward(g, y)?;
        g.add(x, y)
    }
}

#[derive(Debug, Clone)]
struct EncoderScale {
    down: Option<Conv2d>,
    blocks: Vec<ResBlock>,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    /// Scale index `k` of this stage (4 for the coarsest).
    scale: usize,
    up: Linear,
    fuse: Linear,
    blocks: Vec<DecoderBlock>,
}

#[derive(Debug, Clone)]
struct SubDecoder {
    /// Coarse to fine.
    stages: Vec<DecoderStage>,
    head: Conv2d,
}

/// Graph handles of the five encoder scales, `e[0]` being full resolution.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars(pub [Var; SCALES]);

/// Output of one sub-decoder on a graph.
#[derive(Debug, Clone)]
pub struct SubDecoderVars {
    /// `d[k-1]` is the stage output at scale `k`.
    pub features: [Var; STAGES],
    pub residual: Var,
    /// MemVSSM outputs of every decoder block, in execution order.
    pub memvssm: Vec<Var>,
}

/// Output of [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub residuals: Vec<Var>,
    pub restored: Vec<Var>,
    /// MemVSSM outputs of every decoder block (all sub-decoders, execution order).
    pub memvssm: Vec<Var>,
}

/// Plain-tensor encoder output: widths `C..16C`, resolution halving per scale.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderFeatures {
    pub scales: Vec<FeatureMap>,
}

/// Per-sub-decoder residual images and restored images `X_n + I`.
#[derive(Debug, Clone, PartialEq)]
pub struct RestoredOutputs {
    pub residuals: Vec<Tensor>,
    pub restored: Vec<Tensor>,
}

/// Network structure; parameter values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    shallow: Conv2d,
    encoder: Vec<EncoderScale>,
    decoders: Vec<SubDecoder>,
}

impl Model {
    /// Builds the network and registers freshly initialized parameters.
    /// Residual heads start at zero so the untrained model is the identity.
    pub fn new(config: ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(store, &mut rng);
        let c = config.base_width;
        let shallow = Conv2d::same(&mut init.scope("shallow"), 3, c, 3)?;

        let mut encoder = Vec::with_capacity(SCALES);
        for k in 1..=SCALES {
            let mut s = init.scope(&format!("encoder.scale{k}"));
            let down = (k > 1)
                .then(|| Conv2d::new(&mut s.scope("down"), config.width(k - 1), config.width(k), 2, 2, 0))
                .transpose()?;
            let blocks = (0..config.encoder_blocks_per_scale)
                .map(|j| ResBlock::new(&mut s.scope(&format!("block{j}")), config.width(k)))
                .collect::<Result<_>>()?;
            encoder.push(EncoderScale { down, blocks });
        }

        let mut decoders = Vec::with_capacity(config.n_subdecoders);
        for n in 0..config.n_subdecoders {
            let mut d = init.scope(&format!("decoder{n}"));
            let mut stages = Vec::with_capacity(STAGES);
            for k in (1..=STAGES).rev() {
                let mut s = d.scope(&format!("stage{k}"));
                let w = config.width(k);
                let fan_in = if n == 0 { 2 * w } else { 3 * w };
                let up = Linear::new(&mut s.scope("up"), config.width(k + 1), w, true)?;
                let fuse = Linear::new(&mut s.scope("fuse"), fan_in, w, true)?;
                let bcfg = config.block_config(k);
                let blocks = (0..config.decoder_blocks_per_stage)
                    .map(|j| DecoderBlock::new(&mut s.scope(&format!("block{j}")), &bcfg))
                    .collect::<Result<_>>()?;
                stages.push(DecoderStage { scale: k, up, fuse, blocks });
            }
            let head = Conv2d::same(&mut d.scope("head"), c, 3, 3)?;
            decoders.push(SubDecoder { stages, head });
        }
        drop(init);

        let model = Model {
            config,
            shallow,
            encoder,
            decoders,
        };
        for sd in &model.decoders {
            store.get_mut(sd.head.weight).data_mut().fill(0.0);
            store.get_mut(sd.head.bias).data_mut().fill(0.0);
            for st in &sd.stages {
                for b in &st.blocks {
                    b.memvssm.mamba.init_dt_bias(store);
                }
            }
        }
        if model.config.freeze_encoder {
            set_encoder_trainable(store, false);
        }
        Ok(model)
    }

    /// Number of decoder blocks over all sub-decoders.
    pub fn num_decoder_blocks(&self) -> usize {
        self.decoders
            .iter()
            .flat_map(|d| &d.stages)
            .map(|s| s.blocks.len())
            .sum()
    }

    /// Human-readable id of decoder block `i` in execution order.
    pub fn decoder_block_name(&self, i: usize) -> Option<String> {
        let mut idx = 0;
        for (n, d) in self.decoders.iter().enumerate() {
            for s in &d.stages {
                for j in 0..s.blocks.len() {
                    if idx == i {
                        return Some(format!("decoder{n}.stage{}.block{j}", s.scale));
                    }
                    idx += 1;
                }
            }
        }
        None
    }

    /// Channel count of decoder block `i`.
    pub fn decoder_block_width(&self, i: usize) -> Option<usize> {
        self.decoders
            .iter()
            .flat_map(|d| &d.stages)
            .flat_map(|s| s.blocks.iter().map(move |b| b.channels))
            .nth(i)
    }

    /// Residual-head parameters of every sub-decoder.
    pub fn head_params(&self) -> Vec<crate::autodiff::ParamId> {
        self.decoders.iter().flat_map(|d| [d.head.weight, d.head.bias]).collect()
    }

    pub fn shallow(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let (c, h, w) = g.value(image).dims3()?;
        if c != 3 {
            return Err(Error::config(format!("expected a 3-channel image, got {c}")));
        }
        check_image_dims(h, w)?;
        self.shallow.forward(g, image)
    }

    pub fn encode(&self, g: &mut Graph, f: Var) -> Result<EncoderVars> {
        let mut x = f;
        let mut out = Vec::with_capacity(SCALES);
        for scale in &self.encoder {
            if let Some(down) = &scale.down {
                x = down.forward(g, x)?;
            }
            for b in &scale.blocks {
                x = b.forward(g, x)?;
            }
            out.push(x);
        }
        Ok(EncoderVars(out.try_into().expect("five scales")))
    }

    /// Runs sub-decoder `n`. `prev` holds the previous sub-decoder's stage
    /// features, which are fused into every stage when present.
    pub fn decode(&self, g: &mut Graph, n: usize, enc: &EncoderVars, prev: Option<&[Var; STAGES]>) -> Result<SubDecoderVars> {
        let sd = self
            .decoders
            .get(n)
            .ok_or_else(|| Error::config(format!("no sub-decoder {n}")))?;
        if (n == 0) != prev.is_none() {
            return Err(Error::config("only sub-decoders after the first take previous features"));
        }
        let mut x = enc.0[SCALES - 1];
        let mut features = [x; STAGES];
        let mut memvssm = Vec::new();
        for st in &sd.stages {
            let k = st.scale;
            let up = st.up.forward(g, x)?;
            let up = g.upsample2x(up)?;
            let mut parts = vec![up, enc.0[k - 1]];
            if let Some(p) = prev {
                parts.push(p[k - 1]);
            }
            let cat = g.concat_channels(&parts)?;
            x = st.fuse.forward(g, cat)?;
            for b in &st.blocks {
                let out = b.forward(g, x)?;
                memvssm.push(out.memvssm);
                x = out.output;
            }
            features[k - 1] = x;
        }
        let residual = sd.head.forward(g, x)?;
        Ok(SubDecoderVars {
            features,
            residual,
            memvssm,
        })
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<ModelVars> {
        let f = self.shallow(g, image)?;
        let encoder = self.encode(g, f)?;
        let mut residuals = Vec::new();
        let mut restored = Vec::new();
        let mut memvssm = Vec::new();
        let mut prev: Option<[Var; STAGES]> = None;
        for n in 0..self.decoders.len() {
            let out = self.decode(g, n, &encoder, prev.as_ref())?;
            restored.push(g.add(out.residual, image)?);
            residuals.push(out.residual);
            memvssm.extend(out.memvssm);
            prev = Some(out.features);
        }
        Ok(ModelVars {
            encoder,
            residuals,
            restored,
            memvssm,
        })
    }

    /// Inference on one image.
    pub fn restore(&self, store: &ParamStore, image: &Tensor) -> Result<RestoredOutputs> {
        let mut g = Graph::with_params(store);
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, x)?;
        Ok(RestoredOutputs {
            residuals: out.residuals.iter().map(|&v| g.value(v).clone()).collect(),
            restored: out.restored.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }
}

/// Shallow convolution of an image.
pub fn shallow_extract(image: &Tensor, model: &Model, store: &ParamStore) -> Result<FeatureMap> {
    let mut g = Graph::with_params(store);
    let x = g.constant(image.clone());
    let f = model.shallow(&mut g, x)?;
    Ok(g.value(f).clone())
}

/// Encoder pyramid of a shallow feature map.
pub fn encoder_forward(f: &FeatureMap, model: &Model, store: &ParamStore) -> Result<EncoderFeatures> {
    let mut g = Graph::with_params(store);
    let x = g.constant(f.clone());
    let e = model.encode(&mut g, x)?;
    Ok(EncoderFeatures {
        scales: e.0.iter().map(|&v| g.value(v).clone()).collect(),
    })
}

/// One sub-decoder on plain tensors; returns `(d1..d4, X)`.
pub fn subdecoder_forward(
    enc: &EncoderFeatures,
    prev: Option<&[FeatureMap]>,
    n: usize,
    model: &Model,
    store: &ParamStore,
) -> Result<(Vec<FeatureMap>, Tensor)> {
    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = enc.scales.iter().map(|e| g.constant(e.clone())).collect();
    let enc_vars = EncoderVars(
        vars.try_into()
            .map_err(|_| Error::config("encoder features must have five scales"))?,
    );
    let prev_vars = prev
        .map(|p| -> Result<[Var; STAGES]> {
            let v: Vec<Var> = p.iter().map(|d| g.constant(d.clone())).collect();
            v.try_into()
                .map_err(|_| Error::config("previous decoder features must have four stages"))
        })
        .transpose()?;
    let out = model.decode(&mut g, n, &enc_vars, prev_vars.as_ref())?;
    Ok((
        out.features.iter().map(|&v| g.value(v).clone()).collect(),
        g.value(out.residual).clone(),
    ))
}

/// Full forward pass on one image.
pub fn model_forward(image: &Tensor, model: &Model, store: &ParamStore) -> Result<RestoredOutputs> {
    model.restore(store, image)
}

fn set_encoder_trainable(store: &mut ParamStore, trainable: bool) -> usize {
    ENCODER_PREFIXES
        .iter()
        .map(|p| store.set_trainable_prefix(p, trainable))
        .sum()
}

/// Copies the shallow convolution and encoder weights from a stage-one
/// checkpoint into `store` and marks them non-trainable. Returns the number
/// of frozen parameter tensors.
pub fn freeze_encoder(store: &mut ParamStore, pretrained: &Checkpoint) -> Result<usize> {
    let mut copied = 0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if !ENCODER_PREFIXES.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let src = pretrained
            .params
            .id(&name)
            .map(|sid| pretrained.params.get(sid))
            .ok_or_else(|| Error::config(format!("pre-trained checkpoint lacks encoder parameter {name}")))?;
        if src.shape() != store.get(id).shape() {
            return Err(Error::config(format!(
                "encoder parameter {name}: checkpoint shape {:?} vs model {:?}",
                src.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = src.clone();
        copied += 1;
    }
    if copied == 0 {
        return Err(Error::config("model has no encoder parameters to freeze"));
    }
    set_encoder_trainable(store, false);
    Ok(copied)
}

/// Loads the stage-one checkpoint at `path` and freezes the encoder from it.
pub fn freeze_encoder_from(store: &mut ParamStore, path: &Path) -> Result<usize> {
    if !path.exists() {
        return Err(Error::config(format!(
            "encoder checkpoint {} does not exist",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load(path)?;
    freeze_encoder(store, &ckpt)
}

/// Marks the shallow convolution and encoder trainable again.
pub fn unfreeze_encoder(store: &mut ParamStore) -> usize {
    set_encoder_trainable(store, true)
}

#[cfg(test)]
mod tests;
