//! Chunk-wise selective scanning with a FIFO memory bank.
//!
//! A feature map is split into `N` contiguous channel chunks. Each chunk runs
//! through the shared Mamba branch, is fused by [`Fcam`] with the fused
//! features of up to `K` preceding chunks held in a [`MemoryBank`], and is
//! then pushed into the bank. The fused chunks are concatenated back in
//! chunk order, so the output has the input's shape. The first chunk sees an
//! empty bank and passes through unfused.

mod bank;
mod fcam;

pub use bank::MemoryBank;
pub use fcam::{fcam_fuse, Fcam};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{GatedFfn, Init, LayerNorm};
use crate::ssm::MambaBlock;
use crate::tensor::{FeatureMap, Tensor};

/// Splits `f` into `n` contiguous channel chunks of `C/n` channels each.
pub fn chunk_split(f: &FeatureMap, n: usize) -> Result<Vec<FeatureMap>> {
    let (c, _, _) = f.dims3()?;
    if n == 0 || c % n != 0 {
        return Err(Error::config(format!("{c} channels cannot be split into {n} chunks")));
    }
    let per = c / n;
    (0..n).map(|i| f.slice_channels(i * per, per)).collect()
}

/// Inverse of [`chunk_split`].
pub fn concat_chunks(chunks: &[FeatureMap]) -> Result<FeatureMap> {
    Tensor::concat_channels(chunks)
}

/// Hyperparameters of one decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderBlockConfig {
    pub channels: usize,
    /// Number of channel chunks `N`.
    pub chunks: usize,
    /// Memory bank depth `K`.
    pub bank_depth: usize,
    pub state_dim: usize,
    pub ffn_expansion: f64,
}

impl DecoderBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunks == 0 || self.channels == 0 || self.channels % self.chunks != 0 {
            return Err(Error::config(format!(
                "{} channels are not divisible into {} chunks",
                self.channels, self.chunks
            )));
        }
        if self.bank_depth == 0 {
            return Err(Error::config("memory bank depth must be at least 1"));
        }
        if self.state_dim == 0 {
            return Err(Error::config("state dimension must be at least 1"));
        }
        if !(self.ffn_expansion > 0.0 && self.ffn_expansion.is_finite()) {
            return Err(Error::config("feed-forward expansion must be positive"));
        }
        Ok(())
    }

    pub fn chunk_channels(&self) -> usize {
        self.channels / self.chunks
    }
}

/// Mamba branch and FCAM shared by all chunks of one block.
#[derive(Debug, Clone)]
pub struct MemVssm {
    pub chunks: usize,
    pub bank_depth: usize,
    pub mamba: MambaBlock,
    pub fcam: Fcam,
}

impl MemVssm {
    pub fn new(init: &mut Init, cfg: &DecoderBlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.chunk_channels();
        Ok(MemVssm {
            chunks: cfg.chunks,
            bank_depth: cfg.bank_depth,
            mamba: MambaBlock::new(&mut init.scope("mamba"), c, cfg.state_dim)?,
            fcam: Fcam::new(&mut init.scope("fcam"), c)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_traced(g, x, None)
    }

    /// Like [`MemVssm::forward`]; when `trace` is given it receives the bank
    /// contents (oldest first) after each chunk is pushed.
    pub fn forward_traced(&self, g: &mut Graph, x: Var, mut trace: Option<&mut Vec<Vec<Var>>>) -> Result<Var> {
        let (c, h, w) = g.value(x).dims3()?;
        if c % self.chunks != 0 || c / self.chunks != self.mamba.channels {
            return Err(Error::config(format!(
                "MemVSSM with {} chunks of {} channels got {c} channels",
                self.chunks, self.mamba.channels
            )));
        }
        let per = c / self.chunks;
        let chunk_shape = [per, h, w];
        let mut bank = MemoryBank::new(self.bank_depth)?;
        let mut fused = Vec::with_capacity(self.chunks);
        for i in 0..self.chunks {
            let chunk = g.slice_channels(x, i * per, per)?;
            let f_i = self.mamba.forward(g, chunk)?;
            let history: Vec<Var> = bank.entries().copied().collect();
            let f_fused = self.fcam.forward(g, f_i, &history)?;
            bank.push(f_fused, &chunk_shape)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(bank.entries().copied().collect());
            }
            fused.push(f_fused);
        }
        g.concat_channels(&fused)
    }
}

/// Applies a MemVSSM to a feature map without recording gradients. The bank
/// starts empty on every call.
pub fn memvssm_forward(f: &FeatureMap, block: &MemVssm, store: &ParamStore) -> Result<FeatureMap> {
    let mut g = Graph::with_params(store);
    let x = g.constant(f.clone());
    let y = block.forward(&mut g, x)?;
    Ok(g.value(y).clone())
}

/// Decoder block: two pre-norm residual steps,
/// `X' = MemVSSM(FFN(Norm(X))) + X` then `Y = FFN(Norm(X')) + X'`.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub ffn1: GatedFfn,
    pub memvssm: MemVssm,
    pub norm2: LayerNorm,
    pub ffn2: GatedFfn,
    pub channels: usize,
}

/// Output of a decoder block together with its MemVSSM activation.
#[derive(Debug, Clone, Copy)]
pub struct DecoderBlockOutput {
    pub output: Var,
    pub memvssm: Var,
}

impl DecoderBlock {
    pub fn new(init: &mut Init, cfg: &DecoderBlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(DecoderBlock {
            norm1: LayerNorm::new(&mut init.scope("norm1"), c)?,
            ffn1: GatedFfn::new(&mut init.scope("ffn1"), c, cfg.ffn_expansion)?,
            memvssm: MemVssm::new(&mut init.scope("memvssm"), cfg)?,
            norm2: LayerNorm::new(&mut init.scope("norm2"), c)?,
            ffn2: GatedFfn::new(&mut init.scope("ffn2"), c, cfg.ffn_expansion)?,
            channels: c,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<DecoderBlockOutput> {
        let n = self.norm1.forward(g, x)?;
        let n = self.ffn1.forward(g, n)?;
        let m = self.memvssm.forward(g, n)?;
        let x1 = g.add(m, x)?;
        let n = self.norm2.forward(g, x1)?;
        let n = self.ffn2.forward(g, n)?;
        let output = g.add(n, x1)?;
        Ok(DecoderBlockOutput { output, memvssm: m })
    }
}

/// Applies a decoder block to a feature map without recording gradients.
pub fn decoder_block(x_prev: &FeatureMap, block: &DecoderBlock, store: &ParamStore) -> Result<FeatureMap> {
    let mut g = Graph::with_params(store);
    let x = g.constant(x_prev.clone());
    let y = block.forward(&mut g, x)?;
    Ok(g.value(y.output).clone())
}
