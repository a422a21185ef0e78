//! Gradient-check runner over the network's components and the
//! channel-activation report for MemVSSM outputs.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{check_graph, numerical_gradient, relative_error, ParamSelection, FD_STEP};
use crate::losses::{
    charbonnier_loss, charbonnier_loss_grad, edge_loss, edge_loss_grad, frequency_loss, frequency_loss_grad,
    ising_loss, ising_loss_grad, total_loss_grad, LossWeights, Neighborhood,
};
use crate::memvssm::{DecoderBlock, DecoderBlockConfig, Fcam, MemVssm};
use crate::model::{Model, ModelConfig};
use crate::nn::Init;
use crate::tensor::{FeatureMap, Tensor};
use crate::train::pad_to_multiple;

/// Tolerance on the maximum relative error for single components.
pub const COMPONENT_TOLERANCE: f64 = 1e-4;
/// Tolerance for the whole network, where errors compound through depth.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Share of each parameter tensor sampled in the end-to-end check.
pub const END_TO_END_SAMPLE_FRACTION: f64 = 0.01;
/// Channels whose mean activation is below this are counted as dead.
pub const DEAD_CHANNEL_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Losses,
    Fcam,
    Memvssm,
    DecoderBlock,
    EndToEnd,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Losses,
        Component::Fcam,
        Component::Memvssm,
        Component::DecoderBlock,
        Component::EndToEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Losses => "losses",
            Component::Fcam => "fcam",
            Component::Memvssm => "memvssm",
            Component::DecoderBlock => "decoder_block",
            Component::EndToEnd => "end_to_end",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Component::EndToEnd => END_TO_END_TOLERANCE,
            _ => COMPONENT_TOLERANCE,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown component {s:?}")))
    }
}

/// One checked tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub entries: usize,
    /// `None` when the check was skipped.
    pub max_rel_error: Option<f64>,
    /// Why the check was skipped.
    pub skipped: Option<String>,
    pub passed: bool,
}

impl GradcheckEntry {
    fn measured(name: impl Into<String>, entries: usize, err: f64, tol: f64) -> Self {
        GradcheckEntry {
            name: name.into(),
            entries,
            max_rel_error: Some(err),
            skipped: None,
            passed: err < tol,
        }
    }

    fn skipped(name: impl Into<String>, reason: impl Into<String>) -> Self {
        GradcheckEntry {
            name: name.into(),
            entries: 0,
            max_rel_error: None,
            skipped: Some(reason.into()),
            passed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub component: Component,
    pub seed: u64,
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    /// Largest measured relative error.
    pub fn worst(&self) -> f64 {
        self.entries.iter().filter_map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), lo, hi, rng)
}

/// Re-draws every parameter uniformly in `[-scale, scale]` so that checks
/// do not sit at special points such as zero biases or unit gains.
fn randomize_params(store: &mut ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = uniform(&shape, -scale, scale, rng);
    }
}

/// `Σ r ⊙ y` for a fixed random `r`: a generic scalar of a tensor output.
fn projection(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let n = g.value(y).len();
    let rc = g.constant(r.clone().reshape(g.shape(y).to_vec())?);
    let prod = g.mul(y, rc)?;
    let flat = g.reshape(prod, &[1, n])?;
    let ones = g.constant(Tensor::full([n, 1], 1.0));
    let s = g.matmul(flat, ones, false, false)?;
    g.reshape(s, &[1])
}

fn compare_params(
    store: &mut ParamStore,
    inputs: &[Tensor],
    input_names: &[&str],
    params: &[ParamSelection],
    tol: f64,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<Vec<GradcheckEntry>> {
    let cmps = check_graph(store, inputs, params, FD_STEP, f)?;
    Ok(cmps
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let name = input_names.get(i).map_or(c.name, |n| n.to_string());
            GradcheckEntry::measured(name, c.entries, c.max_rel_error, tol)
        })
        .collect())
}

/// True if two in-bounds neighbors of `img` are exactly equal, where the
/// absolute value in the Ising loss has no derivative.
pub fn has_zero_neighbor_difference(img: &Tensor, nb: Neighborhood) -> Result<bool> {
    let (c, h, w) = img.dims3()?;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                for &(dy, dx) in nb.offsets() {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    if img.get3(ch, y, x) == img.get3(ch, ny as usize, nx as usize) {
                        return Ok(true);
                    }
                }
            }
        }
    }
    Ok(false)
}

/// Checks all four losses with respect to the prediction at a given point.
pub fn gradcheck_losses_at(pred: &Tensor, target: &Tensor, epsilon: f64) -> Result<Vec<GradcheckEntry>> {
    let check = |name: &str, analytic: Tensor, f: &dyn Fn(&Tensor) -> Result<f64>| -> Result<GradcheckEntry> {
        let numeric = numerical_gradient(pred, FD_STEP, f)?;
        let err = relative_error(analytic.data(), numeric.data());
        Ok(GradcheckEntry::measured(name, pred.len(), err, COMPONENT_TOLERANCE))
    };
    let mut out = vec![
        check("charbonnier", charbonnier_loss_grad(pred, target, epsilon)?.1, &|p| {
            charbonnier_loss(p, target, epsilon)
        })?,
        check("edge", edge_loss_grad(pred, target, epsilon)?.1, &|p| edge_loss(p, target, epsilon))?,
        check("frequency", frequency_loss_grad(pred, target)?.1, &|p| frequency_loss(p, target))?,
    ];
    for (nb, name) in [(Neighborhood::FourConnected, "ising_four"), (Neighborhood::EightConnected, "ising_eight")] {
        out.push(if has_zero_neighbor_difference(pred, nb)? {
            GradcheckEntry::skipped(name, "zero neighbor difference: |·| is not differentiable there")
        } else {
            check(name, ising_loss_grad(pred, nb)?.1, &|p| ising_loss(p, nb))?
        });
    }
    Ok(out)
}

fn small_block_config() -> DecoderBlockConfig {
    DecoderBlockConfig {
        channels: 8,
        chunks: 2,
        bank_depth: 1,
        state_dim: 4,
        ffn_expansion: 2.0,
    }
}

/// The network used by the end-to-end check.
pub fn end_to_end_config() -> ModelConfig {
    ModelConfig {
        base_width: 8,
        n_subdecoders: 2,
        chunks: 2,
        bank_depth: 1,
        state_dim: 4,
        encoder_blocks_per_scale: 1,
        decoder_blocks_per_stage: 1,
        ffn_expansion: 2.0,
        freeze_encoder: false,
    }
}

fn gradcheck_end_to_end(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<GradcheckEntry>> {
    let mut store = ParamStore::new();
    let model = Model::new(end_to_end_config(), &mut store, seed)?;
    // Small random values everywhere (including the residual heads, which
    // start at zero) keep every path active without saturating anything.
    randomize_params(&mut store, 0.2, rng);
    let image = uniform(&[3, 16, 16], 0.0, 1.0, rng);
    let target = uniform(&[3, 16, 16], 0.0, 1.0, rng);
    let weights = LossWeights::default();
    let params: Vec<ParamSelection> = store
        .iter()
        .map(|(id, p)| {
            let n = p.value.len();
            let k = ((n as f64 * END_TO_END_SAMPLE_FRACTION).ceil() as usize).clamp(1, n);
            let mut idx = sample(rng, n, k).into_vec();
            idx.sort_unstable();
            ParamSelection { id, indices: Some(idx) }
        })
        .collect();
    compare_params(&mut store, &[], &[], &params, END_TO_END_TOLERANCE, |g, _| {
        let x = g.constant(image.clone());
        let out = model.forward(g, x)?;
        let n = out.restored.len() as f64;
        let mut terms = Vec::new();
        for &r in &out.restored {
            let (rep, grad) = total_loss_grad(g.value(r), &target, &weights)?;
            terms.push(g.scalar_loss(r, rep.total / n, grad.scale(1.0 / n))?);
        }
        g.add_all(&terms)
    })
}

/// Runs the finite-difference check of one component on a random instance
/// drawn from `seed`.
pub fn gradcheck(component: Component, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = component.tolerance();
    let entries = match component {
        Component::Losses => {
            let pred = uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
            let target = uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
            gradcheck_losses_at(&pred, &target, LossWeights::default().epsilon)?
        }
        Component::Fcam => {
            let mut store = ParamStore::new();
            let fcam = Fcam::new(&mut Init::new(&mut store, &mut rng), 4)?;
            randomize_params(&mut store, 0.5, &mut rng);
            let inputs: Vec<Tensor> = (0..3).map(|_| uniform(&[4, 4, 4], -1.0, 1.0, &mut rng)).collect();
            let r = uniform(&[4 * 4 * 4], -1.0, 1.0, &mut rng);
            let params: Vec<_> = store.ids().map(ParamSelection::all).collect();
            compare_params(&mut store, &inputs, &["current", "history[0]", "history[1]"], &params, tol, |g, v| {
                let y = fcam.forward(g, v[0], &v[1..])?;
                projection(g, y, &r)
            })?
        }
        Component::Memvssm => {
            let mut store = ParamStore::new();
            let cfg = small_block_config();
            let m = MemVssm::new(&mut Init::new(&mut store, &mut rng), &cfg)?;
            randomize_params(&mut store, 0.5, &mut rng);
            let x = uniform(&[cfg.channels, 4, 4], -1.0, 1.0, &mut rng);
            let r = uniform(&[x.len()], -1.0, 1.0, &mut rng);
            let params: Vec<_> = store.ids().map(ParamSelection::all).collect();
            compare_params(&mut store, &[x], &["input"], &params, tol, |g, v| {
                let y = m.forward(g, v[0])?;
                projection(g, y, &r)
            })?
        }
        Component::DecoderBlock => {
            let mut store = ParamStore::new();
            let cfg = small_block_config();
            let b = DecoderBlock::new(&mut Init::new(&mut store, &mut rng), &cfg)?;
            randomize_params(&mut store, 0.5, &mut rng);
            let x = uniform(&[cfg.channels, 4, 4], -1.0, 1.0, &mut rng);
            let r = uniform(&[x.len()], -1.0, 1.0, &mut rng);
            let params: Vec<_> = store.ids().map(ParamSelection::all).collect();
            compare_params(&mut store, &[x], &["input"], &params, tol, |g, v| {
                let y = b.forward(g, v[0])?.output;
                projection(g, y, &r)
            })?
        }
        Component::EndToEnd => gradcheck_end_to_end(&mut rng, seed)?,
    };
    Ok(GradcheckReport {
        component,
        seed,
        tolerance: tol,
        entries,
    })
}

/// ReLU followed by global average pooling, averaged over feature maps:
/// one value per channel.
pub fn channel_activations(features: &[FeatureMap]) -> Result<Vec<f64>> {
    let first = features
        .first()
        .ok_or_else(|| Error::config("channel activations need at least one feature map"))?;
    let c = first.dims3()?.0;
    let mut acc = vec![0.0; c];
    for f in features {
        let (fc, h, w) = f.dims3()?;
        if fc != c {
            return Err(Error::config(format!("feature maps have {fc} and {c} channels")));
        }
        for (a, plane) in acc.iter_mut().zip(f.data().chunks_exact(h * w)) {
            *a += plane.iter().map(|v| v.max(0.0)).sum::<f64>() / (h * w) as f64;
        }
    }
    let n = features.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    /// Decoder block index in execution order.
    pub block: usize,
    pub block_name: String,
    pub activations: Vec<f64>,
    pub threshold: f64,
    pub dead_channels: usize,
}

impl ChannelReport {
    pub fn from_activations(block: usize, block_name: String, activations: Vec<f64>, threshold: f64) -> Self {
        let dead_channels = activations.iter().filter(|&&a| a < threshold).count();
        ChannelReport {
            block,
            block_name,
            activations,
            threshold,
            dead_channels,
        }
    }

    /// `channel,activation,dead` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,activation,dead\n");
        for (i, a) in self.activations.iter().enumerate() {
            s.push_str(&format!("{i},{a:e},{}\n", u8::from(*a < self.threshold)));
        }
        s
    }
}

/// MemVSSM outputs of decoder block `block` (execution order) for each probe image.
pub fn memvssm_features(model: &Model, store: &ParamStore, block: usize, probes: &[Tensor]) -> Result<Vec<FeatureMap>> {
    let total = model.num_decoder_blocks();
    if block >= total {
        return Err(Error::config(format!("block {block} does not exist; the model has {total} decoder blocks")));
    }
    probes
        .iter()
        .map(|p| {
            let img = pad_to_multiple(p, crate::model::SPATIAL_MULTIPLE)?;
            let mut g = Graph::with_params(store);
            let x = g.constant(img);
            let out = model.forward(&mut g, x)?;
            Ok(g.value(out.memvssm[block]).clone())
        })
        .collect()
}

/// ReLU + global-average-pooling activations of one block's MemVSSM output.
pub fn channel_activation_report(
    model: &Model,
    store: &ParamStore,
    block: usize,
    probes: &[Tensor],
    threshold: f64,
) -> Result<ChannelReport> {
    let features = memvssm_features(model, store, block, probes)?;
    let name = model.decoder_block_name(block).expect("checked above");
    Ok(ChannelReport::from_activations(block, name, channel_activations(&features)?, threshold))
}
