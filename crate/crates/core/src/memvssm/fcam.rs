use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear};
use crate::tensor::FeatureMap;

/// Feature cross-attention between the current chunk and bank entries.
///
/// For a current feature `F` and one entry `E`:
///
/// ```text
/// Q_cur = K_hist = P_q(Norm_cur(F))      V_cur  = P_v(F)
/// Q_hist = K_cur = P_k(Norm_hist(E))     V_hist = P_u(E)
/// F' = softmax(Q_cur K_curᵀ / τ) V_cur + softmax(Q_hist K_histᵀ / τ) V_hist + F + E
/// ```
///
/// Logits are `c×c` channel affinities over the flattened `c×HW` features.
/// With several entries the two attention terms and the `+E` residual are
/// accumulated per entry (oldest first) around a single `+F`.
#[derive(Debug, Clone)]
pub struct Fcam {
    pub norm_cur: LayerNorm,
    pub norm_hist: LayerNorm,
    pub query_cur: Linear,
    pub query_hist: Linear,
    pub value_cur: Linear,
    pub value_hist: Linear,
    /// Softmax temperature; `None` means `√(HW)`.
    pub temperature: Option<f64>,
    pub channels: usize,
}

impl Fcam {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(Fcam {
            norm_cur: LayerNorm::new(&mut init.scope("norm_cur"), channels)?,
            norm_hist: LayerNorm::new(&mut init.scope("norm_hist"), channels)?,
            query_cur: Linear::new(&mut init.scope("query_cur"), channels, channels, true)?,
            query_hist: Linear::new(&mut init.scope("query_hist"), channels, channels, true)?,
            value_cur: Linear::new(&mut init.scope("value_cur"), channels, channels, true)?,
            value_hist: Linear::new(&mut init.scope("value_hist"), channels, channels, true)?,
            temperature: None,
            channels,
        })
    }

    /// Parameters of the four 1×1 projections.
    pub fn projection_params(&self) -> Vec<ParamId> {
        [&self.query_cur, &self.query_hist, &self.value_cur, &self.value_hist]
            .into_iter()
            .flat_map(Linear::params)
            .collect()
    }

    fn temperature(&self, positions: usize) -> f64 {
        self.temperature.unwrap_or_else(|| (positions as f64).sqrt())
    }

    pub fn forward(&self, g: &mut Graph, f: Var, history: &[Var]) -> Result<Var> {
        let shape = g.shape(f).to_vec();
        let (c, h, w) = g.value(f).dims3()?;
        if c != self.channels {
            return Err(Error::config(format!("FCAM built for {} channels got {c}", self.channels)));
        }
        if history.is_empty() {
            return Ok(f);
        }
        for &e in history {
            if g.shape(e) != shape {
                return Err(Error::config(format!(
                    "FCAM history entry {:?} does not match current {shape:?}",
                    g.shape(e)
                )));
            }
        }
        let hw = h * w;
        let inv_t = 1.0 / self.temperature(hw);
        let flat = |g: &mut Graph, v: Var| g.reshape(v, &[c, hw]);

        let nf = self.norm_cur.forward(g, f)?;
        let q_cur = self.query_cur.forward(g, nf)?;
        let q_cur = flat(g, q_cur)?;
        let v_cur = self.value_cur.forward(g, f)?;
        let v_cur = flat(g, v_cur)?;

        let mut terms = vec![f];
        for &e in history {
            let ne = self.norm_hist.forward(g, e)?;
            let q_hist = self.query_hist.forward(g, ne)?;
            let q_hist = flat(g, q_hist)?;
            let v_hist = self.value_hist.forward(g, e)?;
            let v_hist = flat(g, v_hist)?;

            let to_hist = attend(g, q_cur, q_hist, v_cur, inv_t)?;
            let to_cur = attend(g, q_hist, q_cur, v_hist, inv_t)?;
            let to_hist = g.reshape(to_hist, &shape)?;
            let to_cur = g.reshape(to_cur, &shape)?;
            terms.extend([to_hist, to_cur, e]);
        }
        g.add_all(&terms)
    }
}

/// `softmax(q kᵀ · scale) v` over `c×HW` operands.
fn attend(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    let logits = g.matmul(q, k, false, true)?;
    let logits = g.scale(logits, scale);
    let attn = g.softmax_rows(logits)?;
    g.matmul(attn, v, false, false)
}

/// Fuses a chunk feature with bank entries (oldest first). An empty history
/// returns `f_i` unchanged.
pub fn fcam_fuse(f_i: &FeatureMap, history: &[FeatureMap], w: &Fcam, store: &ParamStore) -> Result<FeatureMap> {
    let mut g = Graph::with_params(store);
    let f = g.constant(f_i.clone());
    let hist: Vec<Var> = history.iter().map(|e| g.constant(e.clone())).collect();
    let out = w.forward(&mut g, f, &hist)?;
    Ok(g.value(out).clone())
}
