//! Causal self-attention and the two return aligners.
//!
//! SeqRA lets every state/action token cross-attend over the return-to-go
//! tokens of its own and earlier timesteps, then merges the aggregated context
//! into the residual stream through a learned dimension-wise gate. StepRA is a
//! layer normalization whose scale and shift are predicted from the
//! return-to-go token of the same timestep.

use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::layers::{AttentionKind, AttentionRecord, Forward, Init, Linear, MlpHead, ParamStore};
use crate::tensor::{Mask, Tensor, Unary, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Return,
    State,
    Action,
}

/// Timestep index (0-based within the window) and modality of every position
/// of a token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestepMap {
    entries: Vec<(usize, Modality)>,
}

impl TimestepMap {
    /// `s_1, a_1, s_2, a_2, …` of the given length.
    pub fn state_action(len: usize) -> Self {
        let entries = (0..len)
            .map(|p| {
                let m = if p % 2 == 0 { Modality::State } else { Modality::Action };
                (p / 2, m)
            })
            .collect();
        Self { entries }
    }

    /// `R_1, s_1, a_1, R_2, …` of the given length.
    pub fn return_state_action(len: usize) -> Self {
        let entries = (0..len)
            .map(|p| {
                let m = match p % 3 {
                    0 => Modality::Return,
                    1 => Modality::State,
                    _ => Modality::Action,
                };
                (p / 3, m)
            })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestep(&self, pos: usize) -> usize {
        self.entries[pos].0
    }

    pub fn modality(&self, pos: usize) -> Modality {
        self.entries[pos].1
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    /// Number of timesteps touched by the sequence.
    pub fn num_timesteps(&self) -> usize {
        self.entries.last().map_or(0, |e| e.0 + 1)
    }

    /// Positions holding the given modality, in order.
    pub fn positions_of(&self, m: Modality) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&p| self.entries[p].1 == m)
            .collect()
    }
}

/// Per-sample validity of each timestep in a left-padded window (`[B, K]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PadMask {
    pub batch: usize,
    pub steps: usize,
    real: Vec<bool>,
}

impl PadMask {
    pub fn new(batch: usize, steps: usize, real: Vec<bool>) -> Result<Self> {
        if real.len() != batch * steps {
            return Err(shape_err(format!(
                "pad mask needs {} entries, got {}",
                batch * steps,
                real.len()
            )));
        }
        Ok(Self { batch, steps, real })
    }

    pub fn all_real(batch: usize, steps: usize) -> Self {
        Self {
            batch,
            steps,
            real: vec![true; batch * steps],
        }
    }

    pub fn is_real(&self, b: usize, t: usize) -> bool {
        self.real[b * self.steps + t]
    }

    pub fn data(&self) -> &[bool] {
        &self.real
    }
}

/// Causal mask over a token sequence, composed with the padding mask.
///
/// Query `i` sees key `j ≤ i` when key `j` is real; a padded query also sees
/// itself so that every row keeps at least one visible slot.
pub fn self_attention_mask(map: &TimestepMap, pad: &PadMask, heads: usize) -> Result<Mask> {
    let l = map.len();
    let mut data = Vec::with_capacity(pad.batch * heads * l * l);
    for b in 0..pad.batch {
        let mut block = vec![false; l * l];
        for i in 0..l {
            for j in 0..=i {
                block[i * l + j] = pad.is_real(b, map.timestep(j)) || i == j;
            }
        }
        for _ in 0..heads {
            data.extend_from_slice(&block);
        }
    }
    Mask::new(vec![pad.batch * heads, l, l], data)
}

/// Cross-attention mask from state/action queries onto return keys.
///
/// Query at timestep `t` sees return tokens at timesteps `≤ t` that are real;
/// a padded query sees its own timestep's return token.
pub fn seqra_mask(map: &TimestepMap, pad: &PadMask, heads: usize) -> Result<Mask> {
    let (lq, k) = (map.len(), pad.steps);
    let mut data = Vec::with_capacity(pad.batch * heads * lq * k);
    for b in 0..pad.batch {
        let mut block = vec![false; lq * k];
        for i in 0..lq {
            let t = map.timestep(i);
            if t >= k {
                return Err(shape_err(format!(
                    "position {i} maps to timestep {t} beyond the {k}-step window"
                )));
            }
            for j in 0..=t {
                block[i * k + j] = pad.is_real(b, j) || j == t;
            }
        }
        for _ in 0..heads {
            data.extend_from_slice(&block);
        }
    }
    Mask::new(vec![pad.batch * heads, lq, k], data)
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    /// Scale logits by `1/√head_dim`.
    pub scaled: bool,
    pub dropout: f64,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {d_model} is not divisible by {n_heads} heads"
            )));
        }
        let lin = |store: &mut ParamStore, part: &str, bias: bool, rng: &mut ChaCha8Rng| {
            Linear::new(store, &format!("{name}.{part}"), d_model, d_model, bias, Init::ScaledNormal, rng)
        };
        // A key bias only shifts every logit of a row equally, so it is omitted.
        Ok(Self {
            wq: lin(store, "wq", true, rng),
            wk: lin(store, "wk", false, rng),
            wv: lin(store, "wv", true, rng),
            wo: lin(store, "wo", true, rng),
            n_heads,
            scaled: true,
            dropout,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.wq.out_dim / self.n_heads
    }

    /// Multi-head attention of `query_src[B, Lq, D]` over `kv_src[B, Lk, D]`.
    pub fn attend(
        &self,
        f: &mut Forward,
        query_src: Var,
        kv_src: Var,
        mask: Mask,
        probe: Option<(usize, AttentionKind)>,
    ) -> Result<Var> {
        let h = self.n_heads;
        let q = self.wq.forward(f, query_src)?;
        let k = self.wk.forward(f, kv_src)?;
        let v = self.wv.forward(f, kv_src)?;
        let (q, k, v) = if h == 1 {
            (q, k, v)
        } else {
            (
                f.graph.split_heads(q, h)?,
                f.graph.split_heads(k, h)?,
                f.graph.split_heads(v, h)?,
            )
        };
        let mut scores = f.graph.bmm(q, k, true)?;
        if self.scaled {
            scores = f.graph.mul_scalar(scores, 1.0 / (self.head_dim() as f64).sqrt())?;
        }
        let probs = f.graph.softmax_masked(scores, mask)?;
        if let Some((layer, kind)) = probe {
            if f.probing() {
                let scores = f.graph.value(probs).clone();
                f.record_attention(AttentionRecord {
                    layer,
                    kind,
                    heads: h,
                    scores,
                });
            }
        }
        let probs = f.dropout(probs, self.dropout)?;
        let z = f.graph.bmm(probs, v, false)?;
        let z = if h == 1 { z } else { f.graph.merge_heads(z, h)? };
        self.wo.forward(f, z)
    }
}

/// Causal multi-head self-attention over a token sequence.
pub fn causal_self_attention(
    f: &mut Forward,
    params: &AttentionParams,
    tokens: Var,
    map: &TimestepMap,
    pad: &PadMask,
    layer: usize,
) -> Result<Var> {
    check_tokens(f, tokens, map, pad)?;
    let mask = self_attention_mask(map, pad, params.n_heads)?;
    params.attend(f, tokens, tokens, mask, Some((layer, AttentionKind::SelfAttention)))
}

fn check_tokens(f: &Forward, tokens: Var, map: &TimestepMap, pad: &PadMask) -> Result<()> {
    let s = f.graph.shape(tokens);
    if s.len() != 3 || s[0] != pad.batch || s[1] != map.len() {
        return Err(shape_err(format!(
            "token tensor {:?} does not match batch {} × length {}",
            s,
            pad.batch,
            map.len()
        )));
    }
    if map.num_timesteps() > pad.steps {
        return Err(shape_err(format!(
            "sequence spans {} timesteps but the window has {}",
            map.num_timesteps(),
            pad.steps
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SeqRaParams {
    pub attention: AttentionParams,
    /// `2D → D`, zero-initialized.
    pub scale_proj: Linear,
}

impl SeqRaParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let attention = AttentionParams::new(store, &format!("{name}.attn"), d_model, n_heads, dropout, rng)?;
        let scale_proj = Linear::new(
            store,
            &format!("{name}.scale"),
            2 * d_model,
            d_model,
            true,
            Init::Zero,
            rng,
        );
        Ok(Self {
            attention,
            scale_proj,
        })
    }
}

/// Aggregates return-to-go tokens into every state/action position:
/// `z_i = Σ_j α_ij · v(r_j)` over return tokens at timesteps `≤ t(i)`.
pub fn seqra_attention(
    f: &mut Forward,
    params: &SeqRaParams,
    sa: Var,
    returns: Var,
    map: &TimestepMap,
    pad: &PadMask,
    layer: usize,
) -> Result<Var> {
    check_tokens(f, sa, map, pad)?;
    let rs = f.graph.shape(returns);
    if rs.len() != 3 || rs[0] != pad.batch || rs[1] != pad.steps {
        return Err(shape_err(format!(
            "return tokens {:?} do not match batch {} × window {}",
            rs, pad.batch, pad.steps
        )));
    }
    let mask = seqra_mask(map, pad, params.attention.n_heads)?;
    params
        .attention
        .attend(f, sa, returns, mask, Some((layer, AttentionKind::SeqRa)))
}

/// `λ = W[z; τ] + b`, `τ♯ = (1 + λ) ⊗ z + τ`.
pub fn adaptive_scale(f: &mut Forward, params: &SeqRaParams, z: Var, sa: Var) -> Result<Var> {
    if f.graph.shape(z) != f.graph.shape(sa) {
        return Err(shape_err(format!(
            "adaptive scale: z {:?} vs tokens {:?}",
            f.graph.shape(z),
            f.graph.shape(sa)
        )));
    }
    let cat = f.graph.concat_last(z, sa)?;
    let lambda = params.scale_proj.forward(f, cat)?;
    let gate = f.graph.add_scalar(lambda, 1.0)?;
    let scaled = f.graph.mul(gate, z)?;
    f.graph.add(scaled, sa)
}

#[derive(Clone, Debug)]
pub struct StepRaParams {
    pub mlp_gamma: MlpHead,
    pub mlp_beta: MlpHead,
    pub eps: f64,
}

impl StepRaParams {
    /// Each head is `D → D (SiLU) → D` with a zero-initialized output layer.
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        let dims = [d_model, d_model, d_model];
        Self {
            mlp_gamma: MlpHead::new(store, &format!("{name}.gamma"), &dims, Unary::Silu, true, rng),
            mlp_beta: MlpHead::new(store, &format!("{name}.beta"), &dims, Unary::Silu, true, rng),
            eps: LN_EPS,
        }
    }
}

/// `out_i = (1 + γ_j) ⊗ LayerNorm(x_i) + β_j` with `j = t(i)`,
/// `γ_j = MLP_γ(r_j)` and `β_j = MLP_β(r_j)`.
pub fn stepra(
    f: &mut Forward,
    params: &StepRaParams,
    sa: Var,
    returns: Var,
    map: &TimestepMap,
) -> Result<Var> {
    let (ss, rs) = (f.graph.shape(sa).to_vec(), f.graph.shape(returns).to_vec());
    if ss.len() != 3 || rs.len() != 3 || ss[0] != rs[0] || ss[2] != rs[2] || ss[1] != map.len() {
        return Err(shape_err(format!(
            "stepra: tokens {ss:?} and returns {rs:?} are inconsistent with a map of length {}",
            map.len()
        )));
    }
    if map.num_timesteps() > rs[1] {
        return Err(shape_err("stepra: map reaches past the return sequence"));
    }
    let gamma = params.mlp_gamma.forward(f, returns)?;
    let beta = params.mlp_beta.forward(f, returns)?;
    let gamma = f.graph.select_seq(gamma, map.timesteps())?;
    let beta = f.graph.select_seq(beta, map.timesteps())?;
    let normed = f.graph.layer_norm(sa, params.eps)?;
    let gate = f.graph.add_scalar(gamma, 1.0)?;
    let scaled = f.graph.mul(gate, normed)?;
    f.graph.add(scaled, beta)
}

/// Group masses of one attention row: fraction of attention on each modality.
pub fn modality_masses(row: &[f64], map_of_keys: &[Modality]) -> [f64; 3] {
    let mut m = [0.0; 3];
    for (p, k) in row.iter().zip(map_of_keys) {
        let slot = match k {
            Modality::Return => 0,
            Modality::State => 1,
            Modality::Action => 2,
        };
        m[slot] += p;
    }
    let total: f64 = m.iter().sum();
    m.map(|v| v / total)
}

/// Convenience for tests and probes: a rank-3 tensor filled from a closure.
pub fn tensor3(b: usize, l: usize, d: usize, mut fill: impl FnMut(usize, usize, usize) -> f64) -> Tensor {
    let mut data = Vec::with_capacity(b * l * d);
    for i in 0..b {
        for j in 0..l {
            for k in 0..d {
                data.push(fill(i, j, k));
            }
        }
    }
    Tensor::new(vec![b, l, d], data).expect("shape matches")
}
