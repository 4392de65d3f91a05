//! RADT and the decision transformer baseline.
//!
//! RADT splits each window into a return stream `R_1..R_K` and a
//! state/action stream `s_1, a_1, …, s_K`. Each block runs causal
//! self-attention over the state/action stream, SeqRA over the return stream,
//! and a feed-forward layer, with a StepRA normalization after each residual
//! sum. The baseline interleaves `R, s, a` tokens into one sequence and runs
//! pre-LN GPT blocks over it. Both variants predict the action from the
//! processed `s_t` token.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aligners::{
    adaptive_scale, causal_self_attention, seqra_attention, stepra, AttentionParams, Modality, PadMask,
    SeqRaParams, StepRaParams, TimestepMap, LN_EPS,
};
use crate::checkpoint::Checkpoint;
use crate::data::{ActionBatch, Batch};
use crate::envs::{Action, ActionSpace, EnvSpec};
use crate::error::{shape_err, Error, Result};
use crate::layers::{AttentionRecord, EmbeddingTable, Forward, Init, Linear, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Radt,
    Dt,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Radt => "radt",
            Variant::Dt => "dt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadtConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Context length K in timesteps.
    pub context_length: usize,
    pub dropout: f64,
    /// Size of the absolute timestep embedding table.
    pub max_timesteps: usize,
    pub variant: Variant,
    pub use_seqra: bool,
    pub use_stepra: bool,
    pub use_adaptive_scaling: bool,
    pub state_dim: usize,
    pub action_space: ActionSpace,
}

impl RadtConfig {
    /// Desk-scale defaults sized for `spec`.
    pub fn for_env(spec: &EnvSpec, variant: Variant) -> Self {
        Self {
            n_layers: 2,
            n_heads: 1,
            d_model: 64,
            context_length: 10,
            dropout: 0.1,
            max_timesteps: spec.horizon,
            variant,
            use_seqra: true,
            use_stepra: true,
            use_adaptive_scaling: true,
            state_dim: spec.state_dim,
            action_space: spec.action_space,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.context_length == 0 {
            return bad("context_length must be at least 1".into());
        }
        if self.n_layers == 0 || self.d_model == 0 || self.state_dim == 0 || self.max_timesteps == 0 {
            return bad("n_layers, d_model, state_dim and max_timesteps must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.action_space {
            ActionSpace::Continuous { dim, low, high } if dim == 0 || !(low < high) => {
                bad(format!("degenerate continuous action space {:?}", self.action_space))
            }
            ActionSpace::Discrete(n) if n < 2 => bad(format!("discrete action space needs ≥ 2 actions, got {n}")),
            _ => Ok(()),
        }
    }
}

/// Named architecture points of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Full,
    #[serde(rename = "no-seqra")]
    NoSeqRa,
    #[serde(rename = "no-stepra")]
    NoStepRa,
    #[serde(rename = "no-adascale")]
    NoAdaScale,
    #[serde(rename = "no-stepra-adascale")]
    NoStepRaAdaScale,
    Dt,
}

impl Arch {
    pub const ALL: [Arch; 6] = [
        Arch::Full,
        Arch::NoSeqRa,
        Arch::NoStepRa,
        Arch::NoAdaScale,
        Arch::NoStepRaAdaScale,
        Arch::Dt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Full => "full",
            Arch::NoSeqRa => "no-seqra",
            Arch::NoStepRa => "no-stepra",
            Arch::NoAdaScale => "no-adascale",
            Arch::NoStepRaAdaScale => "no-stepra-adascale",
            Arch::Dt => "dt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Arch::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Arch::ALL.iter().map(|a| a.name()).collect();
            Error::InvalidArgument(format!("unknown variant '{s}' (expected one of {})", names.join(", ")))
        })
    }

    /// Applies the switches of this architecture to `base`.
    pub fn configure(self, base: &RadtConfig) -> RadtConfig {
        let mut c = base.clone();
        c.variant = Variant::Radt;
        c.use_seqra = true;
        c.use_stepra = true;
        c.use_adaptive_scaling = true;
        match self {
            Arch::Full => {}
            Arch::NoSeqRa => c.use_seqra = false,
            Arch::NoStepRa => c.use_stepra = false,
            Arch::NoAdaScale => c.use_adaptive_scaling = false,
            Arch::NoStepRaAdaScale => {
                c.use_stepra = false;
                c.use_adaptive_scaling = false;
            }
            Arch::Dt => c.variant = Variant::Dt,
        }
        c
    }
}

/// Normalization after a residual sum: plain layer norm or StepRA.
#[derive(Clone, Debug)]
pub enum Norm {
    Plain,
    StepRa(StepRaParams),
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize, step: bool, rng: &mut ChaCha8Rng) -> Self {
        if step {
            Norm::StepRa(StepRaParams::new(store, name, d, rng))
        } else {
            Norm::Plain
        }
    }

    pub fn apply(&self, f: &mut Forward, x: Var, returns: Var, map: &TimestepMap) -> Result<Var> {
        match self {
            Norm::Plain => f.graph.layer_norm(x, LN_EPS),
            Norm::StepRa(p) => stepra(f, p, x, returns, map),
        }
    }
}

/// `D → 4D (GELU) → D`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, 4 * d, true, Init::ScaledNormal, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * d, d, true, Init::ScaledNormal, rng),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let h = self.fc1.forward(f, x)?;
        let h = f.graph.gelu(h)?;
        self.fc2.forward(f, h)
    }
}

#[derive(Clone, Debug)]
pub struct RadtBlock {
    pub attn: AttentionParams,
    pub seqra: Option<SeqRaParams>,
    pub norms: [Norm; 3],
    pub ff: FeedForward,
    pub adaptive_scaling: bool,
    pub dropout: f64,
}

/// One RADT block over the state/action stream `sa[B, L, D]` conditioned on
/// return tokens `returns[B, K, D]`.
pub fn radt_block(
    f: &mut Forward,
    block: &RadtBlock,
    sa: Var,
    returns: Var,
    map: &TimestepMap,
    pad: &PadMask,
    layer: usize,
) -> Result<Var> {
    let a = causal_self_attention(f, &block.attn, sa, map, pad, layer)?;
    let a = f.dropout(a, block.dropout)?;
    let x = f.graph.add(sa, a)?;
    let mut x = block.norms[0].apply(f, x, returns, map)?;
    if let Some(seqra) = &block.seqra {
        let z = seqra_attention(f, seqra, x, returns, map, pad, layer)?;
        let z = f.dropout(z, block.dropout)?;
        let merged = if block.adaptive_scaling {
            adaptive_scale(f, seqra, z, x)?
        } else {
            f.graph.add(z, x)?
        };
        x = block.norms[1].apply(f, merged, returns, map)?;
    }
    let h = block.ff.forward(f, x)?;
    let h = f.dropout(h, block.dropout)?;
    let y = f.graph.add(x, h)?;
    block.norms[2].apply(f, y, returns, map)
}

#[derive(Clone, Debug)]
pub struct GptBlock {
    pub attn: AttentionParams,
    pub ff: FeedForward,
    pub dropout: f64,
}

/// Pre-LN GPT block.
pub fn gpt_block(
    f: &mut Forward,
    block: &GptBlock,
    x: Var,
    map: &TimestepMap,
    pad: &PadMask,
    layer: usize,
) -> Result<Var> {
    let h = f.graph.layer_norm(x, LN_EPS)?;
    let a = causal_self_attention(f, &block.attn, h, map, pad, layer)?;
    let a = f.dropout(a, block.dropout)?;
    let x = f.graph.add(x, a)?;
    let h = f.graph.layer_norm(x, LN_EPS)?;
    let h = block.ff.forward(f, h)?;
    let h = f.dropout(h, block.dropout)?;
    f.graph.add(x, h)
}

#[derive(Clone, Debug)]
enum ActionEmbed {
    Linear(Linear),
    Table(EmbeddingTable),
}

#[derive(Clone, Debug)]
enum Body {
    Radt { blocks: Vec<RadtBlock>, final_norm: Norm },
    Dt { blocks: Vec<GptBlock> },
}

/// Embedded window: one `[B, k, D]` tensor per modality.
#[derive(Clone, Copy, Debug)]
pub struct TokenizedWindow {
    pub returns: Var,
    pub states: Var,
    pub actions: Var,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RadtConfig,
    pub store: ParamStore,
    /// Returns-to-go are divided by this before embedding.
    pub return_scale: f64,
    embed_return: Linear,
    embed_state: Linear,
    embed_action: ActionEmbed,
    embed_timestep: EmbeddingTable,
    body: Body,
    head: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSummary {
    pub variant: Variant,
    pub config: RadtConfig,
    pub parameter_count: usize,
    pub return_scale: f64,
    /// Parameter names grouped by their top-level module.
    pub modules: BTreeMap<String, Vec<String>>,
}

impl Model {
    pub fn new(config: RadtConfig, return_scale: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(return_scale > 0.0 && return_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("return scale {return_scale} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let s = &mut store;
        let embed_return = Linear::new(s, "embed.return", 1, d, true, Init::ScaledNormal, &mut rng);
        let embed_state = Linear::new(s, "embed.state", config.state_dim, d, true, Init::ScaledNormal, &mut rng);
        let embed_action = match config.action_space {
            ActionSpace::Continuous { dim, .. } => {
                ActionEmbed::Linear(Linear::new(s, "embed.action", dim, d, true, Init::ScaledNormal, &mut rng))
            }
            ActionSpace::Discrete(n) => ActionEmbed::Table(EmbeddingTable::new(s, "embed.action", n, d, &mut rng)),
        };
        let embed_timestep = EmbeddingTable::new(s, "embed.timestep", config.max_timesteps, d, &mut rng);
        let body = match config.variant {
            Variant::Radt => {
                let mut blocks = Vec::with_capacity(config.n_layers);
                for i in 0..config.n_layers {
                    let name = format!("blocks.{i}");
                    let attn = AttentionParams::new(s, &format!("{name}.attn"), d, config.n_heads, config.dropout, &mut rng)?;
                    let seqra = if config.use_seqra {
                        Some(SeqRaParams::new(s, &format!("{name}.seqra"), d, config.n_heads, config.dropout, &mut rng)?)
                    } else {
                        None
                    };
                    let step = config.use_stepra;
                    let n1 = Norm::new(s, &format!("{name}.norm1"), d, step, &mut rng);
                    let n2 = Norm::new(s, &format!("{name}.norm2"), d, step && config.use_seqra, &mut rng);
                    let n3 = Norm::new(s, &format!("{name}.norm3"), d, step, &mut rng);
                    let ff = FeedForward::new(s, &format!("{name}.ff"), d, &mut rng);
                    blocks.push(RadtBlock {
                        attn,
                        seqra,
                        norms: [n1, n2, n3],
                        ff,
                        adaptive_scaling: config.use_adaptive_scaling,
                        dropout: config.dropout,
                    });
                }
                let final_norm = Norm::new(s, "final_norm", d, config.use_stepra, &mut rng);
                Body::Radt { blocks, final_norm }
            }
            Variant::Dt => {
                let mut blocks = Vec::with_capacity(config.n_layers);
                for i in 0..config.n_layers {
                    let name = format!("blocks.{i}");
                    blocks.push(GptBlock {
                        attn: AttentionParams::new(s, &format!("{name}.attn"), d, config.n_heads, config.dropout, &mut rng)?,
                        ff: FeedForward::new(s, &format!("{name}.ff"), d, &mut rng),
                        dropout: config.dropout,
                    });
                }
                Body::Dt { blocks }
            }
        };
        let head = Linear::new(s, "head", d, config.action_space.width(), true, Init::ScaledNormal, &mut rng);
        Ok(Self {
            config,
            store,
            return_scale,
            embed_return,
            embed_state,
            embed_action,
            embed_timestep,
            body,
            head,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn summary(&self) -> ModelSummary {
        let mut modules: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for p in self.store.iter() {
            let parts: Vec<&str> = p.name.split('.').collect();
            let key = if parts[0] == "blocks" && parts.len() > 2 {
                format!("blocks.{}.{}", parts[1], parts[2])
            } else {
                parts[0].to_string()
            };
            modules.entry(key).or_default().push(p.name.clone());
        }
        ModelSummary {
            variant: self.config.variant,
            config: self.config.clone(),
            parameter_count: self.parameter_count(),
            return_scale: self.return_scale,
            modules,
        }
    }

    /// The RADT blocks, for inspection; empty for the baseline.
    pub fn radt_blocks(&self) -> &[RadtBlock] {
        match &self.body {
            Body::Radt { blocks, .. } => blocks,
            Body::Dt { .. } => &[],
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = &self.config;
        if batch.k == 0 || batch.k > c.context_length {
            return Err(shape_err(format!(
                "window of {} steps does not fit context length {}",
                batch.k, c.context_length
            )));
        }
        if batch.state_dim != c.state_dim {
            return Err(shape_err(format!(
                "state width {} differs from the model's {}",
                batch.state_dim, c.state_dim
            )));
        }
        let ok = match (&batch.actions, c.action_space) {
            (ActionBatch::Continuous { dim, .. }, ActionSpace::Continuous { dim: d, .. }) => *dim == d,
            (ActionBatch::Discrete { n, .. }, ActionSpace::Discrete(m)) => *n == m,
            _ => false,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "batch actions do not match the model action space {:?}",
                c.action_space
            )));
        }
        if let Some(t) = batch.timesteps.iter().find(|&&t| t >= c.max_timesteps) {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} is beyond the embedding table of {}",
                c.max_timesteps
            )));
        }
        if (0..batch.size).any(|b| !batch.pad.is_real(b, batch.k - 1)) {
            return Err(shape_err("every window must end on a real state"));
        }
        Ok(())
    }

    /// Embeds every modality and adds the timestep embedding.
    pub fn embed(&self, f: &mut Forward, batch: &Batch) -> Result<TokenizedWindow> {
        self.check_batch(batch)?;
        let (b, k) = (batch.size, batch.k);
        let rtg: Vec<f64> = batch.returns_to_go.iter().map(|r| r / self.return_scale).collect();
        let rtg = f.graph.constant(Tensor::new(vec![b, k, 1], rtg)?);
        let states = f.graph.constant(Tensor::new(vec![b, k, batch.state_dim], batch.states.clone())?);
        let r = self.embed_return.forward(f, rtg)?;
        let s = self.embed_state.forward(f, states)?;
        let a = match (&self.embed_action, &batch.actions) {
            (ActionEmbed::Linear(l), ActionBatch::Continuous { dim, values }) => {
                let x = f.graph.constant(Tensor::new(vec![b, k, *dim], values.clone())?);
                l.forward(f, x)?
            }
            (ActionEmbed::Table(t), ActionBatch::Discrete { index, .. }) => t.lookup(f, index.clone(), vec![b, k])?,
            _ => unreachable!("checked by check_batch"),
        };
        let ts = self.embed_timestep.lookup(f, batch.timesteps.clone(), vec![b, k])?;
        Ok(TokenizedWindow {
            returns: f.graph.add(r, ts)?,
            states: f.graph.add(s, ts)?,
            actions: f.graph.add(a, ts)?,
            steps: k,
        })
    }

    /// Action predictions at every state position, `[B, k, width]`:
    /// tanh-squashed to the bounds for continuous spaces, logits otherwise.
    pub fn forward(&self, f: &mut Forward, batch: &Batch) -> Result<Var> {
        let w = self.embed(f, batch)?;
        let k = w.steps;
        let x = match &self.body {
            Body::Radt { blocks, final_norm } => {
                let map = TimestepMap::state_action(2 * k - 1);
                let both = f.graph.concat_seq(w.states, w.actions)?;
                let order: Vec<usize> = (0..2 * k - 1).map(|p| if p % 2 == 0 { p / 2 } else { k + p / 2 }).collect();
                let mut x = f.graph.select_seq(both, order)?;
                x = f.dropout(x, self.config.dropout)?;
                let returns = f.dropout(w.returns, self.config.dropout)?;
                for (i, blk) in blocks.iter().enumerate() {
                    x = radt_block(f, blk, x, returns, &map, &batch.pad, i)?;
                }
                let x = final_norm.apply(f, x, returns, &map)?;
                f.graph.select_seq(x, map.positions_of(Modality::State))?
            }
            Body::Dt { blocks } => {
                let map = TimestepMap::return_state_action(3 * k - 1);
                let rs = f.graph.concat_seq(w.returns, w.states)?;
                let all = f.graph.concat_seq(rs, w.actions)?;
                let order: Vec<usize> = (0..3 * k - 1).map(|p| (p % 3) * k + p / 3).collect();
                let mut x = f.graph.select_seq(all, order)?;
                x = f.graph.layer_norm(x, LN_EPS)?;
                x = f.dropout(x, self.config.dropout)?;
                for (i, blk) in blocks.iter().enumerate() {
                    x = gpt_block(f, blk, x, &map, &batch.pad, i)?;
                }
                let x = f.graph.layer_norm(x, LN_EPS)?;
                f.graph.select_seq(x, map.positions_of(Modality::State))?
            }
        };
        let out = self.head.forward(f, x)?;
        match self.config.action_space {
            ActionSpace::Continuous { low, high, .. } => {
                let t = f.graph.tanh(out)?;
                let t = f.graph.mul_scalar(t, 0.5 * (high - low))?;
                f.graph.add_scalar(t, 0.5 * (high + low))
            }
            ActionSpace::Discrete(_) => Ok(out),
        }
    }

    /// Mean MSE (continuous) or cross-entropy (discrete) over real state
    /// positions; only the final position when `last_only`.
    pub fn loss(&self, f: &mut Forward, pred: Var, batch: &Batch, last_only: bool) -> Result<Var> {
        let k = batch.k;
        let mask: Vec<bool> = batch
            .pad
            .data()
            .iter()
            .enumerate()
            .map(|(i, &real)| real && (!last_only || i % k == k - 1))
            .collect();
        match &batch.actions {
            ActionBatch::Continuous { dim, values } => {
                let target = Tensor::new(vec![batch.size, k, *dim], values.clone())?;
                f.graph.mse_masked(pred, target, mask)
            }
            ActionBatch::Discrete { n, index } => {
                let logits = f.graph.reshape(pred, vec![batch.size * k, *n])?;
                f.graph.cross_entropy_masked(logits, index.clone(), mask)
            }
        }
    }

    /// Eval-mode predictions `[B, k, width]`.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut f = Forward::eval(&self.store);
        let out = self.forward(&mut f, batch)?;
        Ok(f.graph.value(out).clone())
    }

    /// Eval-mode predictions plus every first-pass attention record.
    pub fn predict_with_probes(&self, batch: &Batch) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let mut f = Forward::eval(&self.store).with_probes();
        let out = self.forward(&mut f, batch)?;
        let probes = f.take_probes();
        Ok((f.graph.value(out).clone(), probes))
    }

    /// Greedy action at the final position of every window.
    pub fn act(&self, batch: &Batch) -> Result<Vec<Action>> {
        let pred = self.predict(batch)?;
        Ok(final_actions(&pred, self.config.action_space))
    }

    pub fn to_checkpoint(&self, config_text: String) -> Checkpoint {
        let mut records: Vec<(String, Tensor)> = self.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        records.push((RETURN_SCALE_RECORD.into(), Tensor::scalar(self.return_scale)));
        Checkpoint { config_text, records }
    }

    /// Rebuilds a model with `config` and loads the checkpoint weights.
    pub fn from_checkpoint(config: RadtConfig, ck: &Checkpoint) -> Result<Self> {
        let (scale, params) = match ck.records.split_last() {
            Some(((name, t), rest)) if name == RETURN_SCALE_RECORD && t.numel() == 1 => (t.data()[0], rest),
            _ => return Err(Error::Checkpoint("missing return scale record".into())),
        };
        let mut m = Model::new(config, scale, 0)?;
        m.store.load_values(params)?;
        Ok(m)
    }
}

const RETURN_SCALE_RECORD: &str = "return_scale";

/// Greedy decoding of `[B, k, width]` predictions at position `k − 1`.
pub fn final_actions(pred: &Tensor, space: ActionSpace) -> Vec<Action> {
    let (b, k, w) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    (0..b)
        .map(|i| {
            let row = &pred.data()[(i * k + k - 1) * w..(i * k + k) * w];
            match space {
                ActionSpace::Continuous { low, high, .. } => {
                    Action::Continuous(row.iter().map(|v| v.clamp(low, high)).collect())
                }
                ActionSpace::Discrete(_) => {
                    let best = (0..w).fold(0, |best, j| if row[j] > row[best] { j } else { best });
                    Action::Discrete(best)
                }
            }
        })
        .collect()
}
