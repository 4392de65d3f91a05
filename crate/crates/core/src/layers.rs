//! Parameter storage, forward context, and the basic parameterized layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Graph, Tensor, Unary, Var};

/// Standard deviation of the generic scaled-normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Named, ordered parameter set of one model instance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal(0, [`INIT_STD`]).
    ScaledNormal,
    Zero,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn init(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        init: Init,
        decay: bool,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let value = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::ScaledNormal => {
                let n: usize = shape.iter().product();
                let normal = Normal::new(0.0, INIT_STD).expect("valid std");
                let data = (0..n).map(|_| normal.sample(rng)).collect();
                Tensor::new(shape, data).expect("shape matches")
            }
        };
        self.add(name, value, decay)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces every value with the same-named tensor from `other`.
    pub fn load_values(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(other) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match record {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    t.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// One attention score tensor captured during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub kind: AttentionKind,
    pub heads: usize,
    /// `[B·H, L_query, L_key]`.
    pub scores: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    SelfAttention,
    SeqRa,
}

/// A single forward pass: the graph being recorded plus the parameter
/// bindings, dropout state, and optional attention probe sink.
pub struct Forward<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    track_grads: bool,
    training: bool,
    rng: ChaCha8Rng,
    probes: Option<Vec<AttentionRecord>>,
}

impl<'a> Forward<'a> {
    /// Forward pass whose parameter leaves require gradients.
    pub fn train(store: &'a ParamStore, rng: ChaCha8Rng) -> Self {
        Self::build(store, true, true, rng)
    }

    /// Deterministic evaluation pass; no gradients, dropout disabled.
    pub fn eval(store: &'a ParamStore) -> Self {
        use rand::SeedableRng;
        Self::build(store, false, false, ChaCha8Rng::seed_from_u64(0))
    }

    /// Evaluation-mode pass that still tracks parameter gradients.
    pub fn eval_with_grads(store: &'a ParamStore) -> Self {
        use rand::SeedableRng;
        Self::build(store, true, false, ChaCha8Rng::seed_from_u64(0))
    }

    fn build(store: &'a ParamStore, track_grads: bool, training: bool, rng: ChaCha8Rng) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            track_grads,
            training,
            rng,
            probes: None,
        }
    }

    pub fn with_probes(mut self) -> Self {
        self.probes = Some(Vec::new());
        self
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .graph
            .leaf(self.store.get(id).value.clone(), self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn probing(&self) -> bool {
        self.probes.is_some()
    }

    pub fn record_attention(&mut self, record: AttentionRecord) {
        if let Some(p) = &mut self.probes {
            p.push(record);
        }
    }

    pub fn take_probes(&mut self) -> Vec<AttentionRecord> {
        self.probes.take().unwrap_or_default()
    }

    /// Inverted dropout driven by this pass's rng.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let training = self.training;
        dropout(&mut self.graph, x, rate, training, &mut self.rng)
    }

    /// Gradient of every parameter used in the pass (zeros for unused ones).
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        self.store
            .iter()
            .zip(&self.bound)
            .map(|(p, v)| {
                v.and_then(|v| self.graph.grad(v).map(<[f64]>::to_vec))
                    .unwrap_or_else(|| vec![0.0; p.value.numel()])
            })
            .collect()
    }
}

/// Inverted dropout: identity in eval mode, otherwise each slot is kept with
/// probability `1 − rate` and scaled by `1 / (1 − rate)`.
pub fn dropout<R: Rng>(
    g: &mut Graph,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.init(format!("{name}.weight"), vec![out_dim, in_dim], init, true, rng);
        let bias = bias.then(|| store.init(format!("{name}.bias"), vec![out_dim], Init::Zero, false, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let last = f.graph.shape(x).last().copied();
        if last != Some(self.in_dim) {
            return Err(shape_err(format!(
                "linear expects last dim {}, got shape {:?}",
                self.in_dim,
                f.graph.shape(x)
            )));
        }
        let w = f.param(self.weight);
        let b = self.bias.map(|b| f.param(b));
        f.graph.linear(x, w, b)
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub layers: Vec<Linear>,
    pub activation: Unary,
    pub final_zero_init: bool,
}

impl MlpHead {
    /// `dims = [in, hidden.., out]`; the last layer is zero-initialized when
    /// `final_zero_init` is set.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Unary,
        final_zero_init: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if final_zero_init && i == n - 1 {
                    Init::Zero
                } else {
                    Init::ScaledNormal
                };
                Linear::new(store, &format!("{name}.{i}"), dims[i], dims[i + 1], true, init, rng)
            })
            .collect();
        Self {
            layers,
            activation,
            final_zero_init,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(f, h)?;
            if i + 1 < self.layers.len() {
                h = f.graph.unary(h, self.activation)?;
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let table = store.init(format!("{name}.table"), vec![vocab, dim], Init::ScaledNormal, false, rng);
        Self { table, vocab, dim }
    }

    pub fn lookup(&self, f: &mut Forward, index: Vec<usize>, lead: Vec<usize>) -> Result<Var> {
        let t = f.param(self.table);
        f.graph.embedding(t, index, lead)
    }
}

/// Central-difference check of every parameter gradient of a scalar-valued
/// forward pass. `build` must be deterministic (no training-mode dropout).
///
/// Returns the largest relative error with denominator `max(|g|, 1e-8)`.
pub fn finite_diff_check_params<F>(store: &ParamStore, build: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Forward) -> Result<Var>,
{
    let mut f = Forward::eval_with_grads(store);
    let out = build(&mut f)?;
    f.graph.backward(out)?;
    let grads = f.param_grads();

    let mut probe = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut f = Forward::eval(s);
        let out = build(&mut f)?;
        Ok(f.graph.value(out).data()[0])
    };
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        for i in 0..store.get(id).value.numel() {
            let orig = store.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads[id.0][i];
            worst = worst.max((numeric - analytic).abs() / analytic.abs().max(1e-8));
        }
    }
    Ok(worst)
}
