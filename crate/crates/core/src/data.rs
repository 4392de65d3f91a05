//! Offline datasets: scripted behavior policies, return-to-go annotation,
//! K-step windowing, and JSON Lines serialization.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::aligners::PadMask;
use crate::envs::{self, Action, ActionSpace, EnvId, EnvSpec, EnvState};
use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "radt-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub returns_to_go: Vec<f64>,
    pub total_return: f64,
}

impl Trajectory {
    /// Builds a trajectory and annotates its returns-to-go.
    pub fn new(states: Vec<Vec<f64>>, actions: Vec<Action>, rewards: Vec<f64>) -> Result<Self> {
        if states.is_empty() || states.len() != actions.len() || states.len() != rewards.len() {
            return Err(Error::Dataset(format!(
                "trajectory needs equal nonzero lengths, got {} states, {} actions, {} rewards",
                states.len(),
                actions.len(),
                rewards.len()
            )));
        }
        Ok(annotate_rtg(Self {
            states,
            actions,
            rewards,
            returns_to_go: Vec::new(),
            total_return: 0.0,
        }))
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Suffix sums of the rewards; the total return is the first of them.
pub fn annotate_rtg(mut traj: Trajectory) -> Trajectory {
    let mut rtg = vec![0.0; traj.rewards.len()];
    let mut acc = 0.0;
    for t in (0..rtg.len()).rev() {
        acc = traj.rewards[t] + acc;
        rtg[t] = acc;
    }
    traj.total_return = rtg.first().copied().unwrap_or(0.0);
    traj.returns_to_go = rtg;
    traj
}

/// A scripted behavior policy; each episode draws its own skill parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Behavior {
    /// Linewalk speed controller. The cruise speed is drawn from `[lo, hi]`;
    /// with probability `switch_prob` a second speed takes over at a random
    /// step. Actions carry Gaussian noise of std `noise`.
    TargetSpeed {
        lo: f64,
        hi: f64,
        switch_prob: f64,
        noise: f64,
    },
    /// Gridcollect greedy collector that takes a uniformly random move with
    /// probability ε drawn from `[lo, hi]`.
    EpsGreedy { lo: f64, hi: f64 },
    /// Delaychain presser with press probability drawn from `[lo, hi]`.
    Bernoulli { lo: f64, hi: f64 },
    /// The same action at every step.
    Constant { action: Action },
    /// Uniformly random actions.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyMix {
    /// `(weight, behavior)` pairs; weights need not sum to one.
    pub components: Vec<(f64, Behavior)>,
}

impl PolicyMix {
    pub fn single(b: Behavior) -> Self {
        Self {
            components: vec![(1.0, b)],
        }
    }

    /// Mixed-skill behavior giving a wide return spread on each environment.
    pub fn default_for(env: EnvId) -> Self {
        match env {
            EnvId::LineWalk => Self::single(Behavior::TargetSpeed {
                lo: 0.0,
                hi: 1.0,
                switch_prob: 0.5,
                noise: 0.2,
            }),
            EnvId::GridCollect => Self::single(Behavior::EpsGreedy { lo: 0.0, hi: 1.0 }),
            EnvId::DelayChain => Self::single(Behavior::Bernoulli { lo: 0.0, hi: 1.0 }),
        }
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> Result<&Behavior> {
        let total: f64 = self.components.iter().map(|c| c.0).sum();
        if self.components.is_empty() || !(total > 0.0) || self.components.iter().any(|c| c.0 < 0.0) {
            return Err(Error::InvalidArgument(
                "policy mix needs nonnegative weights with a positive sum".into(),
            ));
        }
        let mut u = rng.random::<f64>() * total;
        for (w, b) in &self.components {
            if u < *w {
                return Ok(b);
            }
            u -= w;
        }
        Ok(&self.components.last().expect("nonempty").1)
    }
}

/// One episode's instantiation of a [`Behavior`].
enum Actor {
    Speed {
        first: f64,
        second: f64,
        switch_at: usize,
        noise: Normal<f64>,
    },
    Greedy(f64),
    Press(f64),
    Constant(Action),
    Uniform,
}

impl Actor {
    fn draw(b: &Behavior, spec: &EnvSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let span = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| -> Result<f64> {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument(format!("empty range [{lo}, {hi}]")));
            }
            Ok(lo + (hi - lo) * rng.random::<f64>())
        };
        let ok = match b {
            Behavior::TargetSpeed { .. } => spec.id == EnvId::LineWalk,
            Behavior::EpsGreedy { .. } => spec.id == EnvId::GridCollect,
            Behavior::Bernoulli { .. } => matches!(spec.action_space, ActionSpace::Discrete(2)),
            Behavior::Constant { action } => spec.action_space.contains(action),
            Behavior::Uniform => true,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "behavior {b:?} does not apply to {}",
                spec.id
            )));
        }
        Ok(match b {
            Behavior::TargetSpeed {
                lo,
                hi,
                switch_prob,
                noise,
            } => {
                let first = span(*lo, *hi, rng)?;
                let second = span(*lo, *hi, rng)?;
                let switch_at = if rng.random::<f64>() < *switch_prob {
                    rng.random_range(1..spec.horizon)
                } else {
                    spec.horizon
                };
                let noise = Normal::new(0.0, *noise)
                    .map_err(|e| Error::InvalidArgument(format!("action noise: {e}")))?;
                Actor::Speed {
                    first,
                    second,
                    switch_at,
                    noise,
                }
            }
            Behavior::EpsGreedy { lo, hi } => Actor::Greedy(span(*lo, *hi, rng)?),
            Behavior::Bernoulli { lo, hi } => Actor::Press(span(*lo, *hi, rng)?),
            Behavior::Constant { action } => Actor::Constant(action.clone()),
            Behavior::Uniform => Actor::Uniform,
        })
    }

    fn act(&self, spec: &EnvSpec, s: &EnvState, rng: &mut ChaCha8Rng) -> Action {
        match self {
            Actor::Speed {
                first,
                second,
                switch_at,
                noise,
            } => {
                let EnvState::LineWalk { t, velocity, .. } = s else {
                    unreachable!("speed actor only runs on linewalk")
                };
                let target = if *t < *switch_at { *first } else { *second };
                let a = envs::track_speed(*velocity, target) + noise.sample(rng);
                Action::Continuous(vec![a.clamp(-1.0, 1.0)])
            }
            Actor::Greedy(eps) => {
                if rng.random::<f64>() < *eps {
                    Action::Discrete(rng.random_range(0..5))
                } else {
                    Action::Discrete(envs::greedy_grid_move(s))
                }
            }
            Actor::Press(p) => Action::Discrete(usize::from(rng.random::<f64>() < *p)),
            Actor::Constant(a) => a.clone(),
            Actor::Uniform => match spec.action_space {
                ActionSpace::Continuous { dim, low, high } => {
                    Action::Continuous((0..dim).map(|_| rng.random_range(low..=high)).collect())
                }
                ActionSpace::Discrete(n) => Action::Discrete(rng.random_range(0..n)),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub policy_mix: PolicyMix,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub env: EnvId,
    pub trajectories: Vec<Trajectory>,
    pub return_scale: f64,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOptions {
    /// Required fraction of `[min_return, max_return]` covered by the
    /// generated returns.
    pub min_spread: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self { min_spread: 0.6 }
    }
}

/// Runs `n_traj` behavior episodes. Deterministic in `seed`.
pub fn generate_dataset(
    env: EnvId,
    policy_mix: &PolicyMix,
    n_traj: usize,
    seed: u64,
    options: GenerateOptions,
) -> Result<Dataset> {
    if n_traj == 0 {
        return Err(Error::Dataset("cannot generate an empty dataset".into()));
    }
    let spec = EnvSpec::new(env);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let actor = Actor::draw(policy_mix.pick(&mut rng)?, &spec, &mut rng)?;
        let mut s = spec.reset(rng.random());
        let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
        loop {
            let a = actor.act(&spec, &s, &mut rng);
            let r = spec.step(&s, &a)?;
            states.push(s.observation());
            actions.push(a);
            rewards.push(r.reward);
            s = r.next_state;
            if r.done {
                break;
            }
        }
        trajectories.push(Trajectory::new(states, actions, rewards)?);
    }
    let (lo, hi) = envs::return_bounds(&spec);
    let spread = return_spread(&trajectories, lo, hi);
    if spread < options.min_spread {
        return Err(Error::Dataset(format!(
            "returns cover only {:.1}% of [{lo}, {hi}], below the required {:.1}%",
            100.0 * spread,
            100.0 * options.min_spread
        )));
    }
    Ok(Dataset {
        env,
        return_scale: return_scale(&trajectories),
        trajectories,
        provenance: Provenance {
            policy_mix: policy_mix.clone(),
            seed,
        },
    })
}

/// Fraction of `[lo, hi]` spanned by the trajectory returns.
pub fn return_spread(trajectories: &[Trajectory], lo: f64, hi: f64) -> f64 {
    let (min, max) = trajectories
        .iter()
        .map(|t| t.total_return)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r), b.max(r)));
    if hi > lo {
        (max - min) / (hi - lo)
    } else {
        0.0
    }
}

/// Largest absolute trajectory return, or 1 when every return is zero.
pub fn return_scale(trajectories: &[Trajectory]) -> f64 {
    let m = trajectories
        .iter()
        .map(|t| t.total_return.abs())
        .fold(0.0, f64::max);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub env: EnvId,
    pub n_traj: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub return_scale: f64,
    /// Ten equal bins over the environment's return bounds.
    pub histogram: Vec<HistogramBin>,
}

impl Dataset {
    pub fn returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.total_return).collect()
    }

    pub fn sorted_returns(&self) -> Vec<f64> {
        let mut r = self.returns();
        r.sort_by(f64::total_cmp);
        r
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec::new(self.env)
    }

    pub fn stats(&self) -> DatasetStats {
        let sorted = self.sorted_returns();
        let (lo, hi) = envs::return_bounds(&self.spec());
        let bins = 10;
        let width = (hi - lo) / bins as f64;
        let mut histogram: Vec<HistogramBin> = (0..bins)
            .map(|i| HistogramBin {
                lo: lo + i as f64 * width,
                hi: lo + (i + 1) as f64 * width,
                count: 0,
            })
            .collect();
        for r in &sorted {
            let i = (((r - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            histogram[i].count += 1;
        }
        DatasetStats {
            env: self.env,
            n_traj: sorted.len(),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            q05: quantile(&sorted, 0.05),
            q50: quantile(&sorted, 0.5),
            q95: quantile(&sorted, 0.95),
            return_scale: self.return_scale,
            histogram,
        }
    }

    /// Total number of `(trajectory, timestep)` pairs.
    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let meta = Metadata {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            env: self.env,
            n_traj: self.trajectories.len(),
            return_scale: self.return_scale,
            provenance: self.provenance.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&meta).expect("serializable")).expect("string write");
        for t in &self.trajectories {
            let rec = TrajectoryRecord {
                states: t.states.clone(),
                actions: t.actions.clone(),
                rewards: t.rewards.clone(),
                total_return: t.total_return,
            };
            writeln!(out, "{}", serde_json::to_string(&rec).expect("serializable")).expect("string write");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_reader(BufReader::new(f))
    }

    pub fn from_reader(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let meta: Metadata = match lines.next() {
            None => return Err(Error::Dataset("empty dataset file".into())),
            Some((_, line)) => parse_line(1, &line?)?,
        };
        if meta.format != FORMAT_NAME || meta.version != FORMAT_VERSION {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unsupported format {} v{}", meta.format, meta.version),
            });
        }
        let spec = EnvSpec::new(meta.env);
        let mut trajectories = Vec::new();
        for (i, line) in lines {
            let line = line?;
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrajectoryRecord = parse_line(n, &line)?;
            let bad = |msg: String| Error::Parse { line: n, msg };
            if let Some(a) = rec.actions.iter().find(|a| !spec.action_space.contains(a)) {
                return Err(bad(format!("action {a:?} outside the {} action space", meta.env)));
            }
            if rec.states.iter().any(|s| s.len() != spec.state_dim) {
                return Err(bad(format!("state width differs from {}", spec.state_dim)));
            }
            let traj = Trajectory::new(rec.states, rec.actions, rec.rewards).map_err(|e| bad(e.to_string()))?;
            if traj.total_return.to_bits() != rec.total_return.to_bits() {
                return Err(bad(format!(
                    "total_return {} disagrees with the reward sum {}",
                    rec.total_return, traj.total_return
                )));
            }
            trajectories.push(traj);
        }
        if trajectories.is_empty() {
            return Err(Error::Dataset("dataset holds no trajectories".into()));
        }
        if trajectories.len() != meta.n_traj {
            return Err(Error::Dataset(format!(
                "header announces {} trajectories but {} were read",
                meta.n_traj,
                trajectories.len()
            )));
        }
        Ok(Self {
            env: meta.env,
            trajectories,
            return_scale: meta.return_scale,
            provenance: meta.provenance,
        })
    }
}

fn parse_line<T: for<'de> Deserialize<'de>>(line: usize, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        msg: e.to_string(),
    })
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    format: String,
    version: u32,
    env: EnvId,
    n_traj: usize,
    return_scale: f64,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    states: Vec<Vec<f64>>,
    actions: Vec<Action>,
    rewards: Vec<f64>,
    total_return: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActionBatch {
    /// `[B·K·dim]`
    Continuous { dim: usize, values: Vec<f64> },
    /// `[B·K]` indices in `0..n`.
    Discrete { n: usize, index: Vec<usize> },
}

/// Left-padded K-step windows. Padded slots hold zeros and timestep 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub k: usize,
    pub state_dim: usize,
    /// Raw (unscaled) returns-to-go, `[B·K]`.
    pub returns_to_go: Vec<f64>,
    /// `[B·K·state_dim]`
    pub states: Vec<f64>,
    /// Actions taken at each step; also the prediction targets.
    pub actions: ActionBatch,
    /// Absolute episode timestep, `[B·K]`.
    pub timesteps: Vec<usize>,
    pub pad: PadMask,
}

/// One window before batching: the `n ≤ K` most recent real steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Window<'a> {
    pub returns_to_go: &'a [f64],
    pub states: &'a [Vec<f64>],
    pub actions: &'a [Action],
    pub start_timestep: usize,
}

impl Batch {
    pub fn from_windows(windows: &[Window], k: usize, state_dim: usize, space: ActionSpace) -> Result<Self> {
        let b = windows.len();
        if b == 0 || k == 0 {
            return Err(Error::InvalidArgument("batch needs at least one window and K ≥ 1".into()));
        }
        let mut returns_to_go = vec![0.0; b * k];
        let mut states = vec![0.0; b * k * state_dim];
        let mut timesteps = vec![0; b * k];
        let mut real = vec![false; b * k];
        let mut actions = match space {
            ActionSpace::Continuous { dim, .. } => ActionBatch::Continuous {
                dim,
                values: vec![0.0; b * k * dim],
            },
            ActionSpace::Discrete(n) => ActionBatch::Discrete {
                n,
                index: vec![0; b * k],
            },
        };
        for (i, w) in windows.iter().enumerate() {
            let n = w.states.len();
            if n == 0 || n > k || w.returns_to_go.len() != n || w.actions.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "window {i}: {n} states, {} returns, {} actions for K = {k}",
                    w.returns_to_go.len(),
                    w.actions.len()
                )));
            }
            let pad = k - n;
            for j in 0..n {
                let slot = i * k + pad + j;
                real[slot] = true;
                returns_to_go[slot] = w.returns_to_go[j];
                timesteps[slot] = w.start_timestep + j;
                if w.states[j].len() != state_dim {
                    return Err(Error::InvalidArgument(format!(
                        "window {i}: state width {} != {state_dim}",
                        w.states[j].len()
                    )));
                }
                states[slot * state_dim..(slot + 1) * state_dim].copy_from_slice(&w.states[j]);
                match (&mut actions, &w.actions[j]) {
                    (ActionBatch::Continuous { dim, values }, Action::Continuous(a)) if a.len() == *dim => {
                        values[slot * *dim..(slot + 1) * *dim].copy_from_slice(a);
                    }
                    (ActionBatch::Discrete { n, index }, Action::Discrete(a)) if a < n => index[slot] = *a,
                    (_, a) => {
                        return Err(Error::InvalidArgument(format!(
                            "window {i}: action {a:?} does not fit {space:?}"
                        )))
                    }
                }
            }
        }
        Ok(Self {
            size: b,
            k,
            state_dim,
            returns_to_go,
            states,
            actions,
            timesteps,
            pad: PadMask::new(b, k, real)?,
        })
    }
}

/// The window of `traj` ending at step `end` (inclusive), at most `k` long.
pub fn window(traj: &Trajectory, end: usize, k: usize) -> Window<'_> {
    let start = (end + 1).saturating_sub(k);
    Window {
        returns_to_go: &traj.returns_to_go[start..=end],
        states: &traj.states[start..=end],
        actions: &traj.actions[start..=end],
        start_timestep: start,
    }
}

/// Uniform over `(trajectory, end-timestep)` pairs.
pub fn sample_batch(dataset: &Dataset, k: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let total = dataset.num_steps();
    let mut picks = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut u = rng.random_range(0..total);
        let mut ti = 0;
        while u >= dataset.trajectories[ti].len() {
            u -= dataset.trajectories[ti].len();
            ti += 1;
        }
        picks.push((ti, u));
    }
    let windows: Vec<Window> = picks
        .iter()
        .map(|&(ti, end)| window(&dataset.trajectories[ti], end, k))
        .collect();
    let spec = dataset.spec();
    Batch::from_windows(&windows, k, spec.state_dim, spec.action_space)
}
