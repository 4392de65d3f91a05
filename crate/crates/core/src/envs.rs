//! Finite-horizon toy environments with deterministic dynamics and seeded
//! start states.
//!
//! * `linewalk`: continuous acceleration control, dense reward equal to speed.
//! * `gridcollect`: 5×5 grid, five discrete moves, +1 per collected item.
//! * `delaychain`: binary presses counted by a hidden counter that is paid out
//!   only on the final step.
//!
//! Linewalk velocities (and hence rewards) live on a dyadic lattice of
//! spacing [`REWARD_QUANTUM`]; together with integer rewards elsewhere this
//! keeps every return-to-go sum exact in `f64`.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Resolution of continuous rewards (2⁻¹⁶).
pub const REWARD_QUANTUM: f64 = 1.0 / 65536.0;

/// Snaps a value onto the reward lattice.
pub fn quantize(x: f64) -> f64 {
    (x / REWARD_QUANTUM).round() * REWARD_QUANTUM
}

pub const LINEWALK_HORIZON: usize = 40;
pub const LINEWALK_ACCEL: f64 = 0.1;
pub const LINEWALK_JITTER: f64 = 0.05;
pub const GRID_SIZE: usize = 5;
pub const GRID_ITEMS: usize = 12;
pub const GRID_HORIZON: usize = 30;
pub const DELAY_HORIZON: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    LineWalk,
    GridCollect,
    DelayChain,
}

impl EnvId {
    pub const ALL: [EnvId; 3] = [EnvId::LineWalk, EnvId::GridCollect, EnvId::DelayChain];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::LineWalk => "linewalk",
            EnvId::GridCollect => "gridcollect",
            EnvId::DelayChain => "delaychain",
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvId::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| {
                Error::Env(format!(
                    "unknown environment '{s}' (expected one of linewalk, gridcollect, delaychain)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Continuous { dim: usize, low: f64, high: f64 },
    Discrete(usize),
}

impl ActionSpace {
    /// Width of the action input to the model: `dim`, or `n` for one-hot.
    pub fn width(&self) -> usize {
        match *self {
            ActionSpace::Continuous { dim, .. } => dim,
            ActionSpace::Discrete(n) => n,
        }
    }

    pub fn contains(&self, a: &Action) -> bool {
        match (self, a) {
            (ActionSpace::Continuous { dim, low, high }, Action::Continuous(v)) => {
                v.len() == *dim && v.iter().all(|x| x.is_finite() && *x >= *low && *x <= *high)
            }
            (ActionSpace::Discrete(n), Action::Discrete(i)) => i < n,
            _ => false,
        }
    }
}

/// A single action; continuous vectors serialize as arrays, discrete choices as
/// bare integers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub id: EnvId,
    pub horizon: usize,
    pub state_dim: usize,
    pub action_space: ActionSpace,
    /// Bounds of a single step's reward.
    pub reward_bounds: (f64, f64),
}

impl EnvSpec {
    pub fn new(id: EnvId) -> Self {
        match id {
            EnvId::LineWalk => Self {
                id,
                horizon: LINEWALK_HORIZON,
                state_dim: 2,
                action_space: ActionSpace::Continuous {
                    dim: 1,
                    low: -1.0,
                    high: 1.0,
                },
                reward_bounds: (0.0, 1.0),
            },
            EnvId::GridCollect => Self {
                id,
                horizon: GRID_HORIZON,
                state_dim: 2 + GRID_SIZE * GRID_SIZE,
                action_space: ActionSpace::Discrete(5),
                reward_bounds: (0.0, 1.0),
            },
            EnvId::DelayChain => Self {
                id,
                horizon: DELAY_HORIZON,
                state_dim: 1,
                action_space: ActionSpace::Discrete(2),
                reward_bounds: (0.0, (DELAY_HORIZON - 1) as f64),
            },
        }
    }

    pub fn reset(&self, seed: u64) -> EnvState {
        reset(self, seed)
    }

    pub fn step(&self, state: &EnvState, action: &Action) -> Result<StepResult> {
        step(self, state, action)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnvState {
    LineWalk {
        t: usize,
        position: f64,
        velocity: f64,
    },
    GridCollect {
        t: usize,
        x: usize,
        y: usize,
        items: Vec<bool>,
    },
    DelayChain {
        t: usize,
        counter: usize,
    },
}

impl EnvState {
    /// Steps already taken.
    pub fn t(&self) -> usize {
        match self {
            EnvState::LineWalk { t, .. }
            | EnvState::GridCollect { t, .. }
            | EnvState::DelayChain { t, .. } => *t,
        }
    }

    /// Observation vector fed to policies; the delaychain counter is hidden.
    pub fn observation(&self) -> Vec<f64> {
        match self {
            EnvState::LineWalk {
                position, velocity, ..
            } => vec![*position, *velocity],
            EnvState::GridCollect { x, y, items, .. } => {
                let scale = (GRID_SIZE - 1) as f64;
                let mut v = vec![*x as f64 / scale, *y as f64 / scale];
                v.extend(items.iter().map(|&b| if b { 1.0 } else { 0.0 }));
                v
            }
            EnvState::DelayChain { t, .. } => vec![*t as f64 / DELAY_HORIZON as f64],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    pub done: bool,
}

/// Deterministic start state for `(spec, seed)`.
pub fn reset(spec: &EnvSpec, seed: u64) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec.id {
        EnvId::LineWalk => EnvState::LineWalk {
            t: 0,
            position: rng.random_range(-LINEWALK_JITTER..=LINEWALK_JITTER),
            velocity: 0.0,
        },
        EnvId::GridCollect => {
            let cells = GRID_SIZE * GRID_SIZE;
            let mut items = vec![false; cells];
            // the start corner (cell 0) never holds an item
            for c in sample(&mut rng, cells - 1, GRID_ITEMS) {
                items[c + 1] = true;
            }
            EnvState::GridCollect {
                t: 0,
                x: 0,
                y: 0,
                items,
            }
        }
        EnvId::DelayChain => EnvState::DelayChain { t: 0, counter: 0 },
    }
}

pub fn step(spec: &EnvSpec, state: &EnvState, action: &Action) -> Result<StepResult> {
    if state.t() >= spec.horizon {
        return Err(Error::Env(format!(
            "{} episode already finished after {} steps",
            spec.id, spec.horizon
        )));
    }
    if !spec.action_space.contains(action) {
        return Err(Error::Env(format!(
            "action {action:?} is outside the {} action space",
            spec.id
        )));
    }
    let done = state.t() + 1 == spec.horizon;
    let (next_state, reward) = match (state, action) {
        (
            EnvState::LineWalk {
                t,
                position,
                velocity,
            },
            Action::Continuous(a),
        ) => {
            let v = quantize((velocity + LINEWALK_ACCEL * a[0]).clamp(0.0, 1.0));
            (
                EnvState::LineWalk {
                    t: t + 1,
                    position: position + v,
                    velocity: v,
                },
                v,
            )
        }
        (EnvState::GridCollect { t, x, y, items }, Action::Discrete(a)) => {
            let (mut nx, mut ny) = (*x, *y);
            match a {
                1 => ny = ny.saturating_sub(1),
                2 => ny = (ny + 1).min(GRID_SIZE - 1),
                3 => nx = nx.saturating_sub(1),
                4 => nx = (nx + 1).min(GRID_SIZE - 1),
                _ => {}
            }
            let mut items = items.clone();
            let cell = ny * GRID_SIZE + nx;
            let reward = if items[cell] {
                items[cell] = false;
                1.0
            } else {
                0.0
            };
            (
                EnvState::GridCollect {
                    t: t + 1,
                    x: nx,
                    y: ny,
                    items,
                },
                reward,
            )
        }
        (EnvState::DelayChain { t, counter }, Action::Discrete(a)) => {
            if done {
                (
                    EnvState::DelayChain {
                        t: t + 1,
                        counter: *counter,
                    },
                    *counter as f64,
                )
            } else {
                (
                    EnvState::DelayChain {
                        t: t + 1,
                        counter: counter + a,
                    },
                    0.0,
                )
            }
        }
        _ => {
            return Err(Error::Env(format!(
                "state does not belong to environment {}",
                spec.id
            )))
        }
    };
    Ok(StepResult {
        next_state,
        reward,
        done,
    })
}

/// Runs a fixed action sequence (cycled) from `seed`, returning the return.
pub fn open_loop_return(spec: &EnvSpec, seed: u64, actions: &[Action]) -> Result<f64> {
    let mut s = reset(spec, seed);
    let mut total = 0.0;
    for t in 0..spec.horizon {
        let r = step(spec, &s, &actions[t % actions.len()])?;
        total += r.reward;
        s = r.next_state;
    }
    Ok(total)
}

/// Smallest and largest achievable episode return.
pub fn return_bounds(spec: &EnvSpec) -> (f64, f64) {
    match spec.id {
        EnvId::LineWalk => {
            let lo = open_loop_return(spec, 0, &[Action::Continuous(vec![-1.0])]).expect("valid");
            let hi = open_loop_return(spec, 0, &[Action::Continuous(vec![1.0])]).expect("valid");
            (lo, hi)
        }
        EnvId::GridCollect => (0.0, GRID_ITEMS as f64),
        EnvId::DelayChain => {
            let hi = open_loop_return(spec, 0, &[Action::Discrete(1)]).expect("valid");
            (0.0, hi)
        }
    }
}

/// Speed-tracking acceleration for linewalk: the action that moves the current
/// velocity toward `target`, saturated to `[-1, 1]`.
pub fn track_speed(velocity: f64, target: f64) -> f64 {
    ((target - velocity) / LINEWALK_ACCEL).clamp(-1.0, 1.0)
}

/// Greedy gridcollect move toward the nearest remaining item (Manhattan
/// distance, ties broken by cell order); stays put when none remain.
pub fn greedy_grid_move(state: &EnvState) -> usize {
    let EnvState::GridCollect { x, y, items, .. } = state else {
        return 0;
    };
    let target = items
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(c, _)| (c % GRID_SIZE, c / GRID_SIZE))
        .min_by_key(|&(cx, cy)| cx.abs_diff(*x) + cy.abs_diff(*y));
    match target {
        None => 0,
        Some((cx, _)) if cx > *x => 4,
        Some((cx, _)) if cx < *x => 3,
        Some((_, cy)) if cy > *y => 2,
        Some((_, cy)) if cy < *y => 1,
        Some(_) => 0,
    }
}
