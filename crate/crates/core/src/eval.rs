//! Return-alignment evaluation: target grid, rollouts with return-to-go
//! bookkeeping, normalized absolute errors, traces, attention probes and
//! chart output.

use std::fmt::Write as _;

use serde::Serialize;

use crate::aligners::{modality_masses, Modality, TimestepMap};
use crate::data::{quantile, Batch, Dataset, Window};
use crate::envs::{self, quantize, Action, ActionSpace, EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::layers::AttentionKind;
use crate::model::{Model, Variant};

pub const GRID_POINTS: usize = 7;

/// Anything that maps a batch of windows to one action per window.
pub trait Policy {
    fn context_length(&self) -> usize;
    fn act(&self, batch: &Batch) -> Result<Vec<Action>>;
}

impl Policy for Model {
    fn context_length(&self) -> usize {
        self.config.context_length
    }

    fn act(&self, batch: &Batch) -> Result<Vec<Action>> {
        Model::act(self, batch)
    }
}

/// Seven equally spaced target returns between two dataset quantiles.
///
/// Targets sit on the reward lattice so return-to-go arithmetic stays exact.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetGrid {
    pub targets: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl TargetGrid {
    pub fn from_bounds(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::InvalidArgument(format!(
                "degenerate return spread: q05 = {lo}, q95 = {hi}"
            )));
        }
        let step = (hi - lo) / (GRID_POINTS - 1) as f64;
        let targets: Vec<f64> = (0..GRID_POINTS)
            .map(|i| if i + 1 == GRID_POINTS { hi } else { lo + i as f64 * step })
            .map(quantize)
            .collect();
        if targets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!("return spread {lo}..{hi} is too narrow for a grid")));
        }
        Ok(Self { targets, lo, hi })
    }

    pub fn spread(&self) -> f64 {
        self.hi - self.lo
    }

    /// Affine map placing `lo` at 0 and `hi` at 100.
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.lo) * 100.0 / self.spread()
    }

    pub fn normalized_error(&self, target: f64, actual: f64) -> f64 {
        (actual - target).abs() * 100.0 / self.spread()
    }
}

/// q05..q95 grid of the dataset's trajectory returns.
pub fn build_target_grid(dataset: &Dataset) -> Result<TargetGrid> {
    if dataset.trajectories.len() < 20 {
        return Err(Error::InvalidArgument(format!(
            "target grid needs at least 20 trajectories, dataset has {}",
            dataset.trajectories.len()
        )));
    }
    let sorted = dataset.sorted_returns();
    TargetGrid::from_bounds(quantile(&sorted, 0.05), quantile(&sorted, 0.95))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    /// Return-to-go fed to the policy before acting.
    pub rtg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub target_return: f64,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub actual_return: f64,
}

impl EpisodeRecord {
    /// Final return-to-go after the last reward.
    pub fn final_rtg(&self) -> f64 {
        self.steps.last().map_or(self.target_return, |s| s.rtg - s.reward)
    }

    /// The window of the last `k` steps ending at `t`.
    pub fn window<'a>(&self, t: usize, k: usize, cache: &'a mut WindowCache) -> Window<'a> {
        let start = (t + 1).saturating_sub(k);
        cache.fill(&self.steps[start..=t]);
        Window {
            returns_to_go: &cache.rtg,
            states: &cache.states,
            actions: &cache.actions,
            start_timestep: start,
        }
    }
}

/// Scratch columns for building windows from step records.
#[derive(Default)]
pub struct WindowCache {
    rtg: Vec<f64>,
    states: Vec<Vec<f64>>,
    actions: Vec<Action>,
}

impl WindowCache {
    fn fill(&mut self, steps: &[StepRecord]) {
        self.rtg = steps.iter().map(|s| s.rtg).collect();
        self.states = steps.iter().map(|s| s.state.clone()).collect();
        self.actions = steps.iter().map(|s| s.action.clone()).collect();
    }
}

/// A requested episode: target return and environment start seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeSpec {
    pub target_return: f64,
    pub seed: u64,
}

fn placeholder(space: ActionSpace) -> Action {
    match space {
        ActionSpace::Continuous { dim, .. } => Action::Continuous(vec![0.0; dim]),
        ActionSpace::Discrete(_) => Action::Discrete(0),
    }
}

/// Runs all episodes in lock-step, batching the policy calls. At each step the
/// policy sees the last K timesteps with `R̂_{t+1} = R̂_t − r_t`; the current
/// action slot holds a placeholder that causal masking hides.
pub fn rollout_many(policy: &dyn Policy, spec: &EnvSpec, episodes: &[EpisodeSpec]) -> Result<Vec<EpisodeRecord>> {
    let k = policy.context_length();
    let mut states: Vec<EnvState> = episodes.iter().map(|e| spec.reset(e.seed)).collect();
    let mut records: Vec<EpisodeRecord> = episodes
        .iter()
        .map(|e| EpisodeRecord {
            target_return: e.target_return,
            seed: e.seed,
            steps: Vec::with_capacity(spec.horizon),
            actual_return: 0.0,
        })
        .collect();
    if episodes.is_empty() {
        return Ok(records);
    }
    for t in 0..spec.horizon {
        for (rec, s) in records.iter_mut().zip(&states) {
            let rtg = rec.steps.last().map_or(rec.target_return, |p| p.rtg - p.reward);
            rec.steps.push(StepRecord {
                state: s.observation(),
                action: placeholder(spec.action_space),
                reward: 0.0,
                rtg,
            });
        }
        let mut caches: Vec<WindowCache> = records.iter().map(|_| WindowCache::default()).collect();
        let windows: Vec<Window> = records
            .iter()
            .zip(caches.iter_mut())
            .map(|(r, c)| r.window(t, k, c))
            .collect();
        let batch = Batch::from_windows(&windows, k.min(t + 1), spec.state_dim, spec.action_space)?;
        let actions = policy.act(&batch)?;
        if actions.len() != records.len() {
            return Err(Error::InvalidArgument("policy returned the wrong number of actions".into()));
        }
        for ((rec, s), a) in records.iter_mut().zip(states.iter_mut()).zip(actions) {
            let r = spec.step(s, &a)?;
            let last = rec.steps.last_mut().expect("pushed above");
            last.action = a;
            last.reward = r.reward;
            rec.actual_return += r.reward;
            *s = r.next_state;
        }
    }
    Ok(records)
}

pub fn rollout(policy: &dyn Policy, spec: &EnvSpec, target_return: f64, seed: u64) -> Result<EpisodeRecord> {
    Ok(rollout_many(policy, spec, &[EpisodeSpec { target_return, seed }])?.remove(0))
}

/// Environment start seed of one evaluation episode.
pub fn episode_seed(seed: u64, target_index: usize, episode: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((target_index as u64) << 32 | episode as u64)
}

/// One row of the long-format alignment table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentRow {
    pub variant: String,
    pub seed: u64,
    pub target_index: usize,
    pub target: f64,
    pub episode: usize,
    pub actual: f64,
    pub abs_err_norm: f64,
}

pub const ALIGNMENT_HEADER: &str = "variant,seed,target,episode,actual,abs_err_norm";

impl AlignmentRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.variant, self.seed, self.target, self.episode, self.actual, self.abs_err_norm
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetSummary {
    pub target: f64,
    pub normalized_target: f64,
    pub mean: f64,
    /// Standard error over seeds (0 with a single seed).
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub variant: String,
    pub grid: TargetGrid,
    pub per_target: Vec<TargetSummary>,
    pub per_seed: Vec<SeedSummary>,
    pub grand_mean: f64,
    pub rows: Vec<AlignmentRow>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation divided by `√n`; 0 for fewer than two values.
pub fn stderr(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

impl AlignmentReport {
    /// Aggregates rows: per target, the per-seed episode means are averaged
    /// and their standard error taken over seeds.
    pub fn from_rows(variant: &str, grid: TargetGrid, rows: Vec<AlignmentRow>) -> Self {
        let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let cell = |ti: usize, seed: u64| -> Option<f64> {
            let errs: Vec<f64> = rows
                .iter()
                .filter(|r| r.target_index == ti && r.seed == seed)
                .map(|r| r.abs_err_norm)
                .collect();
            (!errs.is_empty()).then(|| mean(&errs))
        };
        let per_target: Vec<TargetSummary> = grid
            .targets
            .iter()
            .enumerate()
            .map(|(ti, &target)| {
                let per_seed: Vec<f64> = seeds.iter().filter_map(|&s| cell(ti, s)).collect();
                TargetSummary {
                    target,
                    normalized_target: grid.normalize(target),
                    mean: if per_seed.is_empty() { f64::NAN } else { mean(&per_seed) },
                    stderr: stderr(&per_seed),
                }
            })
            .collect();
        let per_seed = seeds
            .iter()
            .map(|&seed| {
                let cells: Vec<f64> = (0..grid.targets.len()).filter_map(|ti| cell(ti, seed)).collect();
                SeedSummary { seed, mean: mean(&cells) }
            })
            .collect();
        let grand_mean = mean(&per_target.iter().map(|t| t.mean).collect::<Vec<_>>());
        Self {
            variant: variant.to_string(),
            grid,
            per_target,
            per_seed,
            grand_mean,
            rows,
        }
    }

    pub fn csv(&self) -> String {
        let mut out = format!("{ALIGNMENT_HEADER}\n");
        for r in &self.rows {
            writeln!(out, "{}", r.csv()).expect("string write");
        }
        out
    }
}

/// Rolls out every target × episode for one policy labelled `seed`.
pub fn evaluate_policy(
    policy: &dyn Policy,
    spec: &EnvSpec,
    grid: &TargetGrid,
    n_episodes: usize,
    seed: u64,
) -> Result<(Vec<AlignmentRow>, Vec<EpisodeRecord>)> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be at least 1".into()));
    }
    let mut specs = Vec::new();
    for (ti, &target) in grid.targets.iter().enumerate() {
        for ep in 0..n_episodes {
            specs.push(EpisodeSpec {
                target_return: target,
                seed: episode_seed(seed, ti, ep),
            });
        }
    }
    let records = rollout_many(policy, spec, &specs)?;
    let rows = records
        .iter()
        .enumerate()
        .map(|(i, r)| AlignmentRow {
            variant: String::new(),
            seed,
            target_index: i / n_episodes,
            target: r.target_return,
            episode: i % n_episodes,
            actual: r.actual_return,
            abs_err_norm: grid.normalized_error(r.target_return, r.actual_return),
        })
        .collect();
    Ok((rows, records))
}

/// Alignment report of one policy over several evaluation seeds.
pub fn alignment_eval(
    policy: &dyn Policy,
    variant: &str,
    spec: &EnvSpec,
    grid: &TargetGrid,
    n_episodes: usize,
    seeds: &[u64],
) -> Result<(AlignmentReport, Vec<EpisodeRecord>)> {
    let mut rows = Vec::new();
    let mut episodes = Vec::new();
    for &seed in seeds {
        let (r, e) = evaluate_policy(policy, spec, grid, n_episodes, seed)?;
        rows.extend(r);
        episodes.extend(e);
    }
    for r in &mut rows {
        r.variant = variant.to_string();
    }
    Ok((AlignmentReport::from_rows(variant, grid.clone(), rows), episodes))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TracePoint {
    pub target: f64,
    pub step: usize,
    pub mean: f64,
    pub stderr: f64,
    pub mean_reward: f64,
}

pub const TRACE_HEADER: &str = "target,step,mean_rtg,stderr_rtg,mean_reward";

/// Per-target, per-step mean ± standard error of the return-to-go before each
/// step, plus a final point after the last reward.
pub fn rtg_trace(episodes: &[EpisodeRecord]) -> Vec<TracePoint> {
    let mut targets: Vec<f64> = episodes.iter().map(|e| e.target_return).collect();
    targets.sort_by(f64::total_cmp);
    targets.dedup();
    let mut out = Vec::new();
    for target in targets {
        let group: Vec<&EpisodeRecord> = episodes.iter().filter(|e| e.target_return == target).collect();
        let len = group.iter().map(|e| e.steps.len()).min().unwrap_or(0);
        for step in 0..len {
            let rtg: Vec<f64> = group.iter().map(|e| e.steps[step].rtg).collect();
            let rewards: Vec<f64> = group.iter().map(|e| e.steps[step].reward).collect();
            out.push(TracePoint {
                target,
                step,
                mean: mean(&rtg),
                stderr: stderr(&rtg),
                mean_reward: mean(&rewards),
            });
        }
        let last: Vec<f64> = group.iter().map(|e| e.final_rtg()).collect();
        out.push(TracePoint {
            target,
            step: len,
            mean: mean(&last),
            stderr: stderr(&last),
            mean_reward: 0.0,
        });
    }
    out
}

pub fn trace_csv(points: &[TracePoint]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for p in points {
        writeln!(out, "{},{},{},{},{}", p.target, p.step, p.mean, p.stderr, p.mean_reward).expect("string write");
    }
    out
}

/// Mean return at the top grid target, scaled so the environment's return
/// bounds map to 0 and 100.
pub fn max_return_eval(policy: &dyn Policy, spec: &EnvSpec, grid: &TargetGrid, n_episodes: usize, seed: u64) -> Result<f64> {
    let top = *grid.targets.last().expect("grid is nonempty");
    let specs: Vec<EpisodeSpec> = (0..n_episodes)
        .map(|ep| EpisodeSpec {
            target_return: top,
            seed: episode_seed(seed, GRID_POINTS, ep),
        })
        .collect();
    let records = rollout_many(policy, spec, &specs)?;
    let (lo, hi) = envs::return_bounds(spec);
    Ok(mean(&records.iter().map(|r| 100.0 * (r.actual_return - lo) / (hi - lo)).collect::<Vec<_>>()))
}

/// Episode-averaged first-layer attention mass on each token group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionMass {
    pub target: f64,
    pub seed: u64,
    pub return_mass: f64,
    pub state_mass: f64,
    pub action_mass: f64,
}

pub const ATTENTION_HEADER: &str = "target,seed,return_mass,state_mass,action_mass";

pub fn attention_csv(rows: &[AttentionMass]) -> String {
    let mut out = format!("{ATTENTION_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.target, r.seed, r.return_mass, r.state_mass, r.action_mass).expect("string write");
    }
    out
}

/// For each episode, replays every step's window and averages the masses of
/// the first-layer attention row of the final state query: self-attention
/// over `(R, s, a)` for the baseline, SeqRA over returns for RADT.
pub fn attention_probe(model: &Model, episodes: &[EpisodeRecord]) -> Result<Vec<AttentionMass>> {
    let (kind, want) = match model.config.variant {
        Variant::Dt => (AttentionKind::SelfAttention, "self-attention"),
        Variant::Radt if model.config.use_seqra => (AttentionKind::SeqRa, "SeqRA"),
        Variant::Radt => {
            return Err(Error::InvalidArgument(
                "attention probe needs SeqRA, which this RADT variant lacks".into(),
            ))
        }
    };
    let k = model.config.context_length;
    let (state_dim, space) = (model.config.state_dim, model.config.action_space);
    let mut out = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let mut caches: Vec<WindowCache> = ep.steps.iter().map(|_| WindowCache::default()).collect();
        let windows: Vec<Window> = caches
            .iter_mut()
            .enumerate()
            .map(|(t, c)| ep.window(t, k, c))
            .collect();
        let batch = Batch::from_windows(&windows, k, state_dim, space)?;
        let (_, probes) = model.predict_with_probes(&batch)?;
        let rec = probes
            .iter()
            .find(|p| p.layer == 0 && p.kind == kind)
            .ok_or_else(|| Error::InvalidArgument(format!("model recorded no first-layer {want} scores")))?;
        let (lq, lk) = (rec.scores.shape()[1], rec.scores.shape()[2]);
        let (query, keys) = match kind {
            AttentionKind::SelfAttention => {
                let map = TimestepMap::return_state_action(lk);
                (3 * k - 2, (0..lk).map(|p| map.modality(p)).collect::<Vec<_>>())
            }
            AttentionKind::SeqRa => (2 * k - 2, vec![Modality::Return; lk]),
        };
        let mut acc = [0.0; 3];
        let h = rec.heads;
        for b in 0..batch.size {
            for head in 0..h {
                let row0 = ((b * h + head) * lq + query) * lk;
                let m = modality_masses(&rec.scores.data()[row0..row0 + lk], &keys);
                for (a, v) in acc.iter_mut().zip(m) {
                    *a += v;
                }
            }
        }
        let n = (batch.size * h) as f64;
        out.push(AttentionMass {
            target: ep.target_return,
            seed: ep.seed,
            return_mass: acc[0] / n,
            state_mass: acc[1] / n,
            action_mass: acc[2] / n,
        });
    }
    Ok(out)
}

/// One named polyline of a chart.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Standalone SVG line chart with axes, tick labels and a legend.
pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">
<rect width="{w}" height="{h}" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    )
    .expect("string write");
    writeln!(
        s,
        r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>
<line x1="{left}" y1="{top}" x2="{left}" y2="{0}" stroke="black"/>"#,
        top + ph,
        left + pw
    )
    .expect("string write");
    for i in 0..=5 {
        let fx = x0 + (x1 - x0) * i as f64 / 5.0;
        let fy = y0 + (y1 - y0) * i as f64 / 5.0;
        writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>
<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>
<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#dddddd"/>"##,
            sx(fx),
            top + ph + 18.0,
            tick(fx),
            left - 6.0,
            sy(fy) + 4.0,
            tick(fy),
            sy(fy),
            left + pw,
            sy(fy)
        )
        .expect("string write");
    }
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>
<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(x_label),
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    )
    .expect("string write");
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>
<rect x="{:.1}" y="{:.1}" width="12" height="3" fill="{color}"/>
<text x="{:.1}" y="{:.1}">{}</text>"#,
            path.join(" "),
            left + pw + 12.0,
            top + 10.0 + 18.0 * i as f64,
            left + pw + 30.0,
            top + 15.0 + 18.0 * i as f64,
            escape(&ser.name)
        )
        .expect("string write");
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Return-to-go traces per target (one line per target).
pub fn trace_chart(points: &[TracePoint], title: &str) -> String {
    let mut series: Vec<Series> = Vec::new();
    for p in points {
        let name = format!("target {:.2}", p.target);
        match series.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push((p.step as f64, p.mean)),
            None => series.push(Series {
                name,
                points: vec![(p.step as f64, p.mean)],
            }),
        }
    }
    svg_line_chart(title, "step", "return-to-go", &series)
}

/// Normalized absolute error per normalized target, one line per report.
pub fn error_chart(reports: &[&AlignmentReport], title: &str) -> String {
    let series: Vec<Series> = reports
        .iter()
        .map(|r| Series {
            name: r.variant.clone(),
            points: r.per_target.iter().map(|t| (t.normalized_target, t.mean)).collect(),
        })
        .collect();
    svg_line_chart(title, "normalized target return", "normalized absolute error", &series)
}

#[cfg(test)]
mod tests;
