//! Train-and-evaluate runs over (env, arch, seed) and the DT-normalized
//! ablation table built from them.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::envs::EnvId;
use crate::eval::{self, AlignmentReport, AlignmentRow, EpisodeRecord, TargetGrid};
use crate::model::{Arch, Model};
use crate::train::{self, MetricRow, TrainSink};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RunKey {
    pub env: EnvId,
    pub arch: Arch,
    pub seed: u64,
}

impl RunKey {
    pub fn label(&self) -> String {
        format!("{}/{}/seed-{}", self.env, self.arch.name(), self.seed)
    }
}

pub struct RunOutput {
    pub key: RunKey,
    pub model: Model,
    pub metrics: Vec<MetricRow>,
    pub rows: Vec<AlignmentRow>,
    pub episodes: Vec<EpisodeRecord>,
}

/// Trains one model with training seed `key.seed` and evaluates it on the
/// grid with the same seed.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    dataset: &Dataset,
    grid: &TargetGrid,
    key: RunKey,
    sink: &mut dyn TrainSink,
) -> Result<RunOutput> {
    let model_cfg = cfg.model.radt_config(key.env, key.arch);
    let mut model = Model::new(model_cfg, dataset.return_scale, key.seed)?;
    let tc = train::TrainConfig {
        seed: key.seed,
        ..cfg.train.clone()
    };
    let metrics = train::train(&mut model, dataset, &tc, sink)?;
    let (mut rows, episodes) = eval::evaluate_policy(&model, &dataset.spec(), grid, cfg.eval.episodes, key.seed)?;
    for r in &mut rows {
        r.variant = key.arch.name().to_string();
    }
    Ok(RunOutput {
        key,
        model,
        metrics,
        rows,
        episodes,
    })
}

/// Applies `f` to every item on up to `jobs` threads; results keep input order.
pub fn par_map<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item is processed"))
        .collect()
}

/// Mean over episodes of `|final rtg|` for episodes conditioned on `target`.
pub fn final_rtg_magnitude(episodes: &[EpisodeRecord], target: f64) -> f64 {
    let v: Vec<f64> = episodes
        .iter()
        .filter(|e| e.target_return == target)
        .map(|e| e.final_rtg().abs())
        .collect();
    if v.is_empty() {
        f64::NAN
    } else {
        eval::mean(&v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub grand_mean: f64,
    /// Standard error of the per-seed grand means.
    pub stderr: f64,
    /// `grand_mean` divided by DT's on the same env; absent without DT.
    pub normalized: Option<f64>,
    /// Mean `|final rtg|` at the highest grid target.
    pub top_final_rtg: f64,
    pub seeds: Vec<u64>,
    pub failed_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub envs: Vec<EnvId>,
    pub variants: Vec<Arch>,
    /// `cells[v][e]`; `None` when every seed failed.
    pub cells: Vec<Vec<Option<AblationCell>>>,
    pub failures: Vec<String>,
}

/// Result of one run as seen by the table: either its rows and episodes or
/// an error message.
pub type RunResult = (RunKey, std::result::Result<(Vec<AlignmentRow>, Vec<EpisodeRecord>), String>);

impl AblationTable {
    pub fn build(envs: &[EnvId], variants: &[Arch], grids: &[TargetGrid], runs: &[RunResult]) -> Self {
        let mut failures = Vec::new();
        for (key, r) in runs {
            if let Err(e) = r {
                failures.push(format!("{}: {e}", key.label()));
            }
        }
        let mut cells: Vec<Vec<Option<AblationCell>>> = variants
            .iter()
            .map(|&arch| {
                envs.iter()
                    .zip(grids)
                    .map(|(&env, grid)| {
                        let mine: Vec<&RunResult> = runs.iter().filter(|(k, _)| k.env == env && k.arch == arch).collect();
                        let failed_seeds = mine.iter().filter(|(_, r)| r.is_err()).map(|(k, _)| k.seed).collect();
                        let ok: Vec<(u64, &(Vec<AlignmentRow>, Vec<EpisodeRecord>))> =
                            mine.iter().filter_map(|(k, r)| r.as_ref().ok().map(|v| (k.seed, v))).collect();
                        if ok.is_empty() {
                            return None;
                        }
                        let rows: Vec<AlignmentRow> = ok.iter().flat_map(|(_, (r, _))| r.iter().cloned()).collect();
                        let episodes: Vec<EpisodeRecord> = ok.iter().flat_map(|(_, (_, e))| e.iter().cloned()).collect();
                        let report = AlignmentReport::from_rows(arch.name(), grid.clone(), rows);
                        let top = grid.targets[grid.targets.len() - 1];
                        Some(AblationCell {
                            grand_mean: report.grand_mean,
                            stderr: eval::stderr(&report.per_seed.iter().map(|s| s.mean).collect::<Vec<_>>()),
                            normalized: None,
                            top_final_rtg: final_rtg_magnitude(&episodes, top),
                            seeds: ok.iter().map(|(s, _)| *s).collect(),
                            failed_seeds,
                        })
                    })
                    .collect()
            })
            .collect();
        if let Some(dt) = variants.iter().position(|&a| a == Arch::Dt) {
            for e in 0..envs.len() {
                let Some(base) = cells[dt][e].as_ref().map(|c| c.grand_mean) else { continue };
                for row in cells.iter_mut() {
                    if let Some(c) = row[e].as_mut() {
                        c.normalized = Some(c.grand_mean / base);
                    }
                }
            }
        }
        Self {
            envs: envs.to_vec(),
            variants: variants.to_vec(),
            cells,
            failures,
        }
    }

    pub fn cell(&self, arch: Arch, env: EnvId) -> Option<&AblationCell> {
        let v = self.variants.iter().position(|&a| a == arch)?;
        let e = self.envs.iter().position(|&x| x == env)?;
        self.cells[v][e].as_ref()
    }

    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }

    /// One row per variant, one column per env; DT-normalized errors, with
    /// `NA` where a value is missing and `*` marking cells with failed seeds.
    pub fn csv(&self) -> String {
        let mut out = String::from("variant");
        for env in &self.envs {
            out.push(',');
            out.push_str(env.as_str());
        }
        out.push('\n');
        for (v, arch) in self.variants.iter().enumerate() {
            out.push_str(arch.name());
            for cell in &self.cells[v] {
                out.push(',');
                match cell {
                    Some(c) => {
                        match c.normalized {
                            Some(n) => out.push_str(&format!("{n:.4}")),
                            None => out.push_str("NA"),
                        }
                        if !c.failed_seeds.is_empty() {
                            out.push('*');
                        }
                    }
                    None => out.push_str("NA"),
                }
            }
            out.push('\n');
        }
        out
    }
}
