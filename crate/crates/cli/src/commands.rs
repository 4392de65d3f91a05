use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use radt_core::checkpoint::{digest_hex, Checkpoint};
use radt_core::config::{model_from_canonical, RunConfig};
use radt_core::data::{generate_dataset, Dataset, DatasetStats, GenerateOptions, PolicyMix};
use radt_core::envs::EnvId;
use radt_core::eval::{
    self, alignment_eval, build_target_grid, AlignmentReport, Series, SeedSummary, TargetGrid, TargetSummary,
    TracePoint,
};
use radt_core::experiment::{par_map, train_and_evaluate, AblationTable, RunKey, RunResult};
use radt_core::model::{Arch, Model, ModelSummary};
use radt_core::train::{self, MetricRow, TrainSink, METRICS_HEADER};
use radt_core::{Error, Result};
use serde::Serialize;

use crate::output::{write, Provenance};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const ALIGNMENT_FILE: &str = "alignment.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRACES_FILE: &str = "traces.svg";
pub const ERRORS_FILE: &str = "errors.svg";
pub const ABLATION_FILE: &str = "ablation.csv";

/// How a command finished when it did not fail outright.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Partial,
}

pub const DEFAULT_VARIANTS: [Arch; 5] = [Arch::Full, Arch::NoSeqRa, Arch::NoStepRa, Arch::NoAdaScale, Arch::Dt];

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("cannot create {}: {e}", dir.display())))
    })
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).map_err(|e| match e {
        Error::Io(io) => Error::InvalidArgument(format!("cannot read dataset {}: {io}", path.display())),
        other => other,
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::InvalidArgument(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })
}

fn check_env(dataset: &Dataset, env: EnvId) -> Result<()> {
    if dataset.env != env {
        return Err(Error::InvalidArgument(format!(
            "dataset is for env {}, expected {env}",
            dataset.env
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct StatsDoc<'a> {
    stats: &'a DatasetStats,
    policy_mix: &'a PolicyMix,
}

pub fn gen_data(env: EnvId, n_traj: usize, seed: u64, out: &Path) -> Result<()> {
    let mix = PolicyMix::default_for(env);
    let ds = generate_dataset(env, &mix, n_traj, seed, GenerateOptions::default())?;
    create_dir(out)?;
    let prov = Provenance::new(digest_hex(&format!("env = {env}\nn_traj = {n_traj}\nseed = {seed}\n")), vec![seed]);
    write(&out.join(DATASET_FILE), &ds.to_jsonl())?;
    let stats = ds.stats();
    write(
        &out.join(STATS_FILE),
        &prov.json(&StatsDoc {
            stats: &stats,
            policy_mix: &mix,
        })?,
    )?;
    println!(
        "wrote {} trajectories for {env}: returns q05 {:.3}, q50 {:.3}, q95 {:.3}",
        ds.trajectories.len(),
        stats.q05,
        stats.q50,
        stats.q95
    );
    Ok(())
}

/// Loads the configured dataset, or generates one with the run seed and
/// saves it as `dir/dataset.jsonl`.
fn obtain_dataset(cfg: &RunConfig, env: EnvId, dir: &Path) -> Result<Dataset> {
    let ds = match &cfg.dataset {
        Some(p) => load_dataset(p)?,
        None => {
            let ds = generate_dataset(
                env,
                &PolicyMix::default_for(env),
                cfg.n_traj,
                cfg.seed,
                GenerateOptions::default(),
            )?;
            create_dir(dir)?;
            write(&dir.join(DATASET_FILE), &ds.to_jsonl())?;
            ds
        }
    };
    check_env(&ds, env)?;
    Ok(ds)
}

/// Streams metrics to `metrics.csv` and writes checkpoints into `dir`:
/// `checkpoint.bin` at the end, `checkpoint-step-N.bin` in between.
struct RunSink {
    metrics: BufWriter<File>,
    dir: PathBuf,
    canonical: String,
    steps: usize,
}

impl RunSink {
    fn new(dir: &Path, canonical: String, prov: &Provenance, steps: usize) -> Result<Self> {
        create_dir(dir)?;
        let mut metrics = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
        write!(metrics, "{}", prov.csv(&format!("{METRICS_HEADER}\n")))?;
        Ok(Self {
            metrics,
            dir: dir.to_path_buf(),
            canonical,
            steps,
        })
    }
}

impl TrainSink for RunSink {
    fn metric(&mut self, row: &MetricRow) -> Result<()> {
        writeln!(self.metrics, "{}", row.csv())?;
        Ok(())
    }

    fn checkpoint(&mut self, step: usize, model: &Model) -> Result<()> {
        self.metrics.flush()?;
        let name = if step == self.steps {
            CHECKPOINT_FILE.to_string()
        } else {
            format!("checkpoint-step-{step}.bin")
        };
        model.to_checkpoint(self.canonical.clone()).save(&self.dir.join(name))
    }
}

fn single_env(cfg: &RunConfig) -> Result<EnvId> {
    match cfg.envs.as_slice() {
        [env] => Ok(*env),
        _ => Err(Error::Config("[run] env must name a single env for this command".into())),
    }
}

#[derive(Serialize)]
struct TrainDoc<'a> {
    env: EnvId,
    arch: Arch,
    steps: usize,
    final_loss: Option<f64>,
    model: &'a ModelSummary,
}

pub fn train_cmd(config: &Path, out: Option<PathBuf>, default_seed: u64) -> Result<()> {
    let cfg = RunConfig::load(config, default_seed)?;
    let env = single_env(&cfg)?;
    let out = out.unwrap_or_else(|| cfg.out.clone());
    let dataset = obtain_dataset(&cfg, env, &out)?;
    let arch = cfg.model.arch;
    let canonical = cfg.canonical(env, arch, cfg.seed);
    let prov = Provenance::new(digest_hex(&canonical), vec![cfg.seed]);
    let mut sink = RunSink::new(&out, canonical, &prov, cfg.train.steps)?;
    let mut model = Model::new(cfg.model.radt_config(env, arch), dataset.return_scale, cfg.seed)?;
    let rows = train::train(&mut model, &dataset, &cfg.train, &mut sink)?;
    sink.metrics.flush()?;
    let summary = model.summary();
    let final_loss = rows.last().map(|r| r.loss);
    write(
        &out.join(SUMMARY_FILE),
        &prov.json(&TrainDoc {
            env,
            arch,
            steps: rows.len(),
            final_loss,
            model: &summary,
        })?,
    )?;
    println!(
        "trained {} ({} parameters) for {} steps on {env}; final loss {}",
        arch.name(),
        model.parameter_count(),
        rows.len(),
        final_loss.map_or("n/a".into(), |l| format!("{l:.6}"))
    );
    Ok(())
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    env: EnvId,
    variant: &'a str,
    episodes: usize,
    grid: &'a TargetGrid,
    per_target: &'a [TargetSummary],
    per_seed: &'a [SeedSummary],
    grand_mean: f64,
    top_target_final_rtg: f64,
}

fn top_final_rtg(report: &AlignmentReport, episodes: &[eval::EpisodeRecord]) -> f64 {
    let top = *report.grid.targets.last().expect("grid is nonempty");
    radt_core::experiment::final_rtg_magnitude(episodes, top)
}

/// Loads a checkpoint and, if `config` is given, checks that it was trained
/// with exactly that configuration.
fn load_model(checkpoint: &Path, config: Option<&Path>, default_seed: u64) -> Result<(Checkpoint, EnvId, Arch, Model)> {
    let ck = load_checkpoint(checkpoint)?;
    let (env, arch, rc) = model_from_canonical(&ck.config_text)?;
    if let Some(path) = config {
        let cfg = RunConfig::load(path, default_seed)?;
        let expected = cfg.canonical(cfg.env(), cfg.model.arch, cfg.seed);
        let (want, have) = (digest_hex(&expected), digest_hex(&ck.config_text));
        if want != have {
            return Err(Error::Integrity(format!(
                "checkpoint config digest {have} does not match {} ({want})",
                path.display()
            )));
        }
    }
    let model = Model::from_checkpoint(rc, &ck)?;
    Ok((ck, env, arch, model))
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn default_out(checkpoint: &Path, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf))
}

pub fn eval_cmd(args: EvalArgs, default_seed: u64) -> Result<()> {
    let (ck, env, arch, model) = load_model(&args.checkpoint, args.config.as_deref(), default_seed)?;
    let dataset = load_dataset(&args.dataset)?;
    check_env(&dataset, env)?;
    let grid = build_target_grid(&dataset)?;
    let (report, episodes) = alignment_eval(&model, arch.name(), &dataset.spec(), &grid, args.episodes, &args.seeds)?;
    let out = default_out(&args.checkpoint, args.out);
    create_dir(&out)?;
    let prov = Provenance::new(digest_hex(&ck.config_text), args.seeds.clone());
    write(&out.join(ALIGNMENT_FILE), &prov.csv(&report.csv()))?;
    write(
        &out.join(SUMMARY_FILE),
        &prov.json(&ReportDoc {
            env,
            variant: arch.name(),
            episodes: args.episodes,
            grid: &grid,
            per_target: &report.per_target,
            per_seed: &report.per_seed,
            grand_mean: report.grand_mean,
            top_target_final_rtg: top_final_rtg(&report, &episodes),
        })?,
    )?;
    let trace = eval::rtg_trace(&episodes);
    write(
        &out.join(TRACES_FILE),
        &prov.svg(&eval::trace_chart(&trace, &format!("{} return-to-go on {env}", arch.name()))),
    )?;
    write(
        &out.join(ERRORS_FILE),
        &prov.svg(&eval::error_chart(&[&report], &format!("alignment error on {env}"))),
    )?;
    println!("{} on {env}: grand-mean normalized error {:.4}", arch.name(), report.grand_mean);
    for t in &report.per_target {
        println!("  target {:>10.4}  error {:.4} ± {:.4}", t.target, t.mean, t.stderr);
    }
    Ok(())
}

pub struct AblateArgs {
    pub config: PathBuf,
    pub variants: Option<Vec<Arch>>,
    pub seeds: Option<Vec<u64>>,
    pub jobs: usize,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct VariantReport {
    env: EnvId,
    variant: Arch,
    per_target: Vec<TargetSummary>,
    per_seed: Vec<SeedSummary>,
    grand_mean: f64,
}

#[derive(Serialize)]
struct AblationDoc<'a> {
    seeds: &'a [u64],
    table: &'a AblationTable,
    reports: Vec<VariantReport>,
}

fn run_dir(out: &Path, key: &RunKey) -> PathBuf {
    out.join(key.env.as_str()).join(key.arch.name()).join(format!("seed-{}", key.seed))
}

pub fn ablate_cmd(args: AblateArgs, default_seed: u64) -> Result<Outcome> {
    let raw = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let cfg = RunConfig::load(&args.config, default_seed)?;
    let variants = args.variants.unwrap_or_else(|| DEFAULT_VARIANTS.to_vec());
    let seeds = args.seeds.unwrap_or_else(|| cfg.eval.seeds.clone());
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("ablate needs at least one variant and one seed".into()));
    }
    let out = args.out.unwrap_or_else(|| cfg.out.clone());
    let names: Vec<&str> = variants.iter().map(|a| a.name()).collect();
    let seed_list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let prov = Provenance::new(
        digest_hex(&format!("{raw}\n# variants = {}\n# seeds = {}\n", names.join(","), seed_list.join(","))),
        seeds.clone(),
    );

    let mut datasets = Vec::new();
    let mut grids = Vec::new();
    for &env in &cfg.envs {
        let ds = obtain_dataset(&cfg, env, &out.join(env.as_str()))?;
        grids.push(build_target_grid(&ds)?);
        datasets.push(ds);
    }
    let mut keys = Vec::new();
    for &env in &cfg.envs {
        for &arch in &variants {
            keys.extend(seeds.iter().map(|&seed| RunKey { env, arch, seed }));
        }
    }

    let results: Vec<RunResult> = par_map(args.jobs, &keys, |key| {
        let e = cfg.envs.iter().position(|&x| x == key.env).expect("key env is configured");
        let run = || -> Result<_> {
            let dir = run_dir(&out, key);
            let canonical = cfg.canonical(key.env, key.arch, key.seed);
            let run_prov = Provenance::new(digest_hex(&canonical), vec![key.seed]);
            let mut sink = RunSink::new(&dir, canonical, &run_prov, cfg.train.steps)?;
            let r = train_and_evaluate(&cfg, &datasets[e], &grids[e], *key, &mut sink)?;
            sink.metrics.flush()?;
            let report = AlignmentReport::from_rows(key.arch.name(), grids[e].clone(), r.rows.clone());
            write(&dir.join(ALIGNMENT_FILE), &run_prov.csv(&report.csv()))?;
            eprintln!("{}: grand-mean error {:.4}", key.label(), report.grand_mean);
            Ok((r.rows, r.episodes))
        };
        let res = run().map_err(|e| {
            eprintln!("{}: failed: {e}", key.label());
            e.to_string()
        });
        (*key, res)
    });

    let table = AblationTable::build(&cfg.envs, &variants, &grids, &results);
    let mut reports = Vec::new();
    for (e, &env) in cfg.envs.iter().enumerate() {
        let mut all_rows = Vec::new();
        let mut env_reports = Vec::new();
        let mut top_traces: Vec<Series> = Vec::new();
        let top = *grids[e].targets.last().expect("grid is nonempty");
        for &arch in &variants {
            let ok: Vec<&(Vec<_>, Vec<_>)> = results
                .iter()
                .filter(|(k, _)| k.env == env && k.arch == arch)
                .filter_map(|(_, r)| r.as_ref().ok())
                .collect();
            if ok.is_empty() {
                continue;
            }
            let rows: Vec<_> = ok.iter().flat_map(|(r, _)| r.iter().cloned()).collect();
            let episodes: Vec<_> = ok.iter().flat_map(|(_, ep)| ep.iter().filter(|x| x.target_return == top).cloned()).collect();
            all_rows.extend(rows.iter().cloned());
            let trace: Vec<TracePoint> = eval::rtg_trace(&episodes);
            top_traces.push(Series {
                name: arch.name().to_string(),
                points: trace.iter().map(|p| (p.step as f64, p.mean)).collect(),
            });
            env_reports.push(AlignmentReport::from_rows(arch.name(), grids[e].clone(), rows));
        }
        let dir = out.join(env.as_str());
        create_dir(&dir)?;
        let mut csv = format!("{}\n", eval::ALIGNMENT_HEADER);
        for r in &all_rows {
            csv.push_str(&r.csv());
            csv.push('\n');
        }
        write(&dir.join(ALIGNMENT_FILE), &prov.csv(&csv))?;
        let refs: Vec<&AlignmentReport> = env_reports.iter().collect();
        write(
            &dir.join(ERRORS_FILE),
            &prov.svg(&eval::error_chart(&refs, &format!("alignment error on {env}"))),
        )?;
        write(
            &dir.join(TRACES_FILE),
            &prov.svg(&eval::svg_line_chart(
                &format!("return-to-go at target {top:.2} on {env}"),
                "step",
                "return-to-go",
                &top_traces,
            )),
        )?;
        reports.extend(env_reports.into_iter().zip(variants.iter().filter(|&&a| table.cell(a, env).is_some())).map(
            |(r, &arch)| VariantReport {
                env,
                variant: arch,
                per_target: r.per_target,
                per_seed: r.per_seed,
                grand_mean: r.grand_mean,
            },
        ));
    }
    create_dir(&out)?;
    write(&out.join(ABLATION_FILE), &prov.csv(&table.csv()))?;
    write(
        &out.join(SUMMARY_FILE),
        &prov.json(&AblationDoc {
            seeds: &seeds,
            table: &table,
            reports,
        })?,
    )?;
    print!("DT-normalized alignment error\n{}", table.csv());
    if table.is_partial() {
        for f in &table.failures {
            eprintln!("failed run {f}");
        }
        return Ok(Outcome::Partial);
    }
    Ok(Outcome::Ok)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ProbeMode {
    Attention,
    RtgTrace,
}

pub struct ProbeArgs {
    pub checkpoint: PathBuf,
    pub mode: ProbeMode,
    pub dataset: PathBuf,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
}

pub fn probe_cmd(args: ProbeArgs, default_seed: u64) -> Result<()> {
    let (ck, env, arch, model) = load_model(&args.checkpoint, None, default_seed)?;
    let dataset = load_dataset(&args.dataset)?;
    check_env(&dataset, env)?;
    let grid = build_target_grid(&dataset)?;
    let (_, episodes) = alignment_eval(&model, arch.name(), &dataset.spec(), &grid, args.episodes, &args.seeds)?;
    let out = default_out(&args.checkpoint, args.out);
    create_dir(&out)?;
    let prov = Provenance::new(digest_hex(&ck.config_text), args.seeds.clone());
    match args.mode {
        ProbeMode::Attention => {
            let masses = eval::attention_probe(&model, &episodes)?;
            write(&out.join("attention.csv"), &prov.csv(&eval::attention_csv(&masses)))?;
            let mut series: Vec<Series> = ["return", "state", "action"]
                .iter()
                .map(|n| Series {
                    name: n.to_string(),
                    points: Vec::new(),
                })
                .collect();
            for &target in &grid.targets {
                let at: Vec<_> = masses.iter().filter(|m| m.target == target).collect();
                let x = grid.normalize(target);
                let avg = |f: fn(&eval::AttentionMass) -> f64| at.iter().map(|m| f(m)).sum::<f64>() / at.len() as f64;
                series[0].points.push((x, avg(|m| m.return_mass)));
                series[1].points.push((x, avg(|m| m.state_mass)));
                series[2].points.push((x, avg(|m| m.action_mass)));
            }
            write(
                &out.join("attention.svg"),
                &prov.svg(&eval::svg_line_chart(
                    &format!("{} first-layer attention mass on {env}", arch.name()),
                    "normalized target return",
                    "attention mass",
                    &series,
                )),
            )?;
            let n = masses.len() as f64;
            println!(
                "{} attention mass over {} episodes: return {:.4}, state {:.4}, action {:.4}",
                arch.name(),
                masses.len(),
                masses.iter().map(|m| m.return_mass).sum::<f64>() / n,
                masses.iter().map(|m| m.state_mass).sum::<f64>() / n,
                masses.iter().map(|m| m.action_mass).sum::<f64>() / n
            );
        }
        ProbeMode::RtgTrace => {
            let trace = eval::rtg_trace(&episodes);
            write(&out.join("rtg_trace.csv"), &prov.csv(&eval::trace_csv(&trace)))?;
            write(
                &out.join(TRACES_FILE),
                &prov.svg(&eval::trace_chart(&trace, &format!("{} return-to-go on {env}", arch.name()))),
            )?;
            for p in trace.iter().filter(|p| p.step == dataset.spec().horizon) {
                println!("target {:>10.4}: final rtg {:.4} ± {:.4}", p.target, p.mean, p.stderr);
            }
        }
    }
    Ok(())
}
