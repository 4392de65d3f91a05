//! INI-style run configuration: `[section]` headers, `key = value` lines and
//! `#` or `;` comments. No nesting, no quoting.
//!
//! ```text
//! [run]
//! env = linewalk          # or a comma list for ablations
//! dataset = dataset.jsonl # optional; relative to the config file
//! out = runs/linewalk
//! seed = 0
//! n_traj = 200            # used when a dataset must be generated
//!
//! [model]
//! arch = full             # full | no-seqra | no-stepra | no-adascale | no-stepra-adascale | dt
//! n_layers = 2
//! n_heads = 1
//! d_model = 64
//! context_length = 10
//! dropout = 0.1
//! max_timesteps = 40      # defaults to the environment horizon
//!
//! [train]
//! steps = 10000
//! batch_size = 64
//! base_lr = 0.0001
//! warmup_steps = 500
//! weight_decay = 0.0001
//! grad_clip = 0.25
//! eval_every = 0
//! cosine = false
//! last_only = false
//!
//! [eval]
//! episodes = 100
//! seeds = 0,1,2
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::envs::{EnvId, EnvSpec};
use crate::error::{Error, Result};
use crate::model::{Arch, RadtConfig, Variant};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    /// Parses `key` if present; errors name the line and the field.
    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|e| {
                e.value.parse::<T>().map_err(|err| {
                    Error::Config(format!(
                        "line {}: field {}.{}: cannot parse '{}': {err}",
                        e.line, self.name, key, e.value
                    ))
                })
            })
            .transpose()
    }

    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        match self.entries.iter().find(|e| !known.contains(&e.key.as_str())) {
            Some(e) => Err(Error::Config(format!(
                "line {}: unknown field {}.{} (known: {})",
                e.line,
                self.name,
                e.key,
                known.join(", ")
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ini {
    pub sections: Vec<Section>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: Vec<Section> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split(['#', ';']).next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {line}: unterminated section header")))?
                    .trim();
                if name.is_empty() || sections.iter().any(|s| s.name == name) {
                    return Err(Error::Config(format!("line {line}: empty or duplicate section [{name}]")));
                }
                sections.push(Section {
                    name: name.to_string(),
                    line,
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected 'key = value', got '{content}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let section = sections
                .last_mut()
                .ok_or_else(|| Error::Config(format!("line {line}: field '{key}' appears before any section")))?;
            if key.is_empty() || section.get(key).is_some() {
                return Err(Error::Config(format!(
                    "line {line}: empty or duplicate field '{key}' in [{}]",
                    section.name
                )));
            }
            section.entries.push(Entry {
                key: key.to_string(),
                value: value.to_string(),
                line,
            });
        }
        Ok(Self { sections })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }
}

/// Parses `true`/`false` (also `yes`/`no`, `1`/`0`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Flag(pub bool);

impl FromStr for Flag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "yes" | "1" => Ok(Flag(true)),
            "false" | "no" | "0" => Ok(Flag(false)),
            _ => Err("expected true or false".into()),
        }
    }
}

/// Comma-separated list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|e| format!("'{}': {e}", p.trim())))
            .collect::<std::result::Result<Vec<T>, String>>()
            .and_then(|v| if v.is_empty() { Err("empty list".into()) } else { Ok(List(v)) })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::parse(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub episodes: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            episodes: 100,
            seeds: vec![0, 1, 2],
        }
    }
}

/// Model hyperparameters independent of the environment.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub arch: Arch,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub context_length: usize,
    pub dropout: f64,
    pub max_timesteps: Option<usize>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            arch: Arch::Full,
            n_layers: 2,
            n_heads: 1,
            d_model: 64,
            context_length: 10,
            dropout: 0.1,
            max_timesteps: None,
        }
    }
}

impl ModelSettings {
    /// Full model configuration for `env` with `arch` applied.
    pub fn radt_config(&self, env: EnvId, arch: Arch) -> RadtConfig {
        let spec = EnvSpec::new(env);
        let mut c = RadtConfig::for_env(&spec, Variant::Radt);
        c.n_layers = self.n_layers;
        c.n_heads = self.n_heads;
        c.d_model = self.d_model;
        c.context_length = self.context_length;
        c.dropout = self.dropout;
        c.max_timesteps = self.max_timesteps.unwrap_or(spec.horizon);
        arch.configure(&c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub envs: Vec<EnvId>,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub n_traj: usize,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

const RUN_KEYS: &[&str] = &["env", "dataset", "out", "seed", "n_traj"];
const MODEL_KEYS: &[&str] = &[
    "arch",
    "n_layers",
    "n_heads",
    "d_model",
    "context_length",
    "dropout",
    "max_timesteps",
];
const TRAIN_KEYS: &[&str] = &[
    "steps",
    "batch_size",
    "base_lr",
    "warmup_steps",
    "weight_decay",
    "grad_clip",
    "eval_every",
    "cosine",
    "last_only",
];
const EVAL_KEYS: &[&str] = &["episodes", "seeds"];

impl RunConfig {
    /// Parses a config; relative paths are resolved against `base_dir`, and
    /// `default_seed` applies when `[run] seed` is absent.
    pub fn parse(text: &str, base_dir: &Path, default_seed: u64) -> Result<Self> {
        let ini = Ini::parse(text)?;
        for s in &ini.sections {
            let known = match s.name.as_str() {
                "run" => RUN_KEYS,
                "model" => MODEL_KEYS,
                "train" => TRAIN_KEYS,
                "eval" => EVAL_KEYS,
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{other}] (known: run, model, train, eval)",
                        s.line
                    )))
                }
            };
            s.check_keys(known)?;
        }
        let empty = Section {
            name: String::new(),
            line: 0,
            entries: Vec::new(),
        };
        let run = ini.section("run").ok_or_else(|| Error::Config("missing [run] section".into()))?;
        let envs: List<EnvId> = run
            .parse("env")?
            .ok_or_else(|| Error::Config(format!("line {}: [run] needs an env field", run.line)))?;
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base_dir.join(p) };
        let dataset = run.parse::<PathBuf>("dataset")?.map(resolve);
        let out = resolve(run.parse::<PathBuf>("out")?.unwrap_or_else(|| PathBuf::from("out")));

        let m = ini.section("model").unwrap_or(&empty);
        let d = ModelSettings::default();
        let model = ModelSettings {
            arch: m.parse("arch")?.unwrap_or(d.arch),
            n_layers: m.parse("n_layers")?.unwrap_or(d.n_layers),
            n_heads: m.parse("n_heads")?.unwrap_or(d.n_heads),
            d_model: m.parse("d_model")?.unwrap_or(d.d_model),
            context_length: m.parse("context_length")?.unwrap_or(d.context_length),
            dropout: m.parse("dropout")?.unwrap_or(d.dropout),
            max_timesteps: m.parse("max_timesteps")?,
        };

        let t = ini.section("train").unwrap_or(&empty);
        let d = TrainConfig::default();
        let seed = run.parse("seed")?.unwrap_or(default_seed);
        let train = TrainConfig {
            steps: t.parse("steps")?.unwrap_or(d.steps),
            batch_size: t.parse("batch_size")?.unwrap_or(d.batch_size),
            base_lr: t.parse("base_lr")?.unwrap_or(d.base_lr),
            warmup_steps: t.parse("warmup_steps")?.unwrap_or(d.warmup_steps),
            weight_decay: t.parse("weight_decay")?.unwrap_or(d.weight_decay),
            grad_clip: t.parse("grad_clip")?.unwrap_or(d.grad_clip),
            seed,
            eval_every: t.parse("eval_every")?.unwrap_or(d.eval_every),
            cosine: t.parse::<Flag>("cosine")?.map_or(d.cosine, |f| f.0),
            last_only: t.parse::<Flag>("last_only")?.map_or(d.last_only, |f| f.0),
        };
        train.validate().map_err(|e| Error::Config(format!("[train]: {e}")))?;

        let e = ini.section("eval").unwrap_or(&empty);
        let d = EvalSettings::default();
        let eval = EvalSettings {
            episodes: e.parse("episodes")?.unwrap_or(d.episodes),
            seeds: e.parse::<List<u64>>("seeds")?.map_or(d.seeds, |l| l.0),
        };
        let cfg = Self {
            envs: envs.0,
            dataset,
            out,
            seed,
            n_traj: run.parse("n_traj")?.unwrap_or(200),
            model,
            train,
            eval,
        };
        for &env in &cfg.envs {
            cfg.model
                .radt_config(env, cfg.model.arch)
                .validate()
                .map_err(|e| Error::Config(format!("[model]: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, default_seed: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, default_seed)
    }

    pub fn env(&self) -> EnvId {
        self.envs[0]
    }

    /// Canonical text of every setting that determines a trained model;
    /// checkpoints store it and its digest.
    pub fn canonical(&self, env: EnvId, arch: Arch, seed: u64) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mt = m.max_timesteps.unwrap_or(EnvSpec::new(env).horizon);
        writeln!(s, "[run]\nenv = {env}\nseed = {seed}\nn_traj = {}\n", self.n_traj).expect("string write");
        writeln!(
            s,
            "[model]\narch = {}\nn_layers = {}\nn_heads = {}\nd_model = {}\ncontext_length = {}\ndropout = {}\nmax_timesteps = {mt}\n",
            arch.name(),
            m.n_layers,
            m.n_heads,
            m.d_model,
            m.context_length,
            m.dropout
        )
        .expect("string write");
        writeln!(
            s,
            "[train]\nsteps = {}\nbatch_size = {}\nbase_lr = {}\nwarmup_steps = {}\nweight_decay = {}\ngrad_clip = {}\neval_every = {}\ncosine = {}\nlast_only = {}",
            t.steps, t.batch_size, t.base_lr, t.warmup_steps, t.weight_decay, t.grad_clip, t.eval_every, t.cosine, t.last_only
        )
        .expect("string write");
        s
    }
}

/// Model configuration recorded in a checkpoint's canonical config text.
pub fn model_from_canonical(text: &str) -> Result<(EnvId, Arch, RadtConfig)> {
    let cfg = RunConfig::parse(text, Path::new("."), 0)?;
    let env = cfg.env();
    Ok((env, cfg.model.arch, cfg.model.radt_config(env, cfg.model.arch)))
}
