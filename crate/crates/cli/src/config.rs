use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mutualseg::data::ModalityStyle;
use mutualseg::eval::Aggregation;
use mutualseg::trainer::{TrainingConfig, TrainingMode};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Eval,
    Ablate,
    Sweep,
    Report,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Sweep => "sweep",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Phantom corpus layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomOptions {
    pub image_size: usize,
    pub num_classes: usize,
    pub geometry_seed: u64,
    pub target_style: ModalityStyle,
    pub n_target: usize,
    pub n_assistant: usize,
    pub n_test: usize,
    pub n_val: usize,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 4,
            geometry_seed: 7,
            target_style: ModalityStyle::B,
            n_target: 40,
            n_assistant: 40,
            n_test: 20,
            n_val: 0,
        }
    }
}

/// Everything one invocation needs, with defaults resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub data_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub training: TrainingConfig,
    pub phantom: PhantomOptions,
    pub seeds: Vec<u64>,
    pub precision: Precision,
    pub aggregation: Aggregation,
    pub sweep_counts: Vec<usize>,
    pub ablation_variants: Vec<TrainingMode>,
    pub checkpoint_every: u64,
    pub max_iterations: Option<u64>,
}

const RUN_KEYS: [&str; 19] = [
    "data_root",
    "out_dir",
    "checkpoint",
    "image_size",
    "num_classes",
    "geometry_seed",
    "target_style",
    "n_target",
    "n_assistant",
    "n_test",
    "n_val",
    "seeds",
    "precision",
    "aggregation",
    "sweep_counts",
    "ablation_variants",
    "checkpoint_every",
    "max_iterations",
    "config_version",
];

fn usage(key: &str, what: &str, value: &str) -> CliError {
    CliError::Usage(format!("`{key}`: expected {what}, got `{value}`"))
}

fn list<V>(key: &str, value: &str, f: impl Fn(&str) -> Option<V>) -> Result<Vec<V>, CliError> {
    let out = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(s).ok_or_else(|| usage(key, "a comma-separated list", value)))
        .collect::<Result<Vec<_>, _>>()?;
    if out.is_empty() {
        return Err(usage(key, "a non-empty list", value));
    }
    Ok(out)
}

impl RunConfig {
    pub fn defaults(command: Command) -> Self {
        Self {
            command,
            data_root: None,
            out_dir: PathBuf::from("runs").join(command.as_str()),
            checkpoint: None,
            training: TrainingConfig::default(),
            phantom: PhantomOptions::default(),
            seeds: vec![0, 1, 2],
            precision: Precision::F32,
            aggregation: Aggregation::Micro,
            sweep_counts: vec![10, 20, 40],
            ablation_variants: vec![
                TrainingMode::Mkd,
                TrainingMode::NoIam,
                TrainingMode::KdS2rOnly,
                TrainingMode::KdR2sOnly,
            ],
            checkpoint_every: 1,
            max_iterations: None,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        let int = |what| v.parse::<u64>().map_err(|_| usage(key, what, value));
        let size = |what| v.parse::<usize>().map_err(|_| usage(key, what, value));
        let path = || (!v.is_empty()).then(|| PathBuf::from(v));
        let p = &mut self.phantom;
        match key {
            "data_root" => self.data_root = path(),
            "out_dir" => self.out_dir = path().ok_or_else(|| usage(key, "a path", value))?,
            "checkpoint" => self.checkpoint = path(),
            "image_size" => p.image_size = size("an integer")?,
            "num_classes" => p.num_classes = size("an integer")?,
            "geometry_seed" => p.geometry_seed = int("an integer")?,
            "target_style" => {
                p.target_style = ModalityStyle::parse(v).ok_or_else(|| usage(key, "A or B", value))?
            }
            "n_target" => p.n_target = size("an integer")?,
            "n_assistant" => p.n_assistant = size("an integer")?,
            "n_test" => p.n_test = size("an integer")?,
            "n_val" => p.n_val = size("an integer")?,
            "seeds" => self.seeds = list(key, v, |s| s.parse().ok())?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(usage(key, "f32 or f64", value)),
                }
            }
            "aggregation" => {
                self.aggregation = Aggregation::parse(v).ok_or_else(|| usage(key, "micro or macro", value))?
            }
            "sweep_counts" => self.sweep_counts = list(key, v, |s| s.parse().ok())?,
            "ablation_variants" => self.ablation_variants = list(key, v, TrainingMode::parse)?,
            "checkpoint_every" => self.checkpoint_every = int("an integer")?,
            "max_iterations" => {
                self.max_iterations = match v {
                    "" | "none" => None,
                    _ => Some(int("an integer or none")?),
                }
            }
            "config_version" => {
                if v != "1" {
                    return Err(usage(key, "1", value));
                }
            }
            _ if TrainingConfig::KEYS.contains(&key) => {
                self.training.set(key, v).map_err(|e| CliError::Usage(e.to_string()))?
            }
            _ => return Err(CliError::Usage(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let join = |v: Vec<String>| v.join(",");
        let p = &self.phantom;
        match key {
            "data_root" => opt(&self.data_root),
            "out_dir" => self.out_dir.display().to_string(),
            "checkpoint" => opt(&self.checkpoint),
            "image_size" => p.image_size.to_string(),
            "num_classes" => p.num_classes.to_string(),
            "geometry_seed" => p.geometry_seed.to_string(),
            "target_style" => format!("{:?}", p.target_style),
            "n_target" => p.n_target.to_string(),
            "n_assistant" => p.n_assistant.to_string(),
            "n_test" => p.n_test.to_string(),
            "n_val" => p.n_val.to_string(),
            "seeds" => join(self.seeds.iter().map(u64::to_string).collect()),
            "precision" => match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
            "aggregation" => self.aggregation.as_str().into(),
            "sweep_counts" => join(self.sweep_counts.iter().map(usize::to_string).collect()),
            "ablation_variants" => join(self.ablation_variants.iter().map(|m| m.as_str().to_string()).collect()),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "max_iterations" => self.max_iterations.map_or("none".into(), |m| m.to_string()),
            "config_version" => "1".into(),
            _ => self.training.get(key).unwrap_or_default(),
        }
    }

    /// Every key with its resolved value, in a form [`parse_config`] accepts.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for key in RUN_KEYS.iter().chain(TrainingConfig::KEYS.iter()) {
            let _ = writeln!(s, "{key}={}", self.get(key));
        }
        s
    }

    fn validate(&self) -> Result<(), CliError> {
        self.training.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let need = |key: &str, p: &Option<PathBuf>| -> Result<PathBuf, CliError> {
            p.clone()
                .ok_or_else(|| CliError::Usage(format!("`{key}` is required for `{}`", self.command.as_str())))
        };
        let exists = |key: &str, p: &Path| -> Result<(), CliError> {
            if p.exists() {
                Ok(())
            } else {
                Err(CliError::Usage(format!("`{key}` path {} does not exist", p.display())))
            }
        };
        match self.command {
            Command::Synth => {
                need("data_root", &self.data_root)?;
            }
            Command::Train => exists("data_root", &need("data_root", &self.data_root)?)?,
            Command::Eval => {
                exists("checkpoint", &need("checkpoint", &self.checkpoint)?)?;
                exists("data_root", &need("data_root", &self.data_root)?)?;
            }
            Command::Ablate | Command::Sweep => {
                if let Some(root) = &self.data_root {
                    exists("data_root", root)?;
                }
            }
            Command::Report => exists("out_dir", &self.out_dir)?,
        }
        if let Some(c) = &self.checkpoint {
            if self.command == Command::Train {
                exists("checkpoint", c)?;
            }
        }
        if self.command == Command::Sweep {
            if let Some(&c) = self.sweep_counts.iter().find(|&&c| c == 0 || c > self.phantom.n_assistant) {
                return Err(CliError::Usage(format!(
                    "`sweep_counts`: {c} outside 1..={} (n_assistant)",
                    self.phantom.n_assistant
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(CliError::Usage("`seeds` must not be empty".into()));
        }
        Ok(())
    }
}

/// Builds a [`RunConfig`] from optional `key=value` file text followed by
/// overrides (later entries win). Blank lines and `#` comments are ignored.
pub fn parse_config(
    command: Command,
    file_text: Option<&str>,
    overrides: &[(String, String)],
) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::defaults(command);
    if let Some(text) = file_text {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Splits `key=value`.
pub fn split_override(s: &str) -> Result<(String, String), CliError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got `{s}`")))
}
