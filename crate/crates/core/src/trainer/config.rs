use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::GanVariant;
use crate::models::NetworkSpec;

/// Training schedule: the full method, its ablations, and the
/// single-segmentor comparison baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainingMode {
    /// Image alignment plus mutual distillation in both directions.
    Mkd,
    /// One segmentor trained on target data only.
    Baseline,
    /// One segmentor pretrained on assistant data, then trained on target.
    FineTune,
    /// One segmentor on target and assistant batches interleaved 1:1.
    JointTraining,
    /// No translation: raw assistant images feed the synthetic segmentor.
    NoIam,
    /// Only synthetic-to-real distillation (`lambda_kd2 = 0`).
    KdS2rOnly,
    /// Only real-to-synthetic distillation (`lambda_kd1 = 0`).
    KdR2sOnly,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 7] = [
        TrainingMode::Mkd,
        TrainingMode::Baseline,
        TrainingMode::FineTune,
        TrainingMode::JointTraining,
        TrainingMode::NoIam,
        TrainingMode::KdS2rOnly,
        TrainingMode::KdR2sOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainingMode::Mkd => "mkd",
            TrainingMode::Baseline => "baseline",
            TrainingMode::FineTune => "fine_tune",
            TrainingMode::JointTraining => "joint_training",
            TrainingMode::NoIam => "no_iam",
            TrainingMode::KdS2rOnly => "kd_s2r_only",
            TrainingMode::KdR2sOnly => "kd_r2s_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// Modes that train both segmentors with distillation.
    pub fn is_mutual(self) -> bool {
        matches!(
            self,
            TrainingMode::Mkd | TrainingMode::NoIam | TrainingMode::KdS2rOnly | TrainingMode::KdR2sOnly
        )
    }

    /// Modes that run the translation networks.
    pub fn uses_alignment(self) -> bool {
        matches!(self, TrainingMode::Mkd | TrainingMode::KdS2rOnly | TrainingMode::KdR2sOnly)
    }

    pub fn reads_assistant(self) -> bool {
        self != TrainingMode::Baseline
    }
}

/// Desk-scale network sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    pub gen_width: usize,
    pub gen_depth: usize,
    pub gen_res_blocks: usize,
    pub disc_width: usize,
    pub disc_depth: usize,
    pub seg_width: usize,
    pub seg_depth: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            gen_width: 4,
            gen_depth: 1,
            gen_res_blocks: 2,
            disc_width: 8,
            disc_depth: 3,
            seg_width: 4,
            seg_depth: 2,
        }
    }
}

impl ArchConfig {
    pub fn generator(&self) -> NetworkSpec {
        NetworkSpec::generator(self.gen_width, self.gen_depth, self.gen_res_blocks)
    }

    pub fn discriminator(&self) -> NetworkSpec {
        NetworkSpec::discriminator(self.disc_width, self.disc_depth)
    }

    pub fn segmentor(&self, num_classes: usize) -> NetworkSpec {
        NetworkSpec::segmentor(self.seg_width, self.seg_depth, num_classes)
    }
}

/// Hyperparameters and schedule knobs.
///
/// Defaults: `lambda_cyc = 10`, `lambda_kd1 = 0.5`, `lambda_kd2 = 1`,
/// Adam with `lr = 2e-4` for all six networks (`beta1 = 0.5` for the
/// translation networks, `0.9` for the segmentors), segmentor learning rate
/// multiplied by `0.9` every 2 epochs, batch size 1, replay buffers of 50
/// images.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub lambda_cyc: f64,
    pub lambda_kd1: f64,
    pub lambda_kd2: f64,
    /// Identity-mapping weight relative to `lambda_cyc`: each generator is
    /// also penalized by `lambda_cyc * lambda_identity * |G(y) - y|` on
    /// images already in its output modality. 0 disables.
    pub lambda_identity: f64,
    /// Weight of the synthetic supervised loss inside the
    /// assistant-to-target generator objective.
    pub sup_syn_weight: f64,
    pub lr: f64,
    pub segmentor_decay: f64,
    pub decay_every: u64,
    pub gan_beta1: f64,
    pub seg_beta1: f64,
    pub beta2: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub gan_variant: GanVariant,
    pub replay_buffer_size: usize,
    pub mode: TrainingMode,
    pub augment: bool,
    pub dice_include_background: bool,
    /// Stop when validation mean Dice has not improved for this many epochs.
    pub early_stop_patience: Option<u64>,
    pub arch: ArchConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            lambda_kd1: 0.5,
            lambda_kd2: 1.0,
            lambda_identity: 0.5,
            sup_syn_weight: 1.0,
            lr: 2e-4,
            segmentor_decay: 0.9,
            decay_every: 2,
            gan_beta1: 0.5,
            seg_beta1: 0.9,
            beta2: 0.999,
            epochs: 10,
            batch_size: 1,
            seed: 0,
            gan_variant: GanVariant::Vanilla,
            replay_buffer_size: 50,
            mode: TrainingMode::Mkd,
            augment: true,
            dice_include_background: true,
            early_stop_patience: None,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_kd1", self.lambda_kd1),
            ("lambda_kd2", self.lambda_kd2),
            ("lambda_identity", self.lambda_identity),
            ("sup_syn_weight", self.sup_syn_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.segmentor_decay > 0.0 && self.segmentor_decay <= 1.0) {
            return Err(Error::Config(format!(
                "segmentor_decay must lie in (0, 1], got {}",
                self.segmentor_decay
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be >= 1".into()));
        }
        for (name, v) in [("gan_beta1", self.gan_beta1), ("seg_beta1", self.seg_beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.arch.generator().validate()?;
        self.arch.discriminator().validate()?;
        self.arch.segmentor(2).validate()?;
        Ok(())
    }

    /// Distillation weights `(lambda_kd1, lambda_kd2)` in effect for the
    /// configured mode.
    pub fn effective_kd(&self) -> (f64, f64) {
        match self.mode {
            TrainingMode::KdS2rOnly => (self.lambda_kd1, 0.0),
            TrainingMode::KdR2sOnly => (0.0, self.lambda_kd2),
            m if m.is_mutual() => (self.lambda_kd1, self.lambda_kd2),
            _ => (0.0, 0.0),
        }
    }

    /// Canonical `key=value` lines; [`TrainingConfig::set`] accepts every key.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            let _ = writeln!(s, "{key}={}", self.get(key).expect("known key"));
        }
        s
    }

    pub const KEYS: [&'static str; 27] = [
        "lambda_cyc",
        "lambda_kd1",
        "lambda_kd2",
        "lambda_identity",
        "sup_syn_weight",
        "lr",
        "segmentor_decay",
        "decay_every",
        "gan_beta1",
        "seg_beta1",
        "beta2",
        "epochs",
        "batch_size",
        "seed",
        "gan_variant",
        "replay_buffer_size",
        "mode",
        "augment",
        "dice_include_background",
        "early_stop_patience",
        "gen_width",
        "gen_depth",
        "gen_res_blocks",
        "disc_width",
        "disc_depth",
        "seg_width",
        "seg_depth",
    ];

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "lambda_cyc" => self.lambda_cyc.to_string(),
            "lambda_kd1" => self.lambda_kd1.to_string(),
            "lambda_kd2" => self.lambda_kd2.to_string(),
            "lambda_identity" => self.lambda_identity.to_string(),
            "sup_syn_weight" => self.sup_syn_weight.to_string(),
            "lr" => self.lr.to_string(),
            "segmentor_decay" => self.segmentor_decay.to_string(),
            "decay_every" => self.decay_every.to_string(),
            "gan_beta1" => self.gan_beta1.to_string(),
            "seg_beta1" => self.seg_beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "gan_variant" => self.gan_variant.as_str().to_string(),
            "replay_buffer_size" => self.replay_buffer_size.to_string(),
            "mode" => self.mode.as_str().to_string(),
            "augment" => self.augment.to_string(),
            "dice_include_background" => self.dice_include_background.to_string(),
            "early_stop_patience" => self
                .early_stop_patience
                .map_or_else(|| "none".to_string(), |p| p.to_string()),
            "gen_width" => self.arch.gen_width.to_string(),
            "gen_depth" => self.arch.gen_depth.to_string(),
            "gen_res_blocks" => self.arch.gen_res_blocks.to_string(),
            "disc_width" => self.arch.disc_width.to_string(),
            "disc_depth" => self.arch.disc_depth.to_string(),
            "seg_width" => self.arch.seg_width.to_string(),
            "seg_depth" => self.arch.seg_depth.to_string(),
            _ => return None,
        })
    }

    /// Sets one key from text. Unknown keys and malformed values are
    /// reported with the key name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: expected {what}, got `{value}`")))
        }
        let f = |v: &str| num::<f64>(key, v, "a number");
        let u = |v: &str| num::<u64>(key, v, "a non-negative integer");
        let z = |v: &str| num::<usize>(key, v, "a non-negative integer");
        let b = |v: &str| num::<bool>(key, v, "true or false");
        match key {
            "lambda_cyc" => self.lambda_cyc = f(value)?,
            "lambda_kd1" => self.lambda_kd1 = f(value)?,
            "lambda_kd2" => self.lambda_kd2 = f(value)?,
            "lambda_identity" => self.lambda_identity = f(value)?,
            "sup_syn_weight" => self.sup_syn_weight = f(value)?,
            "lr" => self.lr = f(value)?,
            "segmentor_decay" => self.segmentor_decay = f(value)?,
            "decay_every" => self.decay_every = u(value)?,
            "gan_beta1" => self.gan_beta1 = f(value)?,
            "seg_beta1" => self.seg_beta1 = f(value)?,
            "beta2" => self.beta2 = f(value)?,
            "epochs" => self.epochs = u(value)?,
            "batch_size" => self.batch_size = z(value)?,
            "seed" => self.seed = u(value)?,
            "gan_variant" => {
                self.gan_variant = GanVariant::parse(value.trim()).ok_or_else(|| {
                    Error::Config(format!("`{key}`: expected vanilla or least_squares, got `{value}`"))
                })?
            }
            "replay_buffer_size" => self.replay_buffer_size = z(value)?,
            "mode" => {
                self.mode = TrainingMode::parse(value.trim())
                    .ok_or_else(|| Error::Config(format!("`{key}`: unknown mode `{value}`")))?
            }
            "augment" => self.augment = b(value)?,
            "dice_include_background" => self.dice_include_background = b(value)?,
            "early_stop_patience" => {
                self.early_stop_patience = match value.trim() {
                    "none" | "" => None,
                    v => Some(u(v)?),
                }
            }
            "gen_width" => self.arch.gen_width = z(value)?,
            "gen_depth" => self.arch.gen_depth = z(value)?,
            "gen_res_blocks" => self.arch.gen_res_blocks = z(value)?,
            "disc_width" => self.arch.disc_width = z(value)?,
            "disc_depth" => self.arch.disc_depth = z(value)?,
            "seg_width" => self.arch.seg_width = z(value)?,
            "seg_depth" => self.arch.seg_depth = z(value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_settings() {
        let c = TrainingConfig::default();
        assert_eq!((c.lambda_cyc, c.lambda_kd1, c.lambda_kd2), (10.0, 0.5, 1.0));
        assert_eq!(c.lr, 2e-4);
        assert_eq!(c.segmentor_decay, 0.9);
        assert_eq!(c.batch_size, 1);
        assert_eq!(c.replay_buffer_size, 50);
        c.validate().unwrap();
    }

    #[test]
    fn mode_reductions() {
        let mut c = TrainingConfig {
            mode: TrainingMode::KdR2sOnly,
            ..Default::default()
        };
        assert_eq!(c.effective_kd(), (0.0, 1.0));
        c.mode = TrainingMode::KdS2rOnly;
        assert_eq!(c.effective_kd(), (0.5, 0.0));
        c.mode = TrainingMode::Baseline;
        assert_eq!(c.effective_kd(), (0.0, 0.0));
        assert!(!c.mode.reads_assistant());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = TrainingConfig::default();
        c.set("mode", "no_iam").unwrap();
        c.set("lr", "0.001").unwrap();
        c.set("early_stop_patience", "3").unwrap();
        c.set("gan_variant", "least_squares").unwrap();
        let back = TrainingConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut c = TrainingConfig::default();
        let e = c.set("bogus", "1").unwrap_err().to_string();
        assert!(e.contains("bogus"));
        let e = c.set("epochs", "many").unwrap_err().to_string();
        assert!(e.contains("epochs"));
        c.lambda_kd1 = -1.0;
        assert!(c.validate().is_err());
        c.lambda_kd1 = 0.5;
        c.segmentor_decay = 0.0;
        assert!(c.validate().is_err());
    }
}
