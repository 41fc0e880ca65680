use log::info;

use super::{evaluate_trainer, Aggregation, DiceReport, ModelTag};
use crate::data::{synthesize_dataset, Dataset, Modality, ModalityStyle, PhantomSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trainer::{run_training, Trainer, TrainingConfig, TrainingMode};

/// Target training/test sets and the assistant training set.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub target_train: Dataset,
    pub target_test: Dataset,
    pub assistant: Dataset,
}

const ASSISTANT_SEED_OFFSET: u64 = 1 << 20;
const TEST_SEED_OFFSET: u64 = 2 << 20;

impl ExperimentData {
    /// Unpaired phantom sets sharing one anatomy distribution. The
    /// assistant set uses the opposite style to the target set; all three
    /// sets use disjoint sample seeds.
    #[allow(clippy::too_many_arguments)]
    pub fn phantom(
        image_size: usize,
        num_classes: usize,
        n_target: usize,
        n_assistant: usize,
        n_test: usize,
        target_style: ModalityStyle,
        geometry_seed: u64,
        data_seed: u64,
    ) -> Result<Self> {
        let t = PhantomSpec::for_style(target_style, image_size, num_classes, geometry_seed);
        let a = PhantomSpec::for_style(target_style.other(), image_size, num_classes, geometry_seed);
        let base = data_seed.wrapping_mul(3 << 20);
        Ok(Self {
            target_train: synthesize_dataset(&t, Modality::Target, n_target, base)?,
            target_test: synthesize_dataset(&t, Modality::Target, n_test, base + TEST_SEED_OFFSET)?,
            assistant: synthesize_dataset(&a, Modality::Assistant, n_assistant, base + ASSISTANT_SEED_OFFSET)?,
        })
    }

    pub fn from_datasets(target_train: Dataset, target_test: Dataset, assistant: Dataset) -> Result<Self> {
        if target_train.num_classes() != target_test.num_classes()
            || target_train.num_classes() != assistant.num_classes()
        {
            return Err(Error::Config("datasets disagree on class count".into()));
        }
        Ok(Self {
            target_train,
            target_test,
            assistant,
        })
    }
}

fn evaluate_tags<T: Scalar>(
    t: &Trainer<T>,
    data: &ExperimentData,
    tags: &[ModelTag],
    agg: Aggregation,
) -> Result<Vec<DiceReport>> {
    tags.iter()
        .map(|&tag| evaluate_trainer(t, tag, &data.target_test, agg))
        .collect()
}

/// `S_syn`, `S_real` and ensemble reports for one mutual-mode variant.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: TrainingMode,
    pub config: TrainingConfig,
    pub syn: DiceReport,
    pub real: DiceReport,
    pub ensemble: DiceReport,
}

impl AblationRow {
    pub fn reports(&self) -> [&DiceReport; 3] {
        [&self.syn, &self.real, &self.ensemble]
    }
}

/// Trains every variant (one of `mkd`, `no_iam`, `kd_s2r_only`,
/// `kd_r2s_only`) on the same data and seed.
pub fn run_ablation<T: Scalar>(
    variants: &[TrainingMode],
    data: &ExperimentData,
    cfg: &TrainingConfig,
    aggregation: Aggregation,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&mode| {
            if !mode.is_mutual() {
                return Err(Error::Config(format!("{} is not an ablation variant", mode.as_str())));
            }
            let cfg = TrainingConfig { mode, ..cfg.clone() };
            info!("ablation: training {} (seed {})", mode.as_str(), cfg.seed);
            let (t, _) = run_training::<T>(&data.target_train, &data.assistant, &cfg)?;
            let r = evaluate_tags(&t, data, &[ModelTag::Syn, ModelTag::Real, ModelTag::Ensemble], aggregation)?;
            let [syn, real, ensemble]: [DiceReport; 3] = r.try_into().expect("three tags");
            Ok(AblationRow {
                mode,
                config: cfg,
                syn,
                real,
                ensemble,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub count: usize,
    pub syn: DiceReport,
    pub real: DiceReport,
    pub ensemble: DiceReport,
}

/// One full mutual training per assistant count, using the first `count`
/// assistant samples and the same target data.
pub fn run_assistant_sweep<T: Scalar>(
    counts: &[usize],
    data: &ExperimentData,
    cfg: &TrainingConfig,
    aggregation: Aggregation,
) -> Result<Vec<SweepRow>> {
    if let Some(&c) = counts.iter().find(|&&c| c == 0 || c > data.assistant.len()) {
        return Err(Error::Config(format!(
            "assistant count {c} outside 1..={}",
            data.assistant.len()
        )));
    }
    let cfg = TrainingConfig {
        mode: TrainingMode::Mkd,
        ..cfg.clone()
    };
    counts
        .iter()
        .map(|&count| {
            let assistant = data.assistant.take(count)?;
            info!("sweep: training with {count} assistant samples");
            let (t, _) = run_training::<T>(&data.target_train, &assistant, &cfg)?;
            let r = evaluate_tags(&t, data, &[ModelTag::Syn, ModelTag::Real, ModelTag::Ensemble], aggregation)?;
            let [syn, real, ensemble]: [DiceReport; 3] = r.try_into().expect("three tags");
            Ok(SweepRow {
                count,
                syn,
                real,
                ensemble,
            })
        })
        .collect()
}

/// Baseline, fine-tune, joint-training and the three mutual-training
/// reports on the target test set.
pub fn run_comparison<T: Scalar>(
    data: &ExperimentData,
    cfg: &TrainingConfig,
    aggregation: Aggregation,
) -> Result<Vec<DiceReport>> {
    let mut out = Vec::new();
    for (mode, tag) in [
        (TrainingMode::Baseline, ModelTag::Baseline),
        (TrainingMode::FineTune, ModelTag::FineTune),
        (TrainingMode::JointTraining, ModelTag::Joint),
    ] {
        let c = TrainingConfig { mode, ..cfg.clone() };
        info!("comparison: training {}", mode.as_str());
        let (t, _) = run_training::<T>(&data.target_train, &data.assistant, &c)?;
        out.push(evaluate_trainer(&t, tag, &data.target_test, aggregation)?);
    }
    let c = TrainingConfig {
        mode: TrainingMode::Mkd,
        ..cfg.clone()
    };
    info!("comparison: training mkd");
    let (t, _) = run_training::<T>(&data.target_train, &data.assistant, &c)?;
    out.extend(evaluate_tags(&t, data, &[ModelTag::Syn, ModelTag::Real, ModelTag::Ensemble], aggregation)?);
    Ok(out)
}
