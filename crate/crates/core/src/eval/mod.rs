//! Dice metrics, ensemble inference and the experiment harness.

mod experiment;
mod report;

pub use experiment::{
    run_ablation, run_assistant_sweep, run_comparison, AblationRow, ExperimentData, SweepRow,
};
pub use report::{read_reports_csv, write_reports_csv, write_summary};

use crate::data::{Dataset, LabelMap, LabeledSample};
use crate::error::{Error, Result};
use crate::models::{segment, NetworkHandle, ProbabilityMap};
use crate::nn::Tensor;
use crate::scalar::Scalar;
use crate::trainer::{NetId, Trainer};

/// Which model produced a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelTag {
    Syn,
    Real,
    Ensemble,
    Baseline,
    FineTune,
    Joint,
}

impl ModelTag {
    pub const ALL: [ModelTag; 6] = [
        ModelTag::Syn,
        ModelTag::Real,
        ModelTag::Ensemble,
        ModelTag::Baseline,
        ModelTag::FineTune,
        ModelTag::Joint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::Syn => "syn",
            ModelTag::Real => "real",
            ModelTag::Ensemble => "ensemble",
            ModelTag::Baseline => "baseline",
            ModelTag::FineTune => "fine_tune",
            ModelTag::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

/// How per-class Dice is aggregated over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Aggregation {
    /// Pixel counts summed over all samples, then one Dice per class.
    Micro,
    /// Dice per sample, then averaged over samples.
    Macro,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Micro => "micro",
            Aggregation::Macro => "macro",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "micro" => Some(Aggregation::Micro),
            "macro" => Some(Aggregation::Macro),
            _ => None,
        }
    }
}

/// Per-class Dice for one model on one dataset.
///
/// `per_class[0]` is background; `mean` averages classes `1..` only.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    pub per_class: Vec<f64>,
    pub mean: f64,
    pub model_tag: ModelTag,
    pub dataset_id: String,
    pub aggregation: Aggregation,
}

impl DiceReport {
    pub fn from_per_class(
        per_class: Vec<f64>,
        model_tag: ModelTag,
        dataset_id: impl Into<String>,
        aggregation: Aggregation,
    ) -> Self {
        let fg = &per_class[1.min(per_class.len())..];
        let mean = if fg.is_empty() {
            f64::NAN
        } else {
            fg.iter().sum::<f64>() / fg.len() as f64
        };
        Self {
            per_class,
            mean,
            model_tag,
            dataset_id: dataset_id.into(),
            aggregation,
        }
    }

    pub fn background(&self) -> f64 {
        self.per_class[0]
    }
}

/// Overlap counts `(|P|, |G|, |P ∩ G|)` of one class.
pub fn dice_counts(pred: &LabelMap, truth: &LabelMap, class_id: u8) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for (&p, &g) in pred.data.iter().zip(&truth.data) {
        let (pp, gg) = (p == class_id, g == class_id);
        c.0 += pp as usize;
        c.1 += gg as usize;
        c.2 += (pp && gg) as usize;
    }
    c
}

fn dice_from_counts(p: usize, g: usize, both: usize) -> f64 {
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// `2|P ∩ G| / (|P| + |G|)` for `class_id`; 1 when both sets are empty.
pub fn dice_coefficient(
    pred: &LabelMap,
    truth: &LabelMap,
    class_id: usize,
    num_classes: usize,
) -> Result<f64> {
    if class_id >= num_classes || class_id > u8::MAX as usize {
        return Err(Error::Input(format!(
            "class {class_id} out of range for {num_classes} classes"
        )));
    }
    if pred.height != truth.height || pred.width != truth.width {
        return Err(Error::Input(format!(
            "shape mismatch: {}x{} vs {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    let (p, g, both) = dice_counts(pred, truth, class_id as u8);
    Ok(dice_from_counts(p, g, both))
}

/// Average of the two segmentors' probability maps and its arg-max.
pub fn ensemble_predict<T: Scalar>(
    s_syn: &NetworkHandle<T>,
    s_real: &NetworkHandle<T>,
    x_t: &Tensor<T>,
) -> Result<(ProbabilityMap<T>, LabelMap)> {
    if s_syn.spec().num_classes != s_real.spec().num_classes {
        return Err(Error::Config(format!(
            "segmentors disagree on class count: {} vs {}",
            s_syn.spec().num_classes,
            s_real.spec().num_classes
        )));
    }
    let a = segment(s_syn, x_t)?;
    let b = segment(s_real, x_t)?;
    let half = T::lit(0.5);
    let mut avg = a.probs;
    for (x, &y) in avg.data.iter_mut().zip(&b.probs.data) {
        *x = half * (*x + y);
    }
    let p = ProbabilityMap::new_unchecked(avg);
    let label = p.argmax();
    Ok((p, label))
}

/// Dice of `predict` over every sample of `ds`.
pub fn evaluate_model(
    mut predict: impl FnMut(&LabeledSample) -> Result<LabelMap>,
    ds: &Dataset,
    model_tag: ModelTag,
    dataset_id: &str,
    aggregation: Aggregation,
) -> Result<DiceReport> {
    if ds.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let c = ds.num_classes();
    let mut counts = vec![(0usize, 0usize, 0usize); c];
    let mut sums = vec![0.0f64; c];
    for i in 0..ds.len() {
        let s = ds.get(i);
        let pred = predict(s)?;
        if pred.height != s.height() || pred.width != s.width() {
            return Err(Error::Input("prediction shape differs from label".into()));
        }
        for (k, (acc, sum)) in counts.iter_mut().zip(&mut sums).enumerate() {
            let (p, g, both) = dice_counts(&pred, &s.label, k as u8);
            acc.0 += p;
            acc.1 += g;
            acc.2 += both;
            *sum += dice_from_counts(p, g, both);
        }
    }
    let per_class = match aggregation {
        Aggregation::Micro => counts.iter().map(|&(p, g, b)| dice_from_counts(p, g, b)).collect(),
        Aggregation::Macro => sums.iter().map(|s| s / ds.len() as f64).collect(),
    };
    Ok(DiceReport::from_per_class(per_class, model_tag, dataset_id, aggregation))
}

/// Probability map of one of a trainer's models. `Syn` uses `S_syn`,
/// `Ensemble` averages both segmentors, every other tag uses `S_real`.
pub fn predict_with<T: Scalar>(
    trainer: &Trainer<T>,
    tag: ModelTag,
    x: &Tensor<T>,
) -> Result<ProbabilityMap<T>> {
    let syn = trainer.network(NetId::SegSyn);
    let real = trainer.network(NetId::SegReal);
    match tag {
        ModelTag::Syn => segment(syn, x),
        ModelTag::Ensemble => ensemble_predict(syn, real, x).map(|(p, _)| p),
        _ => segment(real, x),
    }
}

pub fn evaluate_trainer<T: Scalar>(
    trainer: &Trainer<T>,
    tag: ModelTag,
    ds: &Dataset,
    aggregation: Aggregation,
) -> Result<DiceReport> {
    evaluate_model(
        |s| {
            let x = Tensor::<T>::from_image(s.height(), s.width(), &s.image)?;
            Ok(predict_with(trainer, tag, &x)?.argmax())
        },
        ds,
        tag,
        ds.modality().as_str(),
        aggregation,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Modality;
    use crate::models::{build_network, NetworkSpec};

    fn mask(bits: &[u8]) -> LabelMap {
        LabelMap::new(1, bits.len(), bits.to_vec())
    }

    #[test]
    fn dice_basic_cases() {
        let a = mask(&[1, 1, 0, 0]);
        assert_eq!(dice_coefficient(&a, &a, 1, 2).unwrap(), 1.0);
        let b = mask(&[0, 0, 1, 1]);
        assert_eq!(dice_coefficient(&a, &b, 1, 2).unwrap(), 0.0);
        let p = mask(&[1, 1, 1, 0, 0, 0]);
        let g = mask(&[1, 1, 0, 1, 1, 0]);
        assert!((dice_coefficient(&p, &g, 1, 2).unwrap() - 4.0 / 7.0).abs() < 1e-12);
        let z = mask(&[0, 0]);
        assert_eq!(dice_coefficient(&z, &z, 1, 2).unwrap(), 1.0);
        assert!(dice_coefficient(&a, &a, 2, 2).is_err());
    }

    #[test]
    fn ensemble_tie_goes_to_lowest_class() {
        let t = |v: Vec<f64>| ProbabilityMap::new(Tensor::from_vec(2, 1, 1, v).unwrap()).unwrap();
        let a = t(vec![0.9, 0.1]);
        let b = t(vec![0.1, 0.9]);
        let mut avg = a.probs.clone();
        for (x, y) in avg.data.iter_mut().zip(&b.probs.data) {
            *x = 0.5 * (*x + y);
        }
        assert_eq!(avg.data, vec![0.5, 0.5]);
        assert_eq!(ProbabilityMap::new(avg).unwrap().argmax().data, vec![0]);
    }

    #[test]
    fn ensemble_of_identical_segmentors_matches_single() {
        let s = build_network::<f64>(NetworkSpec::segmentor(4, 2, 3), 5).unwrap();
        let x = Tensor::from_vec(1, 16, 16, (0..256).map(|i| ((i * 37 % 17) as f64 / 8.5) - 1.0).collect())
            .unwrap();
        let (p, l) = ensemble_predict(&s, &s, &x).unwrap();
        let single = segment(&s, &x).unwrap();
        assert_eq!(l, single.argmax());
        ProbabilityMap::new(p.probs).unwrap();
        let other = build_network::<f64>(NetworkSpec::segmentor(4, 2, 4), 5).unwrap();
        assert!(matches!(ensemble_predict(&s, &other, &x), Err(Error::Config(_))));
    }

    fn toy_dataset() -> Dataset {
        let labels = [[0u8, 1, 1, 2], [1, 1, 0, 0], [2, 2, 2, 0]];
        let samples = labels
            .iter()
            .map(|l| LabeledSample::new(vec![0.0; 4], LabelMap::new(2, 2, l.to_vec()), Modality::Target).unwrap())
            .collect();
        Dataset::new(samples, Modality::Target, 3).unwrap()
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let ds = toy_dataset();
        let r = evaluate_model(|s| Ok(s.label.clone()), &ds, ModelTag::Real, "toy", Aggregation::Micro).unwrap();
        assert!(r.per_class.iter().all(|&d| d == 1.0));
        assert_eq!(r.mean, 1.0);
        let r = evaluate_model(|_| Ok(LabelMap::filled(2, 2, 0)), &ds, ModelTag::Real, "toy", Aggregation::Micro)
            .unwrap();
        assert_eq!(&r.per_class[1..], &[0.0, 0.0]);
        assert_eq!(r.mean, 0.0);
        let empty = Dataset::new(vec![], Modality::Target, 3).unwrap();
        assert!(evaluate_model(|s| Ok(s.label.clone()), &empty, ModelTag::Real, "e", Aggregation::Micro).is_err());
    }

    #[test]
    fn mean_is_foreground_average() {
        let ds = toy_dataset();
        let r = evaluate_model(
            |s| Ok(LabelMap::new(2, 2, s.label.data.iter().map(|&c| (c + 1) % 3).collect())),
            &ds,
            ModelTag::Syn,
            "toy",
            Aggregation::Macro,
        )
        .unwrap();
        assert!((r.mean - (r.per_class[1] + r.per_class[2]) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ensemble_is_symmetric_in_segmentors() {
        let a = build_network::<f64>(NetworkSpec::segmentor(4, 1, 3), 1).unwrap();
        let b = build_network::<f64>(NetworkSpec::segmentor(4, 1, 3), 2).unwrap();
        let x = Tensor::from_vec(1, 16, 16, (0..256).map(|i| ((i * 29 % 19) as f64 / 9.5) - 1.0).collect())
            .unwrap();
        let (pab, lab) = ensemble_predict(&a, &b, &x).unwrap();
        let (pba, lba) = ensemble_predict(&b, &a, &x).unwrap();
        assert_eq!(lab, lba);
        assert_eq!(pab, pba);
    }

    proptest::proptest! {
        #[test]
        fn dice_is_bounded_and_symmetric(
            pairs in proptest::collection::vec((0u8..3, 0u8..3), 1..64),
            class in 0usize..3,
        ) {
            let pred = mask(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let truth = mask(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            let d = dice_coefficient(&pred, &truth, class, 3).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&d));
            proptest::prop_assert_eq!(d, dice_coefficient(&truth, &pred, class, 3).unwrap());
            proptest::prop_assert_eq!(dice_coefficient(&pred, &pred, class, 3).unwrap(), 1.0);
        }
    }
}
