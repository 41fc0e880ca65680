//! Training objectives: adversarial, cycle-consistency, supervised
//! (cross-entropy + soft Dice) and distillation losses.
//!
//! Every loss is a mean over pixels (and patches), so weights do not depend
//! on image size. Functions ending in `_grad` also return the gradient with
//! respect to the differentiable argument(s); the plain versions return only
//! the value.

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::models::ProbabilityMap;
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;
/// Smoothing term of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GanVariant {
    /// Log loss on sigmoid realness, non-saturating generator term.
    Vanilla,
    LeastSquares,
}

impl GanVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            GanVariant::Vanilla => "vanilla",
            GanVariant::LeastSquares => "least_squares",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vanilla" => Some(GanVariant::Vanilla),
            "least_squares" | "lsgan" => Some(GanVariant::LeastSquares),
            _ => None,
        }
    }
}

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Input(format!(
            "{what}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::Input(format!("{what}: empty input")));
    }
    Ok(())
}

// Values are probabilities from a sigmoid; exact 0 or 1 can occur from
// rounding and is handled by the log clamp, anything else is rejected.
// NaN passes through so the caller reports it as a non-finite loss.
fn check_realness<T: Scalar>(m: &Tensor<T>) -> Result<()> {
    if let Some(v) = m.data.iter().find(|v| !v.is_nan() && !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::Domain(format!(
            "vanilla adversarial loss needs realness in (0, 1), got {v}"
        )));
    }
    Ok(())
}

fn mean_of<T: Scalar>(t: &Tensor<T>, f: impl Fn(T) -> T) -> T {
    t.data.iter().map(|&v| f(v)).sum::<T>() / T::from_usize(t.len()).unwrap()
}

// `max` would swallow a NaN probability, so it is propagated explicitly.
#[inline]
fn neg_log<T: Scalar>(p: T) -> T {
    if p.is_nan() {
        p
    } else {
        -p.max(T::lit(PROB_EPS)).ln()
    }
}

/// `d/dp [-log max(p, eps)]`.
#[inline]
fn neg_log_grad<T: Scalar>(p: T) -> T {
    if p > T::lit(PROB_EPS) {
        -T::one() / p
    } else {
        T::zero()
    }
}

/// Discriminator loss and its gradients w.r.t. the real and fake maps.
pub fn discriminator_loss_grad<T: Scalar>(
    d_real: &Tensor<T>,
    d_fake: &Tensor<T>,
    variant: GanVariant,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::Input("empty realness map".into()));
    }
    let nr = T::from_usize(d_real.len()).unwrap();
    let nf = T::from_usize(d_fake.len()).unwrap();
    let two = T::lit(2.0);
    match variant {
        GanVariant::Vanilla => {
            check_realness(d_real)?;
            check_realness(d_fake)?;
            let loss = mean_of(d_real, neg_log) + mean_of(d_fake, |v| neg_log(T::one() - v));
            let gr = d_real.map(|v| neg_log_grad(v) / nr);
            let gf = d_fake.map(|v| -neg_log_grad(T::one() - v) / nf);
            Ok((loss, gr, gf))
        }
        GanVariant::LeastSquares => {
            let loss = mean_of(d_real, |v| (v - T::one()).powi(2)) + mean_of(d_fake, |v| v * v);
            let gr = d_real.map(|v| two * (v - T::one()) / nr);
            let gf = d_fake.map(|v| two * v / nf);
            Ok((loss, gr, gf))
        }
    }
}

/// Generator adversarial term on the discriminator's fake map and its
/// gradient. The vanilla form is the non-saturating `-mean log D(fake)`.
pub fn generator_adv_loss_grad<T: Scalar>(
    d_fake: &Tensor<T>,
    variant: GanVariant,
) -> Result<(T, Tensor<T>)> {
    if d_fake.is_empty() {
        return Err(Error::Input("empty realness map".into()));
    }
    let n = T::from_usize(d_fake.len()).unwrap();
    match variant {
        GanVariant::Vanilla => {
            check_realness(d_fake)?;
            Ok((mean_of(d_fake, neg_log), d_fake.map(|v| neg_log_grad(v) / n)))
        }
        GanVariant::LeastSquares => Ok((
            mean_of(d_fake, |v| (v - T::one()).powi(2)),
            d_fake.map(|v| T::lit(2.0) * (v - T::one()) / n),
        )),
    }
}

/// `(d_loss, g_loss)` for one pair of realness maps.
pub fn adversarial_loss<T: Scalar>(
    d_real_out: &Tensor<T>,
    d_fake_out: &Tensor<T>,
    variant: GanVariant,
) -> Result<(T, T)> {
    check_same(d_real_out, d_fake_out, "adversarial loss")?;
    let (d, _, _) = discriminator_loss_grad(d_real_out, d_fake_out, variant)?;
    let (g, _) = generator_adv_loss_grad(d_fake_out, variant)?;
    Ok((d, g))
}

/// Mean absolute error between `reconstruction` and `original`, and its
/// gradient w.r.t. the reconstruction.
pub fn l1_grad<T: Scalar>(original: &Tensor<T>, reconstruction: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    check_same(original, reconstruction, "l1")?;
    let n = T::from_usize(original.len()).unwrap();
    let mut loss = T::zero();
    let mut g = Tensor::zeros(original.channels, original.height, original.width);
    for ((gv, &a), &b) in g.data.iter_mut().zip(&original.data).zip(&reconstruction.data) {
        let d = b - a;
        loss += d.abs();
        *gv = if d > T::zero() {
            T::one() / n
        } else if d < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        };
    }
    Ok((loss / n, g))
}

/// Cycle-consistency: mean L1 of both reconstructions, summed.
pub fn cycle_loss<T: Scalar>(
    x_a: &Tensor<T>,
    x_a_rec: &Tensor<T>,
    x_t: &Tensor<T>,
    x_t_rec: &Tensor<T>,
) -> Result<T> {
    Ok(l1_grad(x_a, x_a_rec)?.0 + l1_grad(x_t, x_t_rec)?.0)
}

pub fn generator_objective<T: Scalar>(adv_g: T, cyc: T, lambda_cyc: T) -> T {
    adv_g + lambda_cyc * cyc
}

/// Cross-entropy target: hard labels (one-hot) or a soft distribution.
#[derive(Debug, Clone, Copy)]
pub enum CeTarget<'a, T> {
    Hard(&'a LabelMap),
    Soft(&'a ProbabilityMap<T>),
}

/// `-mean_pixels sum_c target_c log pred_c` and its gradient w.r.t. `pred`.
pub fn cross_entropy_grad<T: Scalar>(
    target: CeTarget<'_, T>,
    pred: &ProbabilityMap<T>,
) -> Result<(T, Tensor<T>)> {
    let (c, p) = (pred.num_classes(), pred.pixels());
    if p == 0 {
        return Err(Error::Input("cross-entropy of an empty map".into()));
    }
    let n = T::from_usize(p).unwrap();
    let mut grad = Tensor::zeros(c, pred.height(), pred.width());
    let mut loss = T::zero();
    match target {
        CeTarget::Hard(label) => {
            if (label.height, label.width) != (pred.height(), pred.width()) {
                return Err(Error::Input("cross-entropy: label/prediction shape mismatch".into()));
            }
            for (i, &k) in label.data.iter().enumerate() {
                let k = k as usize;
                if k >= c {
                    return Err(Error::Input(format!("class index {k} >= {c}")));
                }
                let v = pred.at(k, i);
                loss += neg_log(v);
                grad.data[k * p + i] = neg_log_grad(v) / n;
            }
        }
        CeTarget::Soft(t) => {
            if !t.probs.same_shape(&pred.probs) {
                return Err(Error::Input("cross-entropy: distribution shape mismatch".into()));
            }
            for idx in 0..c * p {
                let (tv, pv) = (t.probs.data[idx], pred.probs.data[idx]);
                if tv != T::zero() {
                    loss += tv * neg_log(pv);
                    grad.data[idx] = tv * neg_log_grad(pv) / n;
                }
            }
        }
    }
    Ok((loss / n, grad))
}

pub fn cross_entropy<T: Scalar>(target: CeTarget<'_, T>, pred: &ProbabilityMap<T>) -> Result<T> {
    cross_entropy_grad(target, pred).map(|(l, _)| l)
}

/// Soft Dice loss `1 - mean_c (2 sum p g + eps) / (sum p + sum g + eps)`
/// and its gradient w.r.t. `pred`. With `include_background = false`
/// class 0 is left out of the mean.
pub fn soft_dice_loss_grad_with<T: Scalar>(
    target: &LabelMap,
    pred: &ProbabilityMap<T>,
    include_background: bool,
) -> Result<(T, Tensor<T>)> {
    let (c, p) = (pred.num_classes(), pred.pixels());
    if (target.height, target.width) != (pred.height(), pred.width()) {
        return Err(Error::Input("soft dice: label/prediction shape mismatch".into()));
    }
    if let Some(&k) = target.data.iter().find(|&&k| k as usize >= c) {
        return Err(Error::Input(format!("class index {k} >= {c}")));
    }
    let first = if include_background { 0 } else { 1 };
    if first >= c {
        return Err(Error::Input("soft dice: no classes to average".into()));
    }
    let eps = T::lit(DICE_SMOOTH);
    let two = T::lit(2.0);
    let m = T::from_usize(c - first).unwrap();
    let mut grad = Tensor::zeros(c, pred.height(), pred.width());
    let mut dice_sum = T::zero();
    for k in first..c {
        let pk = &pred.probs.data[k * p..(k + 1) * p];
        let mut inter = T::zero();
        let mut psum = T::zero();
        let mut gsum = T::zero();
        for (i, &v) in pk.iter().enumerate() {
            psum += v;
            if target.data[i] as usize == k {
                inter += v;
                gsum += T::one();
            }
        }
        let num = two * inter + eps;
        let den = psum + gsum + eps;
        dice_sum += num / den;
        let gk = &mut grad.data[k * p..(k + 1) * p];
        for (i, g) in gk.iter_mut().enumerate() {
            let gi = if target.data[i] as usize == k { T::one() } else { T::zero() };
            *g = -(two * gi * den - num) / (den * den) / m;
        }
    }
    Ok((T::one() - dice_sum / m, grad))
}

pub fn soft_dice_loss_grad<T: Scalar>(target: &LabelMap, pred: &ProbabilityMap<T>) -> Result<(T, Tensor<T>)> {
    soft_dice_loss_grad_with(target, pred, true)
}

pub fn soft_dice_loss<T: Scalar>(target: &LabelMap, pred: &ProbabilityMap<T>) -> Result<T> {
    soft_dice_loss_grad(target, pred).map(|(l, _)| l)
}

/// Cross-entropy plus soft Dice against ground truth.
pub fn supervised_loss_grad<T: Scalar>(
    y: &LabelMap,
    p: &ProbabilityMap<T>,
    include_background: bool,
) -> Result<(T, Tensor<T>)> {
    let (ce, mut g) = cross_entropy_grad(CeTarget::Hard(y), p)?;
    let (dice, gd) = soft_dice_loss_grad_with(y, p, include_background)?;
    g.add_assign(&gd);
    Ok((ce + dice, g))
}

pub fn supervised_loss<T: Scalar>(y: &LabelMap, p: &ProbabilityMap<T>) -> Result<T> {
    supervised_loss_grad(y, p, true).map(|(l, _)| l)
}

/// Distillation loss `CE(teacher, student)`. Only the student receives a
/// gradient; the teacher is a constant.
pub fn kd_loss_grad<T: Scalar>(
    teacher: &ProbabilityMap<T>,
    student: &ProbabilityMap<T>,
) -> Result<(T, Tensor<T>)> {
    cross_entropy_grad(CeTarget::Soft(teacher), student)
}

pub fn kd_loss<T: Scalar>(teacher: &ProbabilityMap<T>, student: &ProbabilityMap<T>) -> Result<T> {
    kd_loss_grad(teacher, student).map(|(l, _)| l)
}

pub fn segmentor_objective<T: Scalar>(sup: T, kd: T, lambda_kd: T) -> T {
    sup + lambda_kd * kd
}

/// Per-iteration loss terms.
///
/// `adv_t`/`adv_a` are the generator adversarial terms, `cyc` is the
/// cycle loss evaluated for the assistant-to-target generator update, `idt`
/// the identity term of that update (not part of the composites), and
/// `d_t`/`d_a` are the discriminator losses. `total` is
/// `gan_a2t + gan_t2a + seg_syn + seg_real`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub adv_t: f64,
    pub adv_a: f64,
    pub cyc: f64,
    pub idt: f64,
    pub gan_a2t: f64,
    pub gan_t2a: f64,
    pub d_t: f64,
    pub d_a: f64,
    pub sup_syn: f64,
    pub sup_real: f64,
    pub kd_s2r: f64,
    pub kd_r2s: f64,
    pub seg_syn: f64,
    pub seg_real: f64,
    pub total: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 15] = [
        "adv_t", "adv_a", "cyc", "idt", "gan_a2t", "gan_t2a", "d_t", "d_a", "sup_syn", "sup_real", "kd_s2r",
        "kd_r2s", "seg_syn", "seg_real", "total",
    ];

    pub fn values(&self) -> [f64; 15] {
        [
            self.adv_t,
            self.adv_a,
            self.cyc,
            self.idt,
            self.gan_a2t,
            self.gan_t2a,
            self.d_t,
            self.d_a,
            self.sup_syn,
            self.sup_real,
            self.kd_s2r,
            self.kd_r2s,
            self.seg_syn,
            self.seg_real,
            self.total,
        ]
    }

    pub fn get(&self, field: &str) -> Option<f64> {
        Self::FIELDS
            .iter()
            .position(|f| *f == field)
            .map(|i| self.values()[i])
    }

    /// Recomputes the composite terms from the primitive ones.
    pub fn finalize(&mut self, lambda_cyc: f64, lambda_kd1: f64, lambda_kd2: f64) {
        self.gan_a2t = self.adv_t + lambda_cyc * self.cyc;
        self.gan_t2a = self.adv_a + lambda_cyc * self.cyc;
        self.seg_syn = self.sup_syn + lambda_kd2 * self.kd_r2s;
        self.seg_real = self.sup_real + lambda_kd1 * self.kd_s2r;
        self.total = self.gan_a2t + self.gan_t2a + self.seg_syn + self.seg_real;
    }

    /// First term that is NaN or infinite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(f, _)| *f)
    }
}
