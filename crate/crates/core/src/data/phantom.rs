use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{Dataset, LabelMap, LabeledSample, Modality};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, Rng, Stream};

/// Appearance family of a phantom modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModalityStyle {
    A,
    B,
}

impl ModalityStyle {
    pub fn other(self) -> Self {
        match self {
            ModalityStyle::A => ModalityStyle::B,
            ModalityStyle::B => ModalityStyle::A,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "A" | "a" => Some(ModalityStyle::A),
            "B" | "b" => Some(ModalityStyle::B),
            _ => None,
        }
    }

    fn tag(self) -> u64 {
        match self {
            ModalityStyle::A => 0xA,
            ModalityStyle::B => 0xB,
        }
    }
}

/// Parameters of the procedural phantom generator.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub geometry_seed: u64,
    pub modality_style: ModalityStyle,
    /// Mean intensity per class, indexed by class id.
    pub intensity_map: Vec<f64>,
    pub noise_sigma: f64,
    pub bias_strength: f64,
    /// Small blobs as bright as the brightest structure, placed outside
    /// every labeled structure and labeled background (think bone or
    /// calcification that only one modality shows).
    pub distractors: usize,
}

impl PhantomSpec {
    /// Default appearance for `style`. Style A is clean and well separated.
    /// Style B is noisier, draws bright distractor blobs in the background,
    /// and gives the first adjacent structure barely more contrast than the
    /// wall, so that class is hard to learn from B alone and easy from A.
    /// No affine intensity change maps one style onto the other.
    pub fn for_style(
        style: ModalityStyle,
        image_size: usize,
        num_classes: usize,
        geometry_seed: u64,
    ) -> Self {
        let fg = num_classes.saturating_sub(1).max(1);
        let t = |k: usize| -> f64 {
            if fg == 1 {
                1.0
            } else {
                k as f64 / (fg - 1) as f64
            }
        };
        let (background, lo, hi, noise_sigma, bias_strength, distractors) = match style {
            ModalityStyle::A => (-0.8, -0.2, 0.8, 0.06, 0.15, 0),
            ModalityStyle::B => (-0.9, 0.0, 0.9, 0.15, 0.15, 3),
        };
        let mut intensity_map = vec![background];
        for k in 0..num_classes.saturating_sub(1) {
            intensity_map.push(lo + (hi - lo) * t(k));
        }
        if num_classes >= 4 {
            // The first adjacent structure sits between the wall and the
            // cavity in style A; style B barely separates it from the wall.
            intensity_map.swap(2, 3);
            if style == ModalityStyle::B {
                intensity_map[3] = intensity_map[1] + 0.12;
            }
        }
        Self {
            image_size,
            num_classes,
            geometry_seed,
            modality_style: style,
            intensity_map,
            noise_sigma,
            bias_strength,
            distractors,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.num_classes > 16 {
            return Err(Error::Config(format!(
                "num_classes must be at most 16, got {}",
                self.num_classes
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size must be at least 16, got {}",
                self.image_size
            )));
        }
        if self.intensity_map.len() != self.num_classes {
            return Err(Error::Config(format!(
                "intensity_map has {} entries for {} classes",
                self.intensity_map.len(),
                self.num_classes
            )));
        }
        if self.intensity_map.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Config("intensity_map values must lie in [-1, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.bias_strength) {
            return Err(Error::Config("bias_strength must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Smooth low-frequency scalar field on normalized coordinates.
struct Wave {
    terms: Vec<(f64, f64, f64, f64, f64)>, // amplitude, freq, cos(dir), sin(dir), phase
}

impl Wave {
    fn random(rng: &mut Rng, count: usize, amplitude: f64, max_freq: f64) -> Self {
        let terms = (0..count)
            .map(|_| {
                let dir = rng.random_range(0.0..2.0 * PI);
                (
                    amplitude * rng.random_range(0.5..1.0) / count as f64,
                    rng.random_range(0.5..max_freq),
                    dir.cos(),
                    dir.sin(),
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        Self { terms }
    }

    fn eval(&self, u: f64, v: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(a, f, c, s, p)| a * (PI * f * (u * c + v * s) + p).sin())
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cu: f64,
    cv: f64,
    ru: f64,
    rv: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(cu: f64, cv: f64, ru: f64, rv: f64, angle: f64) -> Self {
        Self {
            cu,
            cv,
            ru,
            rv,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        let du = u - self.cu;
        let dv = v - self.cv;
        let a = (du * self.cos + dv * self.sin) / self.ru;
        let b = (-du * self.sin + dv * self.cos) / self.rv;
        a * a + b * b <= 1.0
    }

    /// Distance from center to boundary along direction `theta` (world frame).
    fn reach(&self, theta: f64) -> f64 {
        let local = theta - self.sin.atan2(self.cos);
        let (c, s) = (local.cos(), local.sin());
        1.0 / ((c / self.ru).powi(2) + (s / self.rv).powi(2)).sqrt()
    }
}

/// Blob layout for one sample: structure `k` paints class `k + 1`.
fn layout(rng: &mut Rng, foreground: usize) -> Vec<Ellipse> {
    let mut shapes = Vec::with_capacity(foreground);
    let main = Ellipse::new(
        rng.random_range(-0.12..0.12),
        rng.random_range(-0.12..0.12),
        rng.random_range(0.40..0.55),
        rng.random_range(0.36..0.50),
        rng.random_range(0.0..PI),
    );
    shapes.push(main);
    let base_angle = rng.random_range(0.0..2.0 * PI);
    let mut adjacent = 0usize;
    for k in 1..foreground {
        let nested_in_prev = k % 2 == 1;
        let shape = if nested_in_prev {
            // cavity inside the previous structure, turning it into a wall
            let host = shapes[k - 1];
            let scale = rng.random_range(0.55..0.70);
            Ellipse::new(
                host.cu + rng.random_range(-0.04..0.04),
                host.cv + rng.random_range(-0.04..0.04),
                host.ru * scale,
                host.rv * scale,
                host.sin.atan2(host.cos) + rng.random_range(-0.3..0.3),
            )
        } else {
            // structure touching the main body from outside
            let theta = base_angle + adjacent as f64 * 2.1 + rng.random_range(-0.3..0.3);
            adjacent += 1;
            let r = rng.random_range(0.20..0.28) / (1.0 + 0.25 * adjacent as f64 - 0.25);
            let d = main.reach(theta) + 0.55 * r;
            Ellipse::new(
                main.cu + d * theta.cos(),
                main.cv + d * theta.sin(),
                r,
                r * rng.random_range(0.75..1.0),
                rng.random_range(0.0..PI),
            )
        };
        shapes.push(shape);
    }
    shapes
}

/// Label map of sample `sample_seed` under geometry `geometry_seed`.
///
/// Depends only on geometry, never on appearance, so both modality styles
/// share anatomy for the same seeds.
pub fn synthesize_label(
    image_size: usize,
    num_classes: usize,
    geometry_seed: u64,
    sample_seed: u64,
) -> LabelMap {
    let mut rng = rng_for(geometry_seed, Stream::Geometry, sample_seed);
    let shapes = layout(&mut rng, num_classes - 1);
    let warp_u = Wave::random(&mut rng, 3, 0.12, 2.0);
    let warp_v = Wave::random(&mut rng, 3, 0.12, 2.0);
    let n = image_size;
    let mut data = vec![0u8; n * n];
    for y in 0..n {
        let v = 2.0 * (y as f64 + 0.5) / n as f64 - 1.0;
        for x in 0..n {
            let u = 2.0 * (x as f64 + 0.5) / n as f64 - 1.0;
            let (wu, wv) = (u + warp_u.eval(u, v), v + warp_v.eval(u, v));
            let mut class = 0u8;
            for (k, s) in shapes.iter().enumerate() {
                if s.contains(wu, wv) {
                    class = (k + 1) as u8;
                }
            }
            data[y * n + x] = class;
        }
    }
    LabelMap::new(n, n, data)
}

/// Deterministic phantom sample for `(spec, sample_seed)`.
pub fn synthesize_sample(spec: &PhantomSpec, sample_seed: u64) -> Result<LabeledSample> {
    spec.validate()?;
    let n = spec.image_size;
    let label = synthesize_label(n, spec.num_classes, spec.geometry_seed, sample_seed);

    let appearance_seed = derive_seed(spec.geometry_seed, Stream::Appearance, spec.modality_style.tag());
    let mut rng = rng_for(appearance_seed, Stream::Appearance, sample_seed);
    let bias = Wave::random(&mut rng, 2, 1.0, 1.2);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("valid sigma");

    let mut base: Vec<f64> = label
        .data
        .iter()
        .map(|&c| spec.intensity_map[c as usize])
        .collect();
    let bright = spec.intensity_map.iter().cloned().fold(f64::MIN, f64::max);
    for _ in 0..spec.distractors {
        let (cu, cv) = (rng.random_range(-0.85..0.85), rng.random_range(-0.85..0.85));
        let r = rng.random_range(0.06..0.10);
        for y in 0..n {
            let v = 2.0 * (y as f64 + 0.5) / n as f64 - 1.0;
            for x in 0..n {
                let u = 2.0 * (x as f64 + 0.5) / n as f64 - 1.0;
                if (u - cu).powi(2) + (v - cv).powi(2) <= r * r && label.data[y * n + x] == 0 {
                    base[y * n + x] = bright;
                }
            }
        }
    }
    // 3x3 box blur for partial-volume edges
    let mut image = vec![0f32; n * n];
    for y in 0..n {
        let v = 2.0 * (y as f64 + 0.5) / n as f64 - 1.0;
        for x in 0..n {
            let u = 2.0 * (x as f64 + 0.5) / n as f64 - 1.0;
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < n && (xx as usize) < n {
                        acc += base[yy as usize * n + xx as usize];
                        cnt += 1.0;
                    }
                }
            }
            let mut val = acc / cnt;
            val *= 1.0 + spec.bias_strength * bias.eval(u, v).clamp(-1.0, 1.0);
            val += noise.sample(&mut rng);
            image[y * n + x] = val.clamp(-1.0, 1.0) as f32;
        }
    }
    let modality = Modality::Target; // caller reassigns the role
    LabeledSample::new(image, label, modality)
}

/// `count` samples with seeds `first_seed..first_seed + count`.
pub fn synthesize_dataset(
    spec: &PhantomSpec,
    modality: Modality,
    count: usize,
    first_seed: u64,
) -> Result<Dataset> {
    let samples = (0..count as u64)
        .map(|i| {
            synthesize_sample(spec, first_seed + i).map(|mut s| {
                s.modality = modality;
                s
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, modality, spec.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(style: ModalityStyle) -> PhantomSpec {
        PhantomSpec::for_style(style, 64, 4, 11)
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = synthesize_sample(&spec(ModalityStyle::A), 7).unwrap();
        let b = synthesize_sample(&spec(ModalityStyle::A), 7).unwrap();
        assert_eq!(a, b);
        let bits_a: Vec<u32> = a.image.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.image.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn styles_share_geometry_but_not_appearance() {
        let a = synthesize_sample(&spec(ModalityStyle::A), 7).unwrap();
        let b = synthesize_sample(&spec(ModalityStyle::B), 7).unwrap();
        assert_eq!(a.label, b.label);
        assert_ne!(a.image, b.image);
        let sa = spec(ModalityStyle::A);
        let sb = spec(ModalityStyle::B);
        assert_ne!(sa.intensity_map, sb.intensity_map);
        assert_ne!(sa.noise_sigma, sb.noise_sigma);
    }

    #[test]
    fn images_are_clipped() {
        let mut s = spec(ModalityStyle::B);
        s.noise_sigma = 2.0;
        let x = synthesize_sample(&s, 3).unwrap();
        assert!(x.image.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(ModalityStyle::A);
        s.num_classes = 1;
        s.intensity_map.truncate(1);
        assert!(matches!(synthesize_sample(&s, 0), Err(Error::Config(_))));
        let s = PhantomSpec::for_style(ModalityStyle::A, 8, 4, 0);
        assert!(matches!(synthesize_sample(&s, 0), Err(Error::Config(_))));
    }

    #[test]
    fn every_class_present_for_default_specs() {
        for classes in [2usize, 4, 5, 7] {
            let mut missing = 0;
            for seed in 0..200 {
                let l = synthesize_label(64, classes, 5, seed);
                if l.histogram(classes).iter().any(|&c| c == 0) {
                    missing += 1;
                }
            }
            assert!(missing <= 2, "{classes} classes: {missing}/200 samples miss a class");
        }
    }

    #[test]
    fn class_frequencies_over_corpus() {
        let classes = 4;
        let mut totals = vec![0usize; classes];
        let seeds = 1000;
        for seed in 0..seeds {
            let l = synthesize_label(64, classes, 3, seed);
            for (t, c) in totals.iter_mut().zip(l.histogram(classes)) {
                *t += c;
            }
        }
        let all = (seeds as usize * 64 * 64) as f64;
        for (c, &t) in totals.iter().enumerate() {
            let f = t as f64 / all;
            assert!((0.01..=0.90).contains(&f), "class {c} frequency {f}");
        }
    }
}
