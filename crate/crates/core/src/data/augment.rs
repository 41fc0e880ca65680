use rand::Rng as _;

use super::{LabelMap, LabeledSample};
use crate::rng::{rng_for, Stream};

/// Label-preserving geometric transforms (pixel permutations only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    Identity,
    FlipHorizontal,
    FlipVertical,
    Rotate90,
    Rotate180,
    Rotate270,
}

impl Augmentation {
    pub const ALL: [Augmentation; 6] = [
        Augmentation::Identity,
        Augmentation::FlipHorizontal,
        Augmentation::FlipVertical,
        Augmentation::Rotate90,
        Augmentation::Rotate180,
        Augmentation::Rotate270,
    ];

    pub fn from_seed(seed: u64) -> Self {
        let mut rng = rng_for(seed, Stream::Augment, 0);
        Self::ALL[rng.random_range(0..Self::ALL.len())]
    }

    /// Output shape for an `h x w` input.
    pub fn output_shape(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Augmentation::Rotate90 | Augmentation::Rotate270 => (w, h),
            _ => (h, w),
        }
    }

    /// Source index (row-major in the input) of output pixel `(y, x)`.
    #[inline]
    fn source(self, h: usize, w: usize, y: usize, x: usize) -> usize {
        let (sy, sx) = match self {
            Augmentation::Identity => (y, x),
            Augmentation::FlipHorizontal => (y, w - 1 - x),
            Augmentation::FlipVertical => (h - 1 - y, x),
            // counter-clockwise: output is w x h
            Augmentation::Rotate90 => (x, w - 1 - y),
            Augmentation::Rotate180 => (h - 1 - y, w - 1 - x),
            Augmentation::Rotate270 => (h - 1 - x, y),
        };
        sy * w + sx
    }

    pub fn apply_grid<V: Copy>(self, h: usize, w: usize, data: &[V]) -> Vec<V> {
        let (oh, ow) = self.output_shape(h, w);
        let mut out = Vec::with_capacity(data.len());
        for y in 0..oh {
            for x in 0..ow {
                out.push(data[self.source(h, w, y, x)]);
            }
        }
        out
    }

    pub fn apply(self, s: &LabeledSample) -> LabeledSample {
        if self == Augmentation::Identity {
            return s.clone();
        }
        let (h, w) = (s.height(), s.width());
        let (oh, ow) = self.output_shape(h, w);
        LabeledSample {
            image: self.apply_grid(h, w, &s.image),
            label: LabelMap::new(oh, ow, self.apply_grid(h, w, &s.label.data)),
            modality: s.modality,
        }
    }
}

/// Applies the seed-selected transform identically to image and label.
pub fn augment_sample(s: &LabeledSample, rng_seed: u64) -> LabeledSample {
    Augmentation::from_seed(rng_seed).apply(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Modality;
    use proptest::prelude::*;

    fn sample(h: usize, w: usize, seed: u64) -> LabeledSample {
        let mut x = seed;
        let mut next = || {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            x >> 33
        };
        let image = (0..h * w).map(|_| (next() % 2000) as f32 / 1000.0 - 1.0).collect();
        let label = (0..h * w).map(|_| (next() % 4) as u8).collect();
        LabeledSample::new(image, LabelMap::new(h, w, label), Modality::Target).unwrap()
    }

    #[test]
    fn identity_is_noop() {
        let s = sample(5, 7, 1);
        assert_eq!(Augmentation::Identity.apply(&s), s);
    }

    #[test]
    fn rotate180_is_involution() {
        let s = sample(6, 9, 2);
        let twice = Augmentation::Rotate180.apply(&Augmentation::Rotate180.apply(&s));
        assert_eq!(twice, s);
    }

    #[test]
    fn rotations_compose() {
        let s = sample(4, 6, 3);
        let r = Augmentation::Rotate90.apply(&Augmentation::Rotate270.apply(&s));
        assert_eq!(r, s);
        let r4 = (0..4).fold(s.clone(), |acc, _| Augmentation::Rotate90.apply(&acc));
        assert_eq!(r4, s);
        assert_eq!(Augmentation::Rotate90.apply(&s).height(), 6);
    }

    #[test]
    fn rotate90_moves_corner() {
        // top-right corner goes to top-left under a counter-clockwise turn
        let label = LabelMap::new(2, 2, vec![0, 1, 2, 3]);
        let s = LabeledSample::new(vec![0.0; 4], label, Modality::Target).unwrap();
        assert_eq!(Augmentation::Rotate90.apply(&s).label.data, vec![1, 3, 0, 2]);
    }

    #[test]
    fn every_choice_is_reachable() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..200 {
            seen.insert(format!("{:?}", Augmentation::from_seed(seed)));
        }
        assert_eq!(seen.len(), 6);
    }

    proptest! {
        #[test]
        fn histogram_preserved(h in 1usize..12, w in 1usize..12, seed in 0u64..1000, aug in 0u64..1000) {
            let s = sample(h, w, seed);
            let out = augment_sample(&s, aug);
            prop_assert_eq!(out.label.histogram(4), s.label.histogram(4));
            let mut a: Vec<u32> = s.image.iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = out.image.iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
