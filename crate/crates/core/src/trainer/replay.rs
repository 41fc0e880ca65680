use rand::Rng as _;

use crate::nn::Tensor;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Pool of past synthetic images shown to a discriminator.
///
/// While filling, each query stores and returns the new image. Once full,
/// a query returns a uniformly chosen stored image (replacing it with the
/// new one) with probability 1/2, and the new image otherwise. Capacity 0
/// disables the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    images: Vec<Tensor<T>>,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            images: Vec::new(),
        }
    }

    pub(crate) fn from_parts(capacity: usize, images: Vec<Tensor<T>>) -> Self {
        Self { capacity, images }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor<T>] {
        &self.images
    }

    pub fn query(&mut self, image: &Tensor<T>, rng: &mut Rng) -> Tensor<T> {
        if self.capacity == 0 {
            return image.clone();
        }
        if self.images.len() < self.capacity {
            self.images.push(image.clone());
            return image.clone();
        }
        if rng.random::<f64>() < 0.5 {
            let i = rng.random_range(0..self.images.len());
            std::mem::replace(&mut self.images[i], image.clone())
        } else {
            image.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, Stream};

    #[test]
    fn disabled_pool_is_identity() {
        let mut p = ReplayBuffer::<f64>::new(0);
        let mut rng = rng_for(1, Stream::Replay, 0);
        let x = Tensor::filled(1, 2, 2, 0.3);
        assert_eq!(p.query(&x, &mut rng), x);
        assert!(p.is_empty());
    }

    #[test]
    fn fills_then_mixes() {
        let mut p = ReplayBuffer::<f64>::new(3);
        let mut rng = rng_for(1, Stream::Replay, 0);
        for i in 0..3 {
            let x = Tensor::filled(1, 1, 1, i as f64);
            assert_eq!(p.query(&x, &mut rng), x);
        }
        assert_eq!(p.len(), 3);
        let mut returned_old = 0;
        for i in 3..200 {
            let x = Tensor::filled(1, 1, 1, i as f64);
            if p.query(&x, &mut rng) != x {
                returned_old += 1;
            }
            assert_eq!(p.len(), 3);
        }
        assert!((60..140).contains(&returned_old), "{returned_old}");
    }
}
