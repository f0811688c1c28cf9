//! Dense row-major f32 tensors used for parameter storage and activations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A dense tensor: shape plus row-major f32 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    /// Uniform init over (-1/sqrt(fan_in), +1/sqrt(fan_in)).
    pub fn uniform_fan_in(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shape_product_matches_len() {
        let t = Tensor::zeros(vec![3, 4]);
        assert_eq!(t.numel(), 12);
        assert_eq!(t.shape(), &[3, 4]);
    }

    #[test]
    #[should_panic]
    fn mismatched_shape_rejected() {
        Tensor::new(vec![2, 2], vec![0.0; 3]);
    }

    #[test]
    fn fan_in_init_within_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::uniform_fan_in(vec![64, 16], 16, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(t.data().iter().all(|v| v.abs() < bound));
    }
}
