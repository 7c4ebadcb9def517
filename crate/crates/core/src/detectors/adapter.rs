use rand::Rng;

use super::DetectorError;
use crate::nn::{composite_module, Conv2d, Layer, Pass, Seq, Tensor};
use crate::scalar::Scalar;

/// Small conv stack mapping a student channel group to the teacher width.
#[derive(Clone, Debug)]
pub struct Adapter<S> {
    pub net: Seq<S>,
}

composite_module!(Adapter { net });

impl<S: Scalar> Adapter<S> {
    /// `layers` 3x3 convolutions (1 to 3) with ReLU between them.
    pub fn new(cin: usize, cout: usize, layers: usize, zero_init_last: bool, rng: &mut impl Rng) -> Self {
        assert!((1..=3).contains(&layers), "adapter depth must be 1..=3");
        let mut seq = Vec::new();
        for i in 0..layers {
            let conv = Conv2d::new(if i == 0 { cin } else { cout }, cout, 3, rng);
            let last = i + 1 == layers;
            seq.push(Layer::Conv(if last && zero_init_last { conv.zero_init() } else { conv }));
            if !last {
                seq.push(Layer::relu());
            }
        }
        Self { net: Seq::new(seq) }
    }

    pub fn in_channels(&self) -> usize {
        match &self.net.layers[0] {
            Layer::Conv(c) => c.cin,
            _ => unreachable!("adapter starts with a convolution"),
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>, pass: Pass) -> Result<Tensor<S>, DetectorError> {
        if x.c != self.in_channels() {
            return Err(DetectorError::ChannelMismatch { expected: self.in_channels(), found: x.c });
        }
        Ok(self.net.forward(x, pass))
    }

    pub fn backward(&mut self, grad: &Tensor<S>) -> Tensor<S> {
        self.net.backward(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_and_zero_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = Adapter::<f32>::new(5, 7, 2, true, &mut rng);
        let x = Tensor::filled(5, 2, 4, 3, 0.7);
        let y = a.forward(&x, Pass::INFER).unwrap();
        assert_eq!(y.shape(), [7, 2, 4, 3]);
        assert!(y.data.iter().all(|&v| v == 0.0));
        let err = a.forward(&Tensor::zeros(4, 1, 2, 2), Pass::INFER).unwrap_err();
        assert_eq!(err, DetectorError::ChannelMismatch { expected: 5, found: 4 });
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for layers in 1..=3 {
            let mut a = Adapter::<f64>::new(3, 4, layers, false, &mut rng);
            let x = Tensor::from_vec(3, 1, 4, 4, (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let probe = Tensor::from_vec(4, 1, 4, 4, (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let f = |a: &mut Adapter<f64>, x: &Tensor<f64>| -> f64 {
                let y = a.forward(x, Pass::TRAIN).unwrap();
                y.data.iter().zip(&probe.data).map(|(u, v)| u * v).sum()
            };
            f(&mut a, &x);
            let dx = a.backward(&probe);
            let eps = 1e-6;
            for i in (0..48).step_by(5) {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data[i] += eps;
                xm.data[i] -= eps;
                let fd = (f(&mut a, &xp) - f(&mut a, &xm)) / (2.0 * eps);
                let rel = (fd - dx.data[i]).abs() / fd.abs().max(dx.data[i].abs()).max(1e-8);
                assert!(rel < 1e-4 || (fd - dx.data[i]).abs() < 1e-9, "layers {layers} idx {i}: {fd} vs {}", dx.data[i]);
            }
        }
    }
}
