use crate::tensor::Tensor;

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.m
    }

    /// Applies one update. Returns the index of the first parameter with a
    /// non-finite gradient, leaving every parameter untouched, if any.
    pub fn step(
        &mut self,
        params: &mut [Tensor<f32>],
        grads: &[&Tensor<f32>],
    ) -> Result<(), usize> {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(i);
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.learning_rate / c1) as f32;
        let inv_c2 = (1.0 / c2) as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            assert_eq!(p.shape(), g.shape());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = [Tensor::full(Shape::SCALAR, 0.7f32)];
        let g = Tensor::zeros(Shape::SCALAR);
        let mut adam = Adam::new(0.01, 0.9, 0.999, 1e-8);
        adam.step(&mut p, &[&g]).unwrap();
        assert_eq!(p[0].item(), 0.7);
    }

    #[test]
    fn first_step_is_learning_rate_times_sign() {
        for grad in [3.0f32, -0.002] {
            let mut p = [Tensor::full(Shape::SCALAR, 1.0f32)];
            let g = Tensor::full(Shape::SCALAR, grad);
            let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
            adam.step(&mut p, &[&g]).unwrap();
            let moved = p[0].item() as f64 - 1.0;
            assert!((moved + 0.1 * grad.signum() as f64).abs() < 1e-5, "{moved}");
        }
    }

    #[test]
    fn non_finite_gradient_is_refused() {
        let mut p = [
            Tensor::full(Shape::SCALAR, 1.0f32),
            Tensor::full(Shape::SCALAR, 1.0),
        ];
        let ok = Tensor::full(Shape::SCALAR, 1.0);
        let bad = Tensor::full(Shape::SCALAR, f32::NAN);
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
        assert_eq!(adam.step(&mut p, &[&ok, &bad]), Err(1));
        assert_eq!(p[0].item(), 1.0);
    }
}
