use super::tensor::Param;

/// Adaptive-moment gradient descent with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0 }
    }

    /// One update over every trainable param in `params`; gradients are left untouched.
    pub fn step(&mut self, params: Vec<&mut Param>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = self.lr / bc1;
        for p in params.into_iter().filter(|p| p.trainable) {
            if p.slot_a.len() != p.len() {
                p.slot_a = vec![0.0; p.len()];
                p.slot_b = vec![0.0; p.len()];
            }
            for i in 0..p.len() {
                let g = p.grad[i];
                p.slot_a[i] = self.beta1 * p.slot_a[i] + (1.0 - self.beta1) * g;
                p.slot_b[i] = self.beta2 * p.slot_b[i] + (1.0 - self.beta2) * g * g;
                let denom = (p.slot_b[i] / bc2).sqrt() + self.eps;
                p.value[i] -= step_size * p.slot_a[i] / denom;
            }
        }
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self { lr, momentum, weight_decay }
    }

    pub fn step(&mut self, params: Vec<&mut Param>) {
        for p in params.into_iter().filter(|p| p.trainable) {
            if p.slot_a.len() != p.len() {
                p.slot_a = vec![0.0; p.len()];
            }
            for i in 0..p.len() {
                let g = p.grad[i] + self.weight_decay * p.value[i];
                p.slot_a[i] = self.momentum * p.slot_a[i] + g;
                p.value[i] -= self.lr * p.slot_a[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Param::new("p", vec![2], vec![1.0, -1.0]);
        p.grad = vec![0.5, -3.0];
        Adam::new(0.1).step(vec![&mut p]);
        assert!((p.value[0] - 0.9).abs() < 1e-6);
        assert!((p.value[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn buffers_are_not_stepped() {
        let mut p = Param::buffer("b", vec![1], vec![2.0]);
        p.grad = vec![1.0];
        Sgd::new(0.1, 0.9, 0.0).step(vec![&mut p]);
        assert_eq!(p.value, vec![2.0]);
    }
}
