//! AdamW with linear warmup, cosine decay, and global-norm clipping.

use crate::tensor::{Real, Tensor};

/// Learning rate at `step` (0-based) of `total`: linear warmup over
/// `ceil(warmup_ratio·total)` steps, then cosine decay to zero.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// L2 norm over all gradients, accumulated in f64.
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| {
            let x = x.to_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Scale gradients so their global norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64(max_norm / (norm + 1e-6));
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Decoupled weight decay applies to matrices only, not norm gains.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::ZERO; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![T::ZERO; g.len()]).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let step_size = T::from_f64(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.shape().len() >= 2 {
                T::from_f64(1.0 - lr * self.weight_decay)
            } else {
                T::ONE
            };
            for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gr;
                *vi = b2 * *vi + one_b2 * gr * gr;
                *w *= decay;
                *w -= step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let total = 500;
        // ceil(0.01·500) = 5 warmup steps
        assert!((lr_at(0, total, 3e-4, 0.01) - 3e-4 / 5.0).abs() < 1e-15);
        assert!((lr_at(4, total, 3e-4, 0.01) - 3e-4).abs() < 1e-15);
        assert!((lr_at(5, total, 3e-4, 0.01) - 3e-4).abs() < 1e-15);
        assert!(lr_at(499, total, 3e-4, 0.01) < 1e-8);
        let mid = lr_at(5 + 495 / 2, total, 1.0, 0.01);
        assert!((mid - 0.5).abs() < 0.01);
        for s in 6..total {
            assert!(lr_at(s, total, 1.0, 0.01) <= lr_at(s - 1, total, 1.0, 0.01));
        }
        assert_eq!(lr_at(0, 1, 1.0, 0.0), 1.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap()];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
        let mut small = vec![Tensor::new(vec![1], vec![0.5f64]).unwrap()];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.5]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // With bias correction the first step is lr·sign(g) (up to eps).
        let mut w = Tensor::new(vec![3], vec![1.0f64, -1.0, 0.0]).unwrap();
        let g = vec![Tensor::new(vec![3], vec![0.2, -3.0, 1e-3]).unwrap()];
        let mut opt = AdamW::new(0.9, 0.95, 1e-12, 0.1);
        opt.step(&mut [&mut w], &g, 0.01);
        let expect = [0.99, -0.99, -0.01];
        for (a, b) in w.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn weight_decay_only_on_matrices() {
        let mut mat = Tensor::new(vec![1, 1], vec![2.0f64]).unwrap();
        let mut vec1 = Tensor::new(vec![1], vec![2.0f64]).unwrap();
        let zeros = vec![Tensor::zeros(&[1, 1]), Tensor::zeros(&[1])];
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.5);
        opt.step(&mut [&mut mat, &mut vec1], &zeros, 0.1);
        assert!((mat.data()[0] - 2.0 * 0.95).abs() < 1e-12);
        assert_eq!(vec1.data()[0], 2.0);
    }
}
