//! Adam optimizer over a fixed list of parameter tensors.

use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction. One instance owns the moment buffers for a
/// fixed parameter list; `step` must always be called with the same tensors
/// in the same order.
pub struct Adam {
    lr: f32,
    beta1: f64,
    beta2: f64,
    eps: f32,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(param_sizes: &[usize], lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    /// Replaces the learning rate, used by schedules between steps.
    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients stored on the tensors.
    /// Parameters without a gradient buffer are an error; call
    /// `zero_grad`/`accumulate_grad` first.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer built for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;

        for (idx, p) in params.iter_mut().enumerate() {
            let n = p.numel();
            if self.m[idx].len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {idx} has {n} elements, optimizer state has {}",
                    self.m[idx].len()
                )));
            }
            let g: Vec<f32> = match p.grad() {
                Some(g) => g.to_vec(),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "parameter {idx} has no gradient"
                    )))
                }
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = p.data_mut();
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                data[i] -= (self.lr as f64 * mhat / (vhat.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f32) -> f32 {
    let mut total = 0.0f64;
    for p in params.iter() {
        if let Some(g) = p.grad() {
            total += g.iter().map(|&x| (x as f64).powi(2)).sum::<f64>();
        }
    }
    let norm = total.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_parameter_by_roughly_lr() {
        // With bias correction, the first Adam update is
        // -lr * g / (|g| + eps), i.e. close to -lr * sign(g).
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
        p.zero_grad();
        p.accumulate_grad(&[0.5]);
        let mut opt = Adam::new(&[1], 0.1);
        opt.step(&mut [&mut p]).unwrap();
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn descends_a_quadratic() {
        // f(x) = (x - 3)^2 from x = 0.
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut opt = Adam::new(&[1], 0.05);
        for _ in 0..2000 {
            let g = 2.0 * (p.data()[0] - 3.0);
            p.zero_grad();
            p.accumulate_grad(&[g]);
            opt.step(&mut [&mut p]).unwrap();
        }
        assert!((p.data()[0] - 3.0).abs() < 1e-2, "x = {}", p.data()[0]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let mut opt = Adam::new(&[2], 0.1);
        assert!(opt.step(&mut [&mut p]).is_err());
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut a = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let mut b = Tensor::new(vec![1], vec![0.0]).unwrap();
        a.zero_grad();
        a.accumulate_grad(&[3.0, 0.0]);
        b.zero_grad();
        b.accumulate_grad(&[4.0]);
        let norm = clip_grad_norm(&mut [&mut a, &mut b], 1.0);
        assert!((norm - 5.0).abs() < 1e-6);
        let total: f32 = a.grad().unwrap().iter().chain(b.grad().unwrap()).map(|g| g * g).sum();
        assert!((total.sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut a = Tensor::new(vec![1], vec![0.0]).unwrap();
        a.zero_grad();
        a.accumulate_grad(&[0.25]);
        clip_grad_norm(&mut [&mut a], 1.0);
        assert_eq!(a.grad().unwrap()[0], 0.25);
    }
}
