//! Plain SGD with momentum, the only optimizer used anywhere.

use crate::autodiff::Tensor;

/// Textbook momentum recurrence: v <- mu*v + g, p <- p - lr*v.
/// A parameter without an allocated gradient buffer contributes g = 0.
pub struct Sgd {
    params: Vec<Tensor>,
    velocity: Vec<Vec<f64>>,
    lr: f64,
    momentum: f64,
}

impl Sgd {
    pub fn new(params: Vec<Tensor>, lr: f64, momentum: f64) -> Sgd {
        let velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Sgd { params, velocity, lr, momentum }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self) {
        for (param, v) in self.params.iter().zip(self.velocity.iter_mut()) {
            let (lr, mu) = (self.lr, self.momentum);
            param.update(|data, grad| {
                for k in 0..data.len() {
                    let g = grad.map_or(0.0, |g| g[k]);
                    v[k] = mu * v[k] + g;
                    data[k] -= lr * v[k];
                }
            });
        }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng;

    #[test]
    fn two_steps_match_hand_recurrence() {
        let p = Tensor::from_vec(vec![1.0, -2.0, 0.5], &[3]).unwrap().requires_grad(true);
        let mut opt = Sgd::new(vec![p.clone()], 0.1, 0.9);

        // Loss sum(p*p) has gradient 2p; replay the recurrence by hand.
        let mut hand = vec![1.0, -2.0, 0.5];
        let mut vel = vec![0.0; 3];
        for _ in 0..2 {
            let tape = Tape::new();
            let loss = tape.sum(&tape.mul(&p, &p).unwrap()).unwrap();
            opt.zero_grads();
            tape.backward(&loss).unwrap();
            opt.step();
            for k in 0..3 {
                vel[k] = 0.9 * vel[k] + 2.0 * hand[k];
                hand[k] -= 0.1 * vel[k];
            }
        }
        assert_eq!(p.data_vec(), hand);
    }

    #[test]
    fn missing_gradient_acts_as_zero() {
        let p = Tensor::from_vec(vec![4.0], &[1]).unwrap().requires_grad(true);
        let mut opt = Sgd::new(vec![p.clone()], 0.5, 0.9);
        opt.step();
        assert_eq!(p.data_vec(), vec![4.0]);
    }

    #[test]
    fn lr_changes_apply_to_later_steps() {
        let mut rng = rng::stream(3, &["optim"]);
        let p = Tensor::from_vec(vec![rng::unit_f64(&mut rng)], &[1]).unwrap().requires_grad(true);
        let start = p.data_vec()[0];
        let mut opt = Sgd::new(vec![p.clone()], 1.0, 0.0);
        let tape = Tape::new();
        let loss = tape.sum(&p).unwrap();
        opt.zero_grads();
        tape.backward(&loss).unwrap();
        opt.set_lr(0.25);
        opt.step();
        assert_eq!(p.data_vec()[0], start - 0.25);
    }
}
