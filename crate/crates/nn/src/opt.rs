//! Adam optimizer driven by the [`Params`](crate::Params) visitor.

use ndarray::ArrayD;

use crate::param::Params;

/// Adam with bias correction. First- and second-moment slots are allocated
/// lazily on the first step and indexed by visit order, which is stable by
/// contract of the `Params` trait.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    slots: Vec<(ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: Vec::new(),
        }
    }

    /// Applies one update using the gradients currently accumulated in the
    /// network. Does not clear them.
    pub fn step(&mut self, net: &mut dyn Params) {
        self.t += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let slots = &mut self.slots;
        let mut idx = 0;
        net.visit_params(&mut |name, mut v, g| {
            if idx == slots.len() {
                slots.push((ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            }
            let (m, s) = &mut slots[idx];
            assert_eq!(
                m.shape(),
                g.shape(),
                "optimizer slot shape changed for parameter {name}"
            );
            ndarray::Zip::from(&mut *m).and(&g).for_each(|m, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
            });
            ndarray::Zip::from(&mut *s).and(&g).for_each(|s, &g| {
                *s = b2 * *s + (1.0 - b2) * g * g;
            });
            ndarray::Zip::from(&mut v).and(&*m).and(&*s).for_each(|v, &m, &s| {
                *v -= lr * (m / bc1) / ((s / bc2).sqrt() + eps);
            });
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{zero_grads, Param, Params};
    use ndarray::{arr1, ArrayViewMutD};

    struct Quad {
        x: Param<ndarray::Ix1>,
    }

    impl Params for Quad {
        fn visit_params(
            &mut self,
            f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
        ) {
            self.x.visit("x", f);
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut net = Quad {
            x: Param::new(arr1(&[5.0, -3.0])),
        };
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            zero_grads(&mut net);
            let g = net.x.v.mapv(|v| 2.0 * v);
            net.x.g.assign(&g);
            opt.step(&mut net);
        }
        assert!(net.x.v.iter().all(|v| v.abs() < 1e-3), "{:?}", net.x.v);
    }

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        // With bias correction the very first Adam step is lr * sign(g).
        let mut net = Quad {
            x: Param::new(arr1(&[1.0, 1.0])),
        };
        net.x.g.assign(&arr1(&[0.3, -0.7]));
        let mut opt = Adam::new(0.01);
        opt.step(&mut net);
        assert!((net.x.v[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((net.x.v[1] - (1.0 + 0.01)).abs() < 1e-6);
    }
}
