use serde::{Deserialize, Serialize};

use crate::model::{Model, ParamClass, TensorInfo};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Which tensors the optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Trainable {
    #[default]
    All,
    /// Adapters, output-norm gains and every block used as a shared base.
    AdaptersNormsBases,
}

impl Trainable {
    pub fn allows(self, info: &TensorInfo, bases: &[usize]) -> bool {
        match self {
            Trainable::All => true,
            Trainable::AdaptersNormsBases => match info.class {
                ParamClass::AdapterA(_) | ParamClass::AdapterB(_) | ParamClass::OutputGamma => true,
                ParamClass::Projection(_) | ParamClass::NormGain => {
                    info.block.is_some_and(|b| bases.contains(&b))
                }
                _ => false,
            },
        }
    }
}

/// One Adam update over a flat slice, with bias correction for step `t` (1-based).
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64) {
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        param[i] -= lr * mh / (vh.sqrt() + EPS);
    }
}

/// Adam state shaped like the model it optimises.
#[derive(Debug, Clone)]
pub struct Adam {
    pub step: u64,
    m: Model,
    v: Model,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        Adam {
            step: 0,
            m: model.zeros_like(),
            v: model.zeros_like(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Model, lr: f64, trainable: Trainable) {
        self.step += 1;
        let t = self.step;
        let bases = model.shared_bases();
        let g = grads.tensors();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        let p = model.tensors_mut();
        assert_eq!(p.len(), g.len(), "gradient structure differs from model");
        for (((p, g), m), v) in p.into_iter().zip(g).zip(m).zip(v) {
            debug_assert_eq!(p.0.name, g.0.name);
            if !trainable.allows(&p.0, &bases) {
                continue;
            }
            debug_assert!(g.1.iter().all(|x| x.is_finite()));
            adam_update(p.1, g.1, m.1, v.1, lr, t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn zero_grads_leave_params() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 1,
            d_ff: 4,
            vocab_size: 5,
            max_seq_len: 4,
            norm_eps: 1e-5,
        };
        let mut m = Model::init_random(cfg, 0).unwrap();
        let before = m.clone();
        let mut opt = Adam::new(&m);
        let g = m.zeros_like();
        opt.step(&mut m, &g, 0.1, Trainable::All);
        opt.step(&mut m, &g, 0.1, Trainable::All);
        assert_eq!(m, before);
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = (x - 3)^2, minimum at 3
        let mut x = [0.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        for t in 1..=2000 {
            let g = [2.0 * (x[0] - 3.0)];
            adam_update(&mut x, &g, &mut m, &mut v, 0.05, t);
        }
        assert!((x[0] - 3.0).abs() <= 1e-6, "{}", x[0]);
    }
}
