//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::{cst, Checkpoint, Float, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Weight decay applies to matrices and kernels only, not to biases,
/// norm parameters or the relative-position tables.
pub fn decays(name: &str, ndim: usize) -> bool {
    name.ends_with(".weight") && ndim >= 2
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn write_into(&self, store: &ParamStore<T>, ck: &mut Checkpoint) {
        for (id, p) in store.iter() {
            ck.insert(format!("adam.m.{}", p.name), &self.m[id.index()]);
            ck.insert(format!("adam.v.{}", p.name), &self.v[id.index()]);
        }
    }

    pub fn read_from(store: &ParamStore<T>, ck: &Checkpoint, step: u64) -> Result<Self> {
        let mut s = Self::new(store);
        for (id, p) in store.iter() {
            for (prefix, slot) in [("adam.m", &mut s.m), ("adam.v", &mut s.v)] {
                let key = format!("{prefix}.{}", p.name);
                let t: Tensor<T> = ck.get(&key)?;
                if t.shape() != p.value().shape() {
                    return Err(Error::Checkpoint(format!("{key}: shape {:?} != {:?}", t.shape(), p.value().shape())));
                }
                slot[id.index()] = t;
            }
        }
        s.step = step;
        Ok(s)
    }
}

/// One update from the gradients currently accumulated in `store`.
/// Parameters without a gradient are left untouched (their moments too).
pub fn adam_step<T: Float>(store: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cst::<T>(cfg.beta1), cst::<T>(cfg.beta2));
    let (one, eps) = (T::one(), cst::<T>(cfg.eps));
    let (step_size, bc2_sqrt) = (cst::<T>(cfg.lr / bc1), cst::<T>(bc2.sqrt()));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if p.grad().is_none() {
            continue;
        }
        let decay = if decays(&p.name, p.value().ndim()) {
            cst::<T>(1.0 - cfg.lr * cfg.weight_decay)
        } else {
            one
        };
        let i = id.index();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let (w, grad) = p.value_and_grad();
        let (w, grad) = (w.data_mut(), grad.expect("checked above").data());
        for k in 0..w.len() {
            let g = grad[k];
            m[k] = b1 * m[k] + (one - b1) * g;
            v[k] = b2 * v[k] + (one - b2) * g * g;
            let denom = v[k].sqrt() / bc2_sqrt + eps;
            w[k] = w[k] * decay - step_size * m[k] / denom;
        }
    }
}

/// Linear warmup to `base` over `warmup` steps, constant afterwards.
pub fn lr_at(base: f64, warmup: usize, step: u64) -> f64 {
    if warmup == 0 || step as usize >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Float>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let n = store.grad_norm();
    if max_norm > 0.0 && n > max_norm {
        store.scale_grads(max_norm / (n + 1e-6));
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w.weight", Tensor::scalar(p)).unwrap();
        s.get_mut(id).set_grad(Some(Tensor::scalar(g)));
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar_store(1.5, 0.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &AdamConfig::default());
        assert_eq!(s.iter().next().unwrap().1.value().data()[0], 1.5);
    }

    #[test]
    fn single_step_by_hand() {
        // m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25
        // p = 1 - 0.1 * 0.5 / (0.5 + 1e-8)
        let mut s = scalar_store(1.0, 0.5);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        adam_step(&mut s, &mut st, &cfg);
        let p = s.iter().next().unwrap().1.value().data()[0];
        assert!((p - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((st.m[0].data()[0] - 0.05).abs() < 1e-15);
        assert!((st.v[0].data()[0] - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn decay_only_hits_matrices() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("lin.weight", Tensor::full(&[2, 2], 1.0)).unwrap();
        let b = s.add("lin.bias", Tensor::full(&[2], 1.0)).unwrap();
        let n = s.add("norm.weight", Tensor::full(&[2], 1.0)).unwrap();
        for id in [w, b, n] {
            let shape = s.get(id).value().shape().to_vec();
            s.get_mut(id).set_grad(Some(Tensor::zeros(&shape)));
        }
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        adam_step(&mut s, &mut st, &cfg);
        assert!((s.get(w).value().data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(s.get(b).value().data()[0], 1.0);
        assert_eq!(s.get(n).value().data()[0], 1.0);
    }

    #[test]
    fn resumed_state_matches_uninterrupted_steps() {
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let mut a = scalar_store(1.0, 0.3);
        let mut sa = AdamState::new(&a);
        adam_step(&mut a, &mut sa, &cfg);
        let mut ck = Checkpoint::new();
        sa.write_into(&a, &mut ck);
        let bytes = crate::tensor::write_checkpoint(&ck).unwrap();
        let ck = crate::tensor::read_checkpoint(&bytes).unwrap();
        let mut b = a.clone();
        let mut sb = AdamState::read_from(&b, &ck, sa.step).unwrap();
        adam_step(&mut a, &mut sa, &cfg);
        adam_step(&mut b, &mut sb, &cfg);
        assert_eq!(a.iter().next().unwrap().1.value(), b.iter().next().unwrap().1.value());
        assert_eq!(sa, sb);
    }

    #[test]
    fn warmup_and_clipping() {
        assert_eq!(lr_at(1.0, 4, 0), 0.25);
        assert_eq!(lr_at(1.0, 4, 3), 1.0);
        assert_eq!(lr_at(1.0, 4, 100), 1.0);
        let mut s = scalar_store(0.0, 30.0);
        let before = clip_grad_norm(&mut s, 5.0);
        assert_eq!(before, 30.0);
        assert!((s.grad_norm() - 5.0).abs() < 1e-5);
    }
}
