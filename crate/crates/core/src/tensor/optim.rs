use super::params::ParamStore;
use crate::Scalar;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self::with_hyper(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
        Adam { beta1: T::lit(beta1), beta2: T::lit(beta2), eps: T::lit(eps), t: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update from the gradients currently held by `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: T) {
        self.t += 1;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", &[2], vec![1.0, -1.0], true);
        store.get_mut(id).grad = vec![0.5, -3.0];
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 0.1);
        let v = &store.get(id).value;
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn buffers_are_left_alone() {
        let mut store = ParamStore::<f64>::new();
        let id = store.buffer("running_mean", &[1], 2.0);
        store.get_mut(id).grad = vec![1.0];
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 0.1);
        assert_eq!(store.get(id).value, vec![2.0]);
    }
}
