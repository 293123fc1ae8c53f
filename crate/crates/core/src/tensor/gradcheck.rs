use rand::seq::index::sample;
use rand::Rng;

use super::params::ParamStore;
use super::tape::{Result, Tape, Var};
use crate::Scalar;

const EPS: f64 = 1e-4;

fn rel_err<T: Scalar>(ad: T, fd: T) -> T {
    (ad - fd).abs() / fd.abs().max(T::one())
}

/// Compares the tape gradient of `f` at `x` with central differences and
/// returns `max |g_ad - g_fd| / max(1, |g_fd|)` over all components.
pub fn grad_check<T, F>(f: F, x: &[T], shape: &[usize]) -> Result<T>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let xv = tape.var(x.to_vec(), shape)?;
    let y = f(&tape, xv)?;
    let grads = y.backward()?;
    let analytic = grads.get(xv).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); x.len()]);
    let eval = |point: Vec<T>| -> Result<T> {
        let tape = Tape::new();
        let xv = tape.constant(point, shape)?;
        Ok(f(&tape, xv)?.scalar_value())
    };
    let eps = T::lit(EPS);
    let mut worst = T::zero();
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += eps;
        let mut minus = x.to_vec();
        minus[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (eps + eps);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    Ok(worst)
}

/// Result of checking every trainable parameter of a store.
#[derive(Debug, Clone)]
pub struct ParamCheck<T> {
    pub max_error: T,
    /// Worst error per parameter name.
    pub per_param: Vec<(String, T)>,
}

/// Central-difference check of `f` with respect to the trainable entries of
/// `store`. With `per_param = Some(k)`, at most `k` randomly chosen
/// components of each parameter are perturbed.
pub fn grad_check_params<T, F, R>(store: &mut ParamStore<T>, f: F, per_param: Option<usize>, rng: &mut R) -> Result<ParamCheck<T>>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &'t ParamStore<T>) -> Result<Var<'t, T>>,
    R: Rng,
{
    grad_check_params_step(store, f, per_param, T::lit(EPS), rng)
}

/// [`grad_check_params`] with an explicit difference step. Deep ReLU
/// networks have kinks close to most points; a smaller step keeps them
/// outside the stencil.
pub fn grad_check_params_step<T, F, R>(store: &mut ParamStore<T>, f: F, per_param: Option<usize>, eps: T, rng: &mut R) -> Result<ParamCheck<T>>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &'t ParamStore<T>) -> Result<Var<'t, T>>,
    R: Rng,
{
    store.zero_grad();
    {
        let tape = Tape::new();
        let y = f(&tape, store)?;
        y.backward()?.accumulate_into(store);
    }
    let eval = |store: &ParamStore<T>| -> Result<T> {
        let tape = Tape::new();
        Ok(f(&tape, store)?.scalar_value())
    };
    let mut per = Vec::new();
    let mut worst = T::zero();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.get(id).value.len();
        let picks: Vec<usize> = match per_param {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut local = T::zero();
        for i in picks {
            let orig = store.get(id).value[i];
            store.get_mut(id).value[i] = orig + eps;
            let up = eval(store)?;
            store.get_mut(id).value[i] = orig - eps;
            let down = eval(store)?;
            store.get_mut(id).value[i] = orig;
            let fd = (up - down) / (eps + eps);
            local = local.max(rel_err(store.get(id).grad[i], fd));
        }
        worst = worst.max(local);
        per.push((store.get(id).name.clone(), local));
    }
    store.zero_grad();
    Ok(ParamCheck { max_error: worst, per_param: per })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_checks_clean() {
        let err = grad_check(|_, x| Ok(x.mul(x)?.sum()), &[1.0f64, 2.0], &[2]).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at a kink is the classic disagreement
        let err = grad_check(|_, x| Ok(x.relu().sum()), &[0.0f64], &[1]).unwrap();
        assert!(err > 0.4);
    }
}
