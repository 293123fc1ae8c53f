use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::graph::N_EDGE_TYPES;
use crate::tensor::{BatchStats, ParamId, ParamStore, Result, Tape, Var};
use crate::Scalar;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Per-pass state: the tape, the parameters it reads, the mode, and the
/// batch statistics collected by training-mode batch norms.
pub struct Ctx<'t, T> {
    pub tape: &'t Tape<T>,
    pub store: &'t ParamStore<T>,
    pub train: bool,
    cache: RefCell<HashMap<ParamId, Var<'t, T>>>,
    stats: RefCell<Vec<(BatchNorm, BatchStats<T>)>>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>, train: bool) -> Self {
        Ctx { tape, store, train, cache: RefCell::new(HashMap::new()), stats: RefCell::new(Vec::new()) }
    }

    /// The parameter as a tape variable, recorded once per pass.
    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        *self.cache.borrow_mut().entry(id).or_insert_with(|| self.tape.param(self.store, id))
    }

    pub(crate) fn take_stats(&self) -> Vec<(BatchNorm, BatchStats<T>)> {
        std::mem::take(&mut *self.stats.borrow_mut())
    }
}

fn bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(s: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = s.uniform(&format!("{name}.w"), &[fan_in, fan_out], bound(fan_in), rng);
        let b = bias.then(|| s.uniform(&format!("{name}.b"), &[fan_out], bound(fan_in), rng));
        Linear { w, b }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(ctx.p(self.w), self.b.map(|b| ctx.p(b)))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub k: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn new<T: Scalar, R: Rng>(s: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let fan_in = c_in * 9;
        let k = s.uniform(&format!("{name}.k"), &[c_out, c_in, 3, 3], bound(fan_in), rng);
        let b = s.uniform(&format!("{name}.b"), &[c_out], bound(fan_in), rng);
        Conv { k, b }
    }

    /// 3x3, stride 1, padding 1: spatial size is preserved.
    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(ctx.p(self.k), Some(ctx.p(self.b)), 1, 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(s: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        BatchNorm {
            gamma: s.constant(&format!("{name}.gamma"), &[c], 1.0),
            beta: s.constant(&format!("{name}.beta"), &[c], 0.0),
            mean: s.buffer(&format!("{name}.running_mean"), &[c], 0.0),
            var: s.buffer(&format!("{name}.running_var"), &[c], 1.0),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        if ctx.train {
            let (y, stats) = x.batch_norm_train(g, b, T::lit(BN_EPS))?;
            ctx.stats.borrow_mut().push((*self, stats));
            Ok(y)
        } else {
            let mean = &ctx.store.get(self.mean).value;
            let var = &ctx.store.get(self.var).value;
            x.batch_norm_eval(g, b, mean, var, T::lit(BN_EPS))
        }
    }

    /// Folds one batch into the running statistics (unbiased variance).
    pub fn update<T: Scalar>(&self, s: &mut ParamStore<T>, stats: &BatchStats<T>) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        let n = stats.count;
        let unbias = if n > 1 { T::from_usize_lossy(n) / T::from_usize_lossy(n - 1) } else { T::one() };
        for (r, &b) in s.get_mut(self.mean).value.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in s.get_mut(self.var).value.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

/// Edge arrays of a (possibly batched) graph in the form the GCN consumes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeIndex {
    pub src: Vec<usize>,
    /// `dst * N_EDGE_TYPES + type`: the aggregation bucket of each edge.
    pub bucket: Vec<usize>,
    pub dist_bin: Vec<usize>,
    /// `1 / in_degree(dst)`.
    pub weight: Vec<f64>,
}

/// One residual graph-convolution layer with per-edge-type message weights
/// and a learned embedding of the (binned) edge distance.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Gcn {
    pub self_lin: Linear,
    pub msg: ParamId,
    pub dist: ParamId,
    pub bn: Option<BatchNorm>,
}

impl Gcn {
    pub fn new<T: Scalar, R: Rng>(s: &mut ParamStore<T>, name: &str, d: usize, dist_bins: usize, batch_norm: bool, rng: &mut R) -> Self {
        let self_lin = Linear::new(s, &format!("{name}.self"), d, d, true, rng);
        let msg = s.uniform(&format!("{name}.msg.w"), &[N_EDGE_TYPES * d, d], bound(d), rng);
        let dist = s.normal(&format!("{name}.dist"), &[dist_bins, d], 1.0, rng);
        let bn = batch_norm.then(|| BatchNorm::new(s, &format!("{name}.bn"), d));
        Gcn { self_lin, msg, dist, bn }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, h: Var<'t, T>, edges: &EdgeIndex) -> Result<Var<'t, T>> {
        let shape = h.shape();
        let (v, d) = (shape[0], shape[1]);
        let messages = h.gather_rows(&edges.src)?.add(ctx.p(self.dist).gather_rows(&edges.dist_bin)?)?;
        let weights: Vec<T> = edges.weight.iter().map(|&w| T::lit(w)).collect();
        let agg = messages
            .scatter_rows(&edges.bucket, Some(&weights), v * N_EDGE_TYPES)?
            .reshape(&[v, N_EDGE_TYPES * d])?;
        let pre = self.self_lin.forward(ctx, h)?.add(agg.matmul(ctx.p(self.msg))?)?;
        let act = pre.relu();
        let act = match &self.bn {
            Some(bn) => bn.forward(ctx, act)?,
            None => act,
        };
        act.add(h)
    }
}
