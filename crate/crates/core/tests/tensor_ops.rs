//! Every differentiable op against central finite differences, plus the
//! numerical properties of softmax and batch norm.

use poly_core::tensor::{grad_check, grad_check_params, ParamStore, Result, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// Values bounded away from zero so ReLU/max-pool/clamp kinks are never
/// within a finite-difference step.
fn away_from_kinks(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let mag = 0.1 + 0.05 * i as f64 + rng.random_range(0.0..0.01);
            if rng.random_bool(0.5) { mag } else { -mag }
        })
        .collect()
}

/// A fixed projection so the checked scalar depends on every output.
fn project<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let n = y.with_value(|v| v.len());
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
    let w = tape.constant(w, &y.shape())?;
    Ok(y.mul(w)?.sum())
}

fn check<F>(name: &str, shape: &[usize], gen: fn(&mut ChaCha8Rng, usize) -> Vec<f64>, f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    let n: usize = shape.iter().product();
    for point in 0..3 {
        let x = gen(&mut rng, n);
        let err = grad_check(|t, v| project(t, f(t, v)?), &x, shape).unwrap();
        assert!(err < TOL, "{name} at point {point}: relative error {err}");
    }
}

#[test]
fn elementwise_ops() {
    check("add", &[2, 3], random, |t, x| x.add(t.constant(vec![0.5; 6], &[2, 3])?));
    check("sub", &[2, 3], random, |t, x| t.constant(vec![0.5; 6], &[2, 3])?.sub(x));
    check("mul_self", &[4], random, |_, x| x.mul(x));
    check("scale", &[3], random, |_, x| Ok(x.scale(-2.5)));
    check("add_scalar", &[3], random, |_, x| Ok(x.add_scalar(4.0)));
    check("relu", &[6], away_from_kinks, |_, x| Ok(x.relu()));
    check("sigmoid", &[5], random, |_, x| Ok(x.sigmoid()));
    check("exp", &[5], random, |_, x| Ok(x.exp()));
    check("log", &[5], random, |_, x| Ok(x.mul(x)?.add_scalar(0.5).log()));
    check("clamp", &[6], away_from_kinks, |_, x| Ok(x.clamp(-0.3, 0.3)));
}

#[test]
fn reductions_and_shapes() {
    check("sum", &[2, 3], random, |_, x| Ok(x.sum()));
    check("mean", &[2, 3], random, |_, x| Ok(x.mean()));
    check("reshape", &[2, 3], random, |_, x| x.reshape(&[3, 2]));
    check("narrow", &[3, 4], random, |_, x| x.narrow(1, 1, 2));
    check("concat_axis0", &[2, 3], random, |t, x| t.concat(&[x, x.scale(2.0)], 0));
    check("concat_axis1", &[2, 3], random, |t, x| {
        let c = t.constant(vec![1.0; 4], &[2, 2])?;
        t.concat(&[c, x, x], 1)
    });
}

#[test]
fn softmax_family() {
    check("softmax", &[3, 4], random, |_, x| x.softmax());
    check("log_softmax", &[3, 4], random, |_, x| x.log_softmax());
    check("bce_with_logits", &[6], random, |_, x| x.bce_with_logits(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]));
}

#[test]
fn linear_algebra() {
    let w: Vec<f64> = (0..12).map(|i| (i as f64 - 6.0) / 7.0).collect();
    check("matmul_lhs", &[2, 3], random, move |t, x| x.matmul(t.constant(w.clone(), &[3, 4])?));
    let a: Vec<f64> = (0..6).map(|i| (i as f64 - 2.0) / 3.0).collect();
    check("matmul_rhs", &[3, 4], random, move |t, x| t.constant(a.clone(), &[2, 3])?.matmul(x));
    check("add_row_bias", &[3], random, |t, b| t.constant(vec![0.3; 6], &[2, 3])?.add_row(b));
    check("linear", &[3, 2], random, |t, x| {
        let w = t.constant(vec![1.0, 0.5, -0.5, 2.0], &[2, 2])?;
        let b = t.constant(vec![0.25, -0.75], &[2])?;
        x.linear(w, Some(b))
    });
}

#[test]
fn indexing_ops() {
    check("gather_rows", &[4, 3], random, |_, x| x.gather_rows(&[3, 0, 3, 1]));
    check("scatter_rows", &[4, 2], random, |_, x| x.scatter_rows(&[1, 0, 1, 2], None, 3));
    check("scatter_rows_weighted", &[4, 2], random, |_, x| x.scatter_rows(&[1, 0, 1, 2], Some(&[0.5, 2.0, -1.0, 0.25]), 3));
    check("pick_per_row", &[3, 4], random, |_, x| x.pick_per_row(&[2, 0, 3]));
}

#[test]
fn convolution_family() {
    let k: Vec<f64> = (0..2 * 3 * 3 * 3).map(|i| ((i * 5 % 13) as f64 - 6.0) / 10.0).collect();
    let kk = k.clone();
    check("conv2d_input", &[2, 3, 4, 5], random, move |t, x| x.conv2d(t.constant(kk.clone(), &[2, 3, 3, 3])?, None, 1, 1));
    check("conv2d_kernel", &[2, 3, 3, 3], random, |t, k| {
        let x: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| ((i * 3 % 17) as f64 - 8.0) / 9.0).collect();
        t.constant(x, &[2, 3, 4, 5])?.conv2d(k, None, 1, 1)
    });
    check("conv2d_bias_strided", &[2], random, move |t, b| {
        let x: Vec<f64> = (0..3 * 5 * 6).map(|i| ((i * 7 % 19) as f64 - 9.0) / 9.0).collect();
        t.constant(x, &[1, 3, 5, 6])?.conv2d(t.constant(k.clone(), &[2, 3, 3, 3])?, Some(b), 2, 0)
    });
    check("maxpool2d", &[2, 2, 4, 4], away_from_kinks, |_, x| x.maxpool2d(2));
    check("upsample_nearest", &[1, 2, 2, 3], random, |_, x| x.upsample_nearest(2));
}

#[test]
fn batch_norm_modes() {
    check("batch_norm_train_2d", &[5, 3], random, |t, x| {
        let g = t.constant(vec![1.5, 0.5, -1.0], &[3])?;
        let b = t.constant(vec![0.1, 0.2, 0.3], &[3])?;
        Ok(x.batch_norm_train(g, b, 1e-5)?.0)
    });
    check("batch_norm_train_4d", &[2, 2, 2, 3], random, |t, x| {
        let g = t.constant(vec![1.5, 0.5], &[2])?;
        let b = t.constant(vec![0.1, 0.2], &[2])?;
        Ok(x.batch_norm_train(g, b, 1e-5)?.0)
    });
    check("batch_norm_eval", &[4, 3], random, |t, x| {
        let g = t.constant(vec![1.5, 0.5, -1.0], &[3])?;
        let b = t.constant(vec![0.1, 0.2, 0.3], &[3])?;
        x.batch_norm_eval(g, b, &[0.2, -0.1, 0.0], &[1.0, 0.5, 2.0], 1e-5)
    });
}

#[test]
fn batch_norm_affine_parameters_check() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gamma = store.uniform("gamma", &[3], 1.0, &mut rng);
    let beta = store.uniform("beta", &[3], 1.0, &mut rng);
    let x = random(&mut rng, 12);
    let report = grad_check_params(
        &mut store,
        |t, s| {
            let xv = t.constant(x.clone(), &[4, 3])?;
            let y = xv.batch_norm_train(t.param(s, gamma), t.param(s, beta), 1e-5)?.0;
            project(t, y)
        },
        None,
        &mut rng,
    )
    .unwrap();
    assert!(report.max_error < TOL, "{report:?}");
    assert_eq!(report.per_param.len(), 2);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let tape = Tape::<f64>::new();
        let x: Vec<f64> = (0..4 * 131).map(|_| rng.random_range(-30.0..30.0)).collect();
        let y = tape.var(x, &[4, 131]).unwrap().softmax().unwrap().value();
        for row in y.chunks(131) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn batch_norm_training_output_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (rows, c) = (64, 3);
    let x: Vec<f64> = (0..rows * c).map(|_| rng.random_range(-20.0..20.0)).collect();
    let gamma = [2.0, 0.5, -1.5];
    let beta = [0.3, -1.0, 4.0];
    let tape = Tape::<f64>::new();
    let (y, stats) = tape
        .var(x, &[rows, c])
        .unwrap()
        .batch_norm_train(tape.constant(gamma.to_vec(), &[c]).unwrap(), tape.constant(beta.to_vec(), &[c]).unwrap(), 1e-5)
        .unwrap();
    assert_eq!(stats.count, rows);
    let y = y.value();
    for ch in 0..c {
        let col: Vec<f64> = (0..rows).map(|r| y[r * c + ch]).collect();
        let mean = col.iter().sum::<f64>() / rows as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        assert!((mean - beta[ch]).abs() < 1e-5, "channel {ch} mean {mean}");
        assert!((var - gamma[ch] * gamma[ch]).abs() < 1e-5, "channel {ch} var {var}");
    }
}

#[test]
fn repeated_backward_sums_into_store() {
    let mut store = ParamStore::<f64>::new();
    let w = store.insert("w", &[2], vec![1.0, 3.0], true);
    for _ in 0..2 {
        let tape = Tape::new();
        let v = tape.param(&store, w);
        v.mul(v).unwrap().sum().backward().unwrap().accumulate_into(&mut store);
    }
    assert_eq!(store.get(w).grad, vec![4.0, 12.0]);
    store.zero_grad();
    assert_eq!(store.get(w).grad, vec![0.0, 0.0]);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = random(&mut rng, 2 * 3 * 4 * 4);
        let k = random(&mut rng, 4 * 3 * 3 * 3);
        let tape = Tape::<f64>::new();
        let xv = tape.var(x, &[2, 3, 4, 4]).unwrap();
        let kv = tape.var(k, &[4, 3, 3, 3]).unwrap();
        let y = xv.conv2d(kv, None, 1, 1).unwrap().relu().maxpool2d(2).unwrap().softmax().unwrap();
        let loss = y.log().sum();
        let g = loss.backward().unwrap();
        (loss.scalar_value().to_bits(), g.get(kv).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn single_precision_path_runs() {
    let tape = Tape::<f32>::new();
    let x = tape.var(vec![0.0f32, 1.0, 2.0, 3.0], &[2, 2]).unwrap();
    let y = x.softmax().unwrap().value();
    assert!((y[0] + y[1] - 1.0).abs() < 1e-6);
}
