use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

const TOL: f64 = 1e-4;

/// Weighted sum of `out` with fixed random weights so every output element
/// contributes a distinct sensitivity.
fn probe(g: &mut Graph, out: Var) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = g.input(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn check<F>(params: &mut ParamSet, what: &str, f: F)
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let r = grad_check(
        params,
        |_| true,
        |g| f(g).and_then(|o| probe(g, o)),
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.max_rel_error < TOL, "{what}: {r:?}");
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=8)
}

#[test]
fn primitives_pass_grad_check_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let (n, k, m) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::uniform(vec![n, k], 1.0, &mut rng))
            .unwrap();
        ps.insert("b", Tensor::uniform(vec![k, m], 1.0, &mut rng))
            .unwrap();
        ps.insert("c", Tensor::uniform(vec![n, k], 1.0, &mut rng))
            .unwrap();
        ps.insert("row", Tensor::uniform(vec![k], 1.0, &mut rng))
            .unwrap();
        ps.insert("gamma", Tensor::uniform(vec![k], 1.0, &mut rng))
            .unwrap();
        ps.insert("beta", Tensor::uniform(vec![k], 1.0, &mut rng))
            .unwrap();

        check(&mut ps, "matmul", |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.matmul(a, b)
        });
        check(&mut ps, "transpose", |g| {
            let a = g.param("a")?;
            g.transpose(a)
        });
        check(&mut ps, "add/sub/mul/scale", |g| {
            let (a, c) = (g.param("a")?, g.param("c")?);
            let s = g.add(a, c)?;
            let d = g.sub(s, c)?;
            let e = g.mul(d, c)?;
            g.scale(e, -1.7)
        });
        check(&mut ps, "add_row", |g| {
            let (a, r) = (g.param("a")?, g.param("row")?);
            g.add_row(a, r)
        });
        check(&mut ps, "gelu", |g| {
            let a = g.param("a")?;
            g.gelu(a)
        });
        check(&mut ps, "relu", |g| {
            let a = g.param("a")?;
            g.relu(a)
        });
        if k > 1 {
            check(&mut ps, "layer_norm", |g| {
                let (a, ga, be) = (g.param("a")?, g.param("gamma")?, g.param("beta")?);
                g.layer_norm(a, ga, be)
            });
        }
        check(&mut ps, "softmax", |g| {
            let a = g.param("a")?;
            g.softmax(a)
        });
        check(&mut ps, "embedding", |g| {
            let b = g.param("b")?;
            g.embedding(b, &[0, k - 1, 0])
        });
        let targets: Vec<Option<usize>> = (0..n)
            .map(|i| if i % 3 == 2 { None } else { Some(i % k) })
            .collect();
        check(&mut ps, "cross_entropy", |g| {
            let a = g.param("a")?;
            g.cross_entropy(a, &targets)
        });
        check(&mut ps, "mse", |g| {
            let (a, c) = (g.param("a")?, g.param("c")?);
            g.mse(a, c)
        });
        check(&mut ps, "concat", |g| {
            let (a, c) = (g.param("a")?, g.param("c")?);
            let r = g.concat_rows(&[a, c])?;
            let t = g.transpose(r)?;
            let tt = g.transpose(t)?;
            let cc = g.concat_cols(&[tt, r])?;
            g.reshape(cc, vec![2 * n * 2 * k])
        });
        check(&mut ps, "slice", |g| {
            let a = g.param("a")?;
            let s = g.slice_rows(a, n / 2, n)?;
            g.slice_cols(s, k / 2, k)
        });
        check(&mut ps, "mean/sum", |g| {
            let a = g.param("a")?;
            let m1 = g.mean(a)?;
            let s1 = g.sum(a)?;
            let both = g.mul(m1, s1)?;
            g.add(both, m1)
        });
    }
}

#[test]
fn conv_primitives_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let cin = dim(&mut rng);
        let cout = dim(&mut rng);
        let k = rng.random_range(1..=4);
        let s = rng.random_range(1..=3);
        let len = k + rng.random_range(0..=8);
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::uniform(vec![cin, len], 1.0, &mut rng))
            .unwrap();
        ps.insert("w", Tensor::uniform(vec![cout, cin, k], 1.0, &mut rng))
            .unwrap();
        ps.insert("wt", Tensor::uniform(vec![cin, cout, k], 1.0, &mut rng))
            .unwrap();
        ps.insert("b", Tensor::uniform(vec![cout], 1.0, &mut rng))
            .unwrap();
        check(&mut ps, "conv1d", |g| {
            let (x, w, b) = (g.param("x")?, g.param("w")?, g.param("b")?);
            g.conv1d(x, w, b, s)
        });
        check(&mut ps, "conv_transpose1d", |g| {
            let (x, w, b) = (g.param("x")?, g.param("wt")?, g.param("b")?);
            g.conv_transpose1d(x, w, b, s)
        });
    }
}

fn naive_conv1d(
    x: &[f64],
    cin: usize,
    len: usize,
    w: &[f64],
    cout: usize,
    k: usize,
    b: &[f64],
    s: usize,
) -> Vec<f64> {
    let mut out = Vec::new();
    for co in 0..cout {
        let mut t = 0;
        while t + k <= len {
            let mut acc = b[co];
            for ci in 0..cin {
                for j in 0..k {
                    acc += w[(co * cin + ci) * k + j] * x[ci * len + t + j];
                }
            }
            out.push(acc);
            t += s;
        }
    }
    out
}

#[test]
fn conv1d_matches_sliding_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (cin, cout) = (dim(&mut rng), dim(&mut rng));
        let k = rng.random_range(1..=6);
        let s = rng.random_range(1..=4);
        let len = k + rng.random_range(0..=30);
        let ps = {
            let mut ps = ParamSet::new();
            ps.insert("x", Tensor::uniform(vec![cin, len], 1.0, &mut rng))
                .unwrap();
            ps.insert("w", Tensor::uniform(vec![cout, cin, k], 1.0, &mut rng))
                .unwrap();
            ps.insert("b", Tensor::uniform(vec![cout], 1.0, &mut rng))
                .unwrap();
            ps
        };
        let mut g = Graph::new(&ps);
        let (x, w, b) = (
            g.param("x").unwrap(),
            g.param("w").unwrap(),
            g.param("b").unwrap(),
        );
        let y = g.conv1d(x, w, b, s).unwrap();
        assert_eq!(g.shape(y), &[cout, (len - k) / s + 1]);
        let oracle = naive_conv1d(
            &ps.by_name("x").unwrap().data,
            cin,
            len,
            &ps.by_name("w").unwrap().data,
            cout,
            k,
            &ps.by_name("b").unwrap().data,
            s,
        );
        for (a, o) in g.value(y).iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_transpose(y)> with the same kernel and zero bias.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (cin, cout, k, s, len) = (3, 4, 3, 2, 11);
    let lout = (len - k) / s + 1;
    let mut ps = ParamSet::new();
    ps.insert("x", Tensor::uniform(vec![cin, len], 1.0, &mut rng))
        .unwrap();
    ps.insert("y", Tensor::uniform(vec![cout, lout], 1.0, &mut rng))
        .unwrap();
    let w = Tensor::uniform(vec![cout, cin, k], 1.0, &mut rng);
    // Same kernel laid out as [c_in_of_transpose = cout, c_out = cin, k].
    ps.insert("w", w.clone()).unwrap();
    ps.insert(
        "wt",
        Tensor::new(vec![cout, cin, k], w.data.clone()).unwrap(),
    )
    .unwrap();
    ps.insert("bo", Tensor::zeros(vec![cout])).unwrap();
    ps.insert("bi", Tensor::zeros(vec![cin])).unwrap();
    let mut g = Graph::new(&ps);
    let (x, y, wv, wt, bo, bi) = (
        g.param("x").unwrap(),
        g.param("y").unwrap(),
        g.param("w").unwrap(),
        g.param("wt").unwrap(),
        g.param("bo").unwrap(),
        g.param("bi").unwrap(),
    );
    let cx = g.conv1d(x, wv, bo, s).unwrap();
    let ty = g.conv_transpose1d(y, wt, bi, s).unwrap();
    let lhs: f64 = g.value(cx).iter().zip(g.value(y)).map(|(a, b)| a * b).sum();
    let tyv = g.value(ty);
    let tl = g.shape(ty)[1];
    let mut rhs = 0.0;
    for ci in 0..cin {
        for t in 0..len.min(tl) {
            rhs += g.value(x)[ci * len + t] * tyv[ci * tl + t];
        }
    }
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut ps = ParamSet::new();
    ps.insert("x", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap())
        .unwrap();
    let mut g = Graph::new(&ps);
    let x = g.param("x").unwrap();
    let sg = g.stop_gradient(x).unwrap();
    assert_eq!(g.value(sg), g.value(x));
    let s = g.sum(sg).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.params()[0].1, vec![0.0; 3]);
}

#[test]
fn grad_check_through_stop_gradient_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamSet::new();
    ps.insert("a", Tensor::uniform(vec![3, 4], 1.0, &mut rng))
        .unwrap();
    ps.insert("b", Tensor::uniform(vec![3, 4], 1.0, &mut rng))
        .unwrap();
    // f = ||a - sg(b)||^2 + ||sg(a) * b||; only the non-blocked paths carry gradient.
    let f = |g: &mut Graph| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        let sb = g.stop_gradient(b)?;
        let sa = g.stop_gradient(a)?;
        let d = g.sub(a, sb)?;
        let d2 = g.mul(d, d)?;
        let t1 = g.sum(d2)?;
        let p = g.mul(sa, b)?;
        let t2 = g.sum(p)?;
        g.add(t1, t2)
    };
    // grad_check replays the detached values, so the blocked paths are
    // constants for the difference quotient too.
    let r = grad_check(&mut ps, |_| true, f, GradCheckOptions::default());
    assert!(r.unwrap().max_rel_error < 1e-6);

    // Without replay, finite differences see the full function and disagree.
    let mut g = Graph::new(&ps);
    let loss = f(&mut g).unwrap();
    let analytic_a = g.backward(loss).unwrap().params()[0].1[0];
    let a_id = ps.id("a").unwrap();
    let eps = 1e-5;
    let orig = ps.get(a_id).data[0];
    ps.get_mut(a_id).data[0] = orig + eps;
    let plus = {
        let mut g = Graph::new(&ps);
        let l = f(&mut g).unwrap();
        g.scalar(l)
    };
    ps.get_mut(a_id).data[0] = orig - eps;
    let minus = {
        let mut g = Graph::new(&ps);
        let l = f(&mut g).unwrap();
        g.scalar(l)
    };
    ps.get_mut(a_id).data[0] = orig;
    let numeric = (plus - minus) / (2.0 * eps);
    let b0 = ps.by_name("b").unwrap().data[0];
    assert!(((numeric - analytic_a) - b0).abs() < 1e-6);

    // Against a finite-difference oracle of the function with the blocked
    // operand held fixed, the analytic gradient matches.
    let b_fixed = ps.by_name("b").unwrap().clone();
    let mut only_a = ParamSet::new();
    only_a
        .insert("a", ps.by_name("a").unwrap().clone())
        .unwrap();
    let r = grad_check(
        &mut only_a,
        |_| true,
        |g| {
            let a = g.param("a")?;
            let b = g.input(b_fixed.shape.clone(), b_fixed.data.clone())?;
            let d = g.sub(a, b)?;
            let d2 = g.mul(d, d)?;
            g.sum(d2)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    let mut g = Graph::new(&ps);
    let loss = f(&mut g).unwrap();
    let analytic = g.backward(loss).unwrap();
    let ga = &analytic.params()[0].1;
    let a = &ps.by_name("a").unwrap().data;
    for i in 0..a.len() {
        assert!((ga[i] - 2.0 * (a[i] - b_fixed.data[i])).abs() < 1e-12);
    }
    assert!(r.max_rel_error < 1e-6);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let ps = ParamSet::new();
    let mut g = Graph::new(&ps);
    let x = g.input(vec![1, 3], vec![0.0; 3]).unwrap();
    let y = g.softmax(x).unwrap();
    for v in g.value(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln_v() {
    let ps = ParamSet::new();
    let mut g = Graph::new(&ps);
    let v = 50;
    let x = g.input(vec![4, v], vec![0.3; 4 * v]).unwrap();
    let l = g
        .cross_entropy(x, &[Some(0), Some(7), None, Some(49)])
        .unwrap();
    assert!((g.scalar(l) - (v as f64).ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_grad_check_on_logits_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut ps = ParamSet::new();
    ps.insert("w", Tensor::uniform(vec![6, 10], 1.0, &mut rng))
        .unwrap();
    ps.insert("h", Tensor::uniform(vec![5, 6], 1.0, &mut rng))
        .unwrap();
    let r = grad_check(
        &mut ps,
        |_| true,
        |g| {
            let (h, w) = (g.param("h")?, g.param("w")?);
            let logits = g.matmul(h, w)?;
            g.cross_entropy(logits, &[Some(1), Some(9), None, Some(0), Some(4)])
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn backward_twice_doubles_accumulated_gradient() {
    let mut ps = ParamSet::new();
    ps.insert("x", Tensor::new(vec![2], vec![1.5, -0.5]).unwrap())
        .unwrap();
    let grads = {
        let mut g = Graph::new(&ps);
        let x = g.param("x").unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap().into_params()
    };
    ps.accumulate(&grads).unwrap();
    let once = ps.grad(ps.id("x").unwrap()).unwrap().to_vec();
    ps.accumulate(&grads).unwrap();
    let twice = ps.grad(ps.id("x").unwrap()).unwrap().to_vec();
    assert_eq!(twice, once.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
}

#[test]
fn shape_errors_name_the_op() {
    let ps = ParamSet::new();
    let mut g = Graph::new(&ps);
    let a = g.input(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = g.input(vec![2, 3], vec![0.0; 6]).unwrap();
    match g.matmul(a, b) {
        Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn sgd_runs_are_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::uniform(vec![3, 3], 1.0, &mut rng))
            .unwrap();
        let mut traj = Vec::new();
        for _ in 0..5 {
            let grads = {
                let mut g = Graph::new(&ps);
                let w = g.param("w").unwrap();
                let y = g.gelu(w).unwrap();
                let l = g.mean(y).unwrap();
                g.backward(l).unwrap().into_params()
            };
            ps.accumulate(&grads).unwrap();
            ps.sgd_step(0.5, |_| true).unwrap();
            traj.push(ps.by_name("w").unwrap().data.clone());
        }
        traj
    };
    assert_eq!(run(), run());
}
