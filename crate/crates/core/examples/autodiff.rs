//! The reverse-mode engine on its own: a two-layer regression network,
//! a finite-difference check of its gradients and a few SGD steps.
//!
//!     cargo run --release --example autodiff

use dewave::diffcore::{grad_check, GradCheckOptions, Graph, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss(g: &mut Graph, x: &[f64], y: &[f64]) -> dewave::Result<Var> {
    let x = g.input(vec![16, 3], x.to_vec())?;
    let y = g.input(vec![16, 1], y.to_vec())?;
    let (w1, b1, w2) = (g.param("w1")?, g.param("b1")?, g.param("w2")?);
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h)?;
    let out = g.matmul(h, w2)?;
    g.mse(out, y)
}

fn main() -> dewave::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamSet::new();
    ps.insert("w1", Tensor::uniform(vec![3, 8], 0.5, &mut rng))?;
    ps.insert("b1", Tensor::zeros(vec![8]))?;
    ps.insert("w2", Tensor::uniform(vec![8, 1], 0.5, &mut rng))?;
    let x: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x.chunks(3).map(|r| r[0] * r[1] - 0.5 * r[2]).collect();

    let report = grad_check(
        &mut ps,
        |_| true,
        |g| loss(g, &x, &y),
        GradCheckOptions::default(),
    )?;
    println!(
        "gradient check: max relative error {:.2e} over {} coordinates",
        report.max_rel_error, report.checked
    );

    for step in 0..=200 {
        let (value, grads) = {
            let mut g = Graph::new(&ps);
            let l = loss(&mut g, &x, &y)?;
            (g.scalar(l), g.backward(l)?.into_params())
        };
        if step % 50 == 0 {
            println!("step {step:>3}  loss {value:.5}");
        }
        ps.accumulate(&grads)?;
        ps.sgd_step(0.2, |_| true)?;
    }
    Ok(())
}
