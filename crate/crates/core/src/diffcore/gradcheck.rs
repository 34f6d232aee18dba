use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Number of coordinates probed; all coordinates when fewer exist.
    pub samples: usize,
    /// Denominator floor of the relative error, so near-zero gradients are
    /// compared absolutely at this scale.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples: 50,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinate with the largest error: (parameter name, flat index, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
}

fn eval<F>(params: &ParamSet, f: &F, detached: &[Vec<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::replaying(params, detached.to_vec());
    let loss = f(&mut g)?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// finite differences `(f(x+eps) - f(x-eps)) / 2eps` on a random subsample of
/// the coordinates of every parameter accepted by `select`.
///
/// Stop-gradient outputs are recorded on the unperturbed pass and replayed on
/// the perturbed ones, so detached branches are constants for the difference
/// quotient exactly as they are for the backward pass.
pub fn grad_check<F, S>(
    params: &mut ParamSet,
    select: S,
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
    S: Fn(&str) -> bool,
{
    let (analytic, detached): (Vec<(ParamId, Vec<f64>)>, Vec<Vec<f64>>) = {
        let mut g = Graph::recording(params);
        let loss = f(&mut g)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::Numeric("objective is not finite".into()));
        }
        let grads = g.backward(loss)?.into_params();
        (grads, g.take_recorded())
    };

    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for (id, name, t) in params.iter() {
        if select(name) {
            coords.extend((0..t.numel()).map(|i| (id, i)));
        }
    }
    if coords.is_empty() {
        return Err(Error::State(
            "no parameters selected for gradient check".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let picked: Vec<(ParamId, usize)> = if coords.len() <= opts.samples {
        coords
    } else {
        let mut idx = sample(&mut rng, coords.len(), opts.samples).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (id, i) in picked {
        let a = analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g[i])
            .unwrap_or(0.0);
        let orig = params.get(id).data[i];
        params.get_mut(id).data[i] = orig + opts.eps;
        let plus = eval(params, &f, &detached);
        params.get_mut(id).data[i] = orig - opts.eps;
        let minus = eval(params, &f, &detached);
        params.get_mut(id).data[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * opts.eps);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((params.name(id).to_string(), i, a, numeric));
        }
    }
    Ok(report)
}
