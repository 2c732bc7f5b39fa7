//! Central finite-difference gradient checks.
//!
//! Test support: the checks run a forward closure twice per perturbed entry
//! and compare against one analytic backward pass.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so near-zero gradients compare on
/// an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, label: impl FnOnce() -> String, a: f64, n: f64) {
        self.checked += 1;
        let e = rel_err(a, n);
        if e >= self.max_rel_err {
            self.max_rel_err = e;
            self.worst = format!("{} analytic {a:.6e} numeric {n:.6e}", label());
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Reduces a non-scalar output to a scalar with fixed random weights.
pub fn random_projection(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let w = Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum_all(p))
}

/// Checks the gradient of `forward` (reduced to a scalar) with respect to the
/// listed parameters. At most `max_per_param` entries per parameter are
/// perturbed, chosen deterministically.
pub fn check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    max_per_param: usize,
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let out = forward(&mut g)?;
        let l = random_projection(&mut g, out, 0x5eed)?;
        Ok(g.value(l).data()[0])
    };
    let analytic = {
        let mut g = Graph::new(store);
        let out = forward(&mut g)?;
        let l = random_projection(&mut g, out, 0x5eed)?;
        g.backward(l)?.into_params()
    };
    let mut report = GradCheckReport::default();
    let mut pick = ChaCha8Rng::seed_from_u64(17);
    for &id in ids {
        let n = store.value(id).len();
        let idx: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            (0..max_per_param).map(|_| pick.gen_range(0..n)).collect()
        };
        for j in idx {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + DEFAULT_STEP;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig - DEFAULT_STEP;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[j]);
            let name = &store.get(id).name;
            report.record(|| format!("{name}[{j}]"), a, numeric);
        }
    }
    Ok(report)
}

/// Checks the gradient with respect to an input tensor.
pub fn check_input<F>(store: &ParamStore, input: &Tensor, forward: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |x: &Tensor| -> Result<f64> {
        let mut g = Graph::new(store);
        let v = g.input(x.clone());
        let out = forward(&mut g, v)?;
        let l = random_projection(&mut g, out, 0x5eed)?;
        Ok(g.value(l).data()[0])
    };
    let mut g = Graph::new(store);
    let v = g.input(input.clone());
    let out = forward(&mut g, v)?;
    let l = random_projection(&mut g, out, 0x5eed)?;
    let grads = g.backward(l)?;
    let analytic = grads
        .wrt(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; input.len()]);
    let mut report = GradCheckReport::default();
    let mut x = input.clone();
    for j in 0..input.len() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + DEFAULT_STEP;
        let up = eval(&x)?;
        x.data_mut()[j] = orig - DEFAULT_STEP;
        let down = eval(&x)?;
        x.data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * DEFAULT_STEP);
        report.record(|| format!("input[{j}]"), analytic[j], numeric);
    }
    Ok(report)
}

/// All parameter ids in the store.
pub fn all_params(store: &ParamStore) -> Vec<ParamId> {
    store.iter().map(|(id, _)| id).collect()
}
