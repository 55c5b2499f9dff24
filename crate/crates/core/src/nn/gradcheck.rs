//! Directional finite-difference checks for graph gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// Probes whose relative error reached the tolerance.
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares the analytic directional derivative of `f` at `inputs` with a
/// central difference along `probes` random Gaussian directions.
///
/// `f` builds a one-element output from leaves holding the inputs. Relative
/// error is `|a - n| / max(|a|, |n|)`; pairs where both magnitudes are below
/// `1e-10` count as agreeing.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    f: F,
    probes: usize,
    eps: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::ShapeMismatch("gradient check needs a scalar output".into()));
        }
        Ok((g, vars, out))
    };
    let (g, vars, out) = eval(inputs)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { probes, max_rel_err: 0.0, failures: 0 };
    for _ in 0..probes {
        let dirs: Vec<Vec<f64>> =
            inputs.iter().map(|t| (0..t.len()).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let shifted = |sign: f64| -> Result<f64> {
            let moved: Vec<Tensor<f64>> = inputs
                .iter()
                .zip(&dirs)
                .map(|(t, d)| {
                    let mut t = t.clone();
                    t.data_mut().iter_mut().zip(d).for_each(|(x, dx)| *x += sign * eps * dx);
                    t
                })
                .collect();
            let (g, _, out) = eval(&moved)?;
            Ok(g.value(out).item())
        };
        let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * eps);
        let exact: f64 = analytic.iter().zip(&dirs).flat_map(|(a, d)| a.iter().zip(d).map(|(x, y)| x * y)).sum();
        let scale = exact.abs().max(numeric.abs());
        let rel = if scale < 1e-10 { 0.0 } else { (exact - numeric).abs() / scale };
        report.max_rel_err = report.max_rel_err.max(rel);
        if rel >= tol {
            report.failures += 1;
        }
    }
    Ok(report)
}
