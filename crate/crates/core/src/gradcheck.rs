//! Central finite-difference gradient checking in 64-bit.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which coordinates of each parameter are perturbed.
#[derive(Debug, Clone, Copy)]
pub enum Coordinates {
    All,
    /// The largest-magnitude analytic entry plus up to `per_param - 1`
    /// further entries drawn without replacement.
    Sample {
        per_param: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    /// `max |a - n| / max(max |a|, max |n|, 1e-12)` over the checked entries.
    pub rel_error: f64,
    pub max_abs_analytic: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn evaluate<F>(f: &mut F, params: &[(String, Tensor<f64>)]) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.constant(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.value(root).item()
}

/// Compare reverse-mode gradients of the scalar built by `f` against central
/// differences `(f(p + h) - f(p - h)) / 2h`.
///
/// `f` receives a fresh graph and one leaf per entry of `params`, in order,
/// and returns the scalar root.
pub fn finite_diff_gradcheck<F>(
    params: &[(String, Tensor<f64>)],
    step: f64,
    tolerance: f64,
    coords: Coordinates,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, (_, t))| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();
    let mut report = GradCheckReport {
        step,
        tolerance,
        params: Vec::with_capacity(params.len()),
    };
    for (pi, a) in analytic.iter().enumerate() {
        let len = a.len();
        let indices: Vec<usize> = match coords {
            Coordinates::All => (0..len).collect(),
            Coordinates::Sample { per_param, seed } => {
                let top = a
                    .data()
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pi as u64).wrapping_mul(0x9E37_79B9));
                let mut idx = vec![top];
                let extra = per_param.saturating_sub(1).min(len);
                idx.extend(sample(&mut rng, len, extra).into_iter().filter(|&i| i != top));
                idx.truncate(per_param.max(1));
                idx
            }
        };
        let (mut max_abs_a, mut max_abs_n, mut max_err) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &indices {
            let orig = work[pi].1.data()[i];
            work[pi].1.data_mut()[i] = orig + step;
            let up = evaluate(&mut f, &work)?;
            work[pi].1.data_mut()[i] = orig - step;
            let down = evaluate(&mut f, &work)?;
            work[pi].1.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let an = a.data()[i];
            max_abs_a = max_abs_a.max(an.abs());
            max_abs_n = max_abs_n.max(numeric.abs());
            max_err = max_err.max((an - numeric).abs());
        }
        report.params.push(ParamCheck {
            name: params[pi].0.clone(),
            checked: indices.len(),
            max_abs_error: max_err,
            rel_error: max_err / max_abs_a.max(max_abs_n).max(1e-12),
            max_abs_analytic: max_abs_a,
        });
    }
    Ok(report)
}
