//! Central finite-difference check of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::tensor::{Tensor, TensorError, TensorResult};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    /// `max |analytic − fd| / max(1, |fd|)` over the checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per input (all when `None`).
    pub coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            coords_per_input: None,
            seed: 0,
        }
    }
}

fn eval<F, E>(build: &F, inputs: &[Tensor]) -> Result<f64, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<TensorResult<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// `build` maps the input leaves to a scalar.
pub fn gradcheck<F, E>(inputs: &[Tensor], build: F, opts: GradcheckOptions) -> Result<GradcheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<TensorResult<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_tensor(v).into_data()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = inputs.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.coords_per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let x = input.data()[j];
            work[i].data_mut()[j] = x + opts.step;
            let up = eval(&build, &work)?;
            work[i].data_mut()[j] = x - opts.step;
            let down = eval(&build, &work)?;
            work[i].data_mut()[j] = x;
            let fd = (up - down) / (2.0 * opts.step);
            let err = (analytic[i][j] - fd).abs() / fd.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
