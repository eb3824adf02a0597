//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it is used to check.

use crate::graph::{Graph, Var};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step `h` in `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Tensors larger than this are probed at evenly spaced elements.
    pub max_elements_per_tensor: usize,
    /// Norm floor below which both gradients are treated as zero.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_elements_per_tensor: 48,
            floor: 1e-10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over the probed elements.
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn probe_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

/// Compares the backward pass of `loss` against central differences for
/// every tensor in `params`. `loss` must register parameters through
/// [`Graph::param`] as trainable and return a single-element node.
pub fn check_gradients<F>(params: &ParamSet, loss: F, cfg: GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamSet) -> Var,
{
    let eval = |p: &ParamSet| -> f64 {
        let mut g = Graph::new();
        let out = loss(&mut g, p);
        g.value(out).data()[0]
    };

    let mut g = Graph::new();
    let out = loss(&mut g, params);
    assert_eq!(g.value(out).numel(), 1, "gradient check needs a scalar loss");
    let grads = g.backward(out);
    let analytic = g.param_grads(&grads);

    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.expect(&name).numel();
        let idx = probe_indices(n, cfg.max_elements_per_tensor);
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let orig = params.expect(&name).data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + cfg.step;
            let plus = eval(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig - cfg.step;
            let minus = eval(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let (an, nn) = (a2.sqrt(), n2.sqrt());
        let denom = an.max(nn);
        let rel_error = if denom < cfg.floor {
            0.0
        } else {
            diff2.sqrt() / denom
        };
        report.tensors.push(TensorCheck {
            name,
            checked: idx.len(),
            analytic_norm: an,
            numeric_norm: nn,
            rel_error,
        });
    }
    report
}
