use crate::error::Result;
use crate::tensor::Tensor;

/// Magnitudes below this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    /// `(index, analytic, numeric)` for every checked coordinate.
    pub entries: Vec<(usize, f64, f64)>,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of scalar `f` at `x` against central
/// differences on every coordinate; returns the largest relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    Ok(grad_check_sampled(f, x, eps, &all)?.max_relative_error)
}

/// As [`grad_check`], restricted to the listed coordinates.
pub fn grad_check_sampled<F>(f: F, x: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let leaf = x.detach().requires_grad_(true);
    let loss = f(&leaf)?;
    loss.backward()?;
    let analytic = leaf.grad().map(|g| g.clone()).unwrap_or_else(|| vec![0.0; x.numel()]);

    let base = x.to_vec();
    let eval = |i: usize, delta: f64| -> Result<f64> {
        let mut v = base.clone();
        v[i] += delta;
        f(&Tensor::from_vec(x.shape(), v)?)?.item()
    };
    let mut report = GradCheckReport { max_relative_error: 0.0, worst_index: 0, entries: Vec::new() };
    for &i in coords {
        let numeric = (eval(i, eps)? - eval(i, -eps)?) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_relative_error || report.entries.is_empty() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst_index = i;
        }
        report.entries.push((i, analytic[i], numeric));
    }
    Ok(report)
}
