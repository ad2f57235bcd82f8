use super::layer::{param_slices, param_slices_mut, Layered};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms, so that two
/// near-zero values do not register as a large relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Relative disagreement between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares analytic parameter gradients against central finite differences.
///
/// `analytic` returns the loss and a gradient model shaped like `model`;
/// `loss` evaluates the loss alone. The network input and the loss target are
/// captured by the closures. Returns the worst relative error over every
/// parameter.
pub fn grad_check<M, A, L>(model: &M, analytic: A, loss: L) -> f64
where
    M: Layered + Clone,
    A: Fn(&M) -> (f64, M),
    L: Fn(&M) -> f64,
{
    let (_, grads) = analytic(model);
    let analytic_flat: Vec<f64> = param_slices(&grads).concat();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut flat = 0;
    let slice_lens: Vec<usize> = param_slices(model).iter().map(|s| s.len()).collect();
    for (s, len) in slice_lens.into_iter().enumerate() {
        for i in 0..len {
            let orig = param_slices(&probe)[s][i];
            param_slices_mut(&mut probe)[s][i] = orig + FD_STEP;
            let up = loss(&probe);
            param_slices_mut(&mut probe)[s][i] = orig - FD_STEP;
            let down = loss(&probe);
            param_slices_mut(&mut probe)[s][i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic_flat[flat], numeric));
            flat += 1;
        }
    }
    worst
}
