use super::network::{Mode, Network, Params};
use super::Result;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference gradient of the single-sample loss with respect to
/// every parameter, in `Params` order. Dropout masks are held fixed by
/// `seed`.
pub fn numeric_gradient(
    net: &Network,
    params: &Params<f64>,
    input: &[f64],
    target: usize,
    seed: u64,
    step: f64,
) -> Result<Vec<Vec<f64>>> {
    let mode = Mode::Train { seed };
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.tensors.len());
    for t in 0..params.tensors.len() {
        let mut grad = Vec::with_capacity(params.tensors[t].tensor.len());
        for i in 0..params.tensors[t].tensor.len() {
            let orig = work.tensors[t].tensor.data[i];
            work.tensors[t].tensor.data[i] = orig + step;
            let plus = net.loss(&work, input, target, mode)?;
            work.tensors[t].tensor.data[i] = orig - step;
            let minus = net.loss(&work, input, target, mode)?;
            work.tensors[t].tensor.data[i] = orig;
            grad.push((plus - minus) / (2.0 * step));
        }
        out.push(grad);
    }
    Ok(out)
}

/// Largest relative error between backpropagated and central-difference
/// (step 1e-5) parameter gradients for one sample, in double precision.
pub fn gradient_check(net: &Network, params: &Params<f64>, input: &[f64], target: usize) -> Result<f64> {
    const SEED: u64 = 0x5eed;
    let trace = net.forward(params, input, Mode::Train { seed: SEED })?;
    let (_, analytic) = net.backward(params, &trace, target)?;
    let numeric = numeric_gradient(net, params, input, target, SEED, 1e-5)?;
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.tensors.iter().zip(&numeric) {
        for (&a, &n) in a.iter().zip(n) {
            worst = worst.max(relative_error(a, n));
        }
    }
    Ok(worst)
}
