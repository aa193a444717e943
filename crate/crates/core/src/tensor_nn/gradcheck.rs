use super::params::ParamVector;

/// Central-difference gradient: `(f(p + eps e_i) - f(p - eps e_i)) / 2 eps` per coordinate.
pub fn finite_diff_grad<F>(loss_fn: F, params: &ParamVector, eps: f64) -> ParamVector
where
    F: Fn(&ParamVector) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + eps;
        let up = loss_fn(&probe);
        probe.as_mut_slice()[i] = orig - eps;
        let down = loss_fn(&probe);
        probe.as_mut_slice()[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    ParamVector::from_vec(grad)
}

/// Scale-aware relative error between an analytic and a numeric gradient:
/// `max_i |a_i - n_i| / max(‖a‖∞, ‖n‖∞, floor)`. Returns the error and the
/// worst coordinate.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(floor, |m, v| m.max(v.abs()));
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = (a - n).abs() / scale;
        if e > worst.0 {
            worst = (e, i);
        }
    }
    worst
}
