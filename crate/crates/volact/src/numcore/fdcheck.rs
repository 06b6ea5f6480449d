//! Central finite-difference oracle for validating gradient paths.

use super::param::ParamStore;

/// Max over the probed parameters of |g_ad - g_fd| / max(1, |g_fd|), where
/// g_fd is the central difference of `f` at step `h` and `g_ad` the
/// caller-supplied analytic gradient for the same parameters.
pub fn finite_diff_check(
    params: &mut ParamStore,
    indices: &[usize],
    ad_grads: &[f64],
    f: &mut dyn FnMut(&ParamStore) -> f64,
    h: f64,
) -> f64 {
    assert!(h > 0.0);
    let mut max_err = 0.0f64;
    for &i in indices {
        let orig = params.values[i];
        params.values[i] = orig + h;
        let plus = f(params);
        params.values[i] = orig - h;
        let minus = f(params);
        params.values[i] = orig;
        let g_fd = (plus - minus) / (2.0 * h);
        let err = (ad_grads[i] - g_fd).abs() / g_fd.abs().max(1.0);
        max_err = max_err.max(err);
    }
    max_err
}
