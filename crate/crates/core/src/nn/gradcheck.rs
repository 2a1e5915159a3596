/// Result of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compares an analytic gradient against central finite differences of `f`.
///
/// For each coordinate `i`, perturbs `x[i]` by ±h, evaluates `f`, and forms
/// the relative error `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// (the max(1, ..) floor keeps near-zero gradients from amplifying
/// cancellation noise while still flagging scaled-off-by-2 bugs).
///
/// `f` must be a pure function of `x`; the slice is restored after probing.
pub fn gradcheck(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &mut [f64],
    analytic: &[f64],
    h: f64,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let saved = x[i];
        x[i] = saved + h;
        let fp = f(x);
        x[i] = saved - h;
        let fm = f(x);
        x[i] = saved;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        checked: x.len(),
    }
}

/// Standard step size and tolerance used by every gradient check.
pub const GRADCHECK_H: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
