//! Central finite-difference gradient oracle.
//!
//! Only forward evaluations are used here, so the oracle stays independent of
//! the reverse sweep it is compared against.

/// Outcome of comparing one analytic gradient against finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for each index in `indices`.
pub fn central_difference(
    x: &[f64],
    h: f64,
    indices: impl IntoIterator<Item = usize>,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<(usize, f64)> {
    let mut probe = x.to_vec();
    indices
        .into_iter()
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (i, (up - down) / (2.0 * h))
        })
        .collect()
}

/// Relative error with an absolute floor so that near-zero gradients are
/// judged on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn check(
    x: &[f64],
    analytic: &[f64],
    h: f64,
    floor: f64,
    indices: impl IntoIterator<Item = usize>,
    f: impl FnMut(&[f64]) -> f64,
) -> GradCheck {
    let numeric = central_difference(x, h, indices, f);
    let mut out = GradCheck { max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
    for (i, n) in numeric {
        let e = rel_err(analytic[i], n, floor);
        out.checked += 1;
        if e >= out.max_rel_err {
            out = GradCheck { max_rel_err: e, worst_index: i, analytic: analytic[i], numeric: n, checked: out.checked };
        }
    }
    out
}
