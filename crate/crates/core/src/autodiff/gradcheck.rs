use super::params::ParamStore;
use super::tape::{Tape, TapeError, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over parameters of |g_ad - g_fd| / max(floor, |g_ad|, |g_fd|)
    pub max_rel_error: f64,
    /// max over parameters of |g_ad - g_fd|
    pub max_abs_error: f64,
    /// flat parameter index where the maximum occurred
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(θ+εe) - f(θ-εe)) / 2ε` for every scalar in `params`.
///
/// `f` receives a tape whose parameter leaves hold the (possibly perturbed)
/// values and must return a `1 x 1` node. It has to be deterministic.
/// Relative errors use a denominator floor of 1.
pub fn grad_check<F, E>(params: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape) -> Result<Var, E>,
    E: From<TapeError>,
{
    grad_check_with_floor(params, eps, 1.0, f)
}

/// [`grad_check`] with relative errors taken against
/// `max(floor, |g_ad|, |g_fd|)`.
pub fn grad_check_with_floor<F, E>(params: &ParamStore, eps: f64, floor: f64, mut f: F) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape) -> Result<Var, E>,
    E: From<TapeError>,
{
    let mut tape = Tape::with_params(params);
    let loss = f(&mut tape)?;
    let analytic = tape.backward(loss)?.to_flat();

    let mut probe = params.clone();
    let mut eval = |probe: &ParamStore, index: usize| -> Result<f64, E> {
        tape.bind_params(probe);
        let out = f(&mut tape)?;
        let v = tape.scalar_value(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TapeError::NonFinite { index }.into())
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        checked: analytic.len(),
    };
    for (index, &g_ad) in analytic.iter().enumerate() {
        let base = params.flat_get(index);
        probe.flat_set(index, base + eps);
        let plus = eval(&probe, index)?;
        probe.flat_set(index, base - eps);
        let minus = eval(&probe, index)?;
        probe.flat_set(index, base);

        let g_fd = (plus - minus) / (2.0 * eps);
        let abs = (g_ad - g_fd).abs();
        report.max_abs_error = report.max_abs_error.max(abs);
        let err = abs / floor.max(g_ad.abs()).max(g_fd.abs());
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = index;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_is_exact() {
        let params = ParamStore::from_values(vec![("t".into(), array![[1.0]])]);
        let report = grad_check::<_, TapeError>(&params, 1e-4, |tape| {
            let t = tape.param(0)?;
            tape.mul(t, t)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn non_finite_forward_reports_index() {
        let params = ParamStore::from_values(vec![("t".into(), array![[0.5, 0.0]])]);
        let err = grad_check::<_, TapeError>(&params, 1e-4, |tape| {
            let t = tape.param(0)?;
            let l = tape.ln(t)?;
            tape.sum(l)
        })
        .unwrap_err();
        assert!(matches!(err, TapeError::NonFinite { index: 0 }));
    }
}
