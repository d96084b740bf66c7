use super::{Graph, ParamStore, Result, Scalar, TensorError, Var};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over components of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub components: usize,
}

/// Compares backward gradients of `f` against central finite differences
/// over every component of every parameter in `params`.
///
/// `f` must build the same scalar function of `params` on every call.
pub fn grad_check<T, F>(params: &mut ParamStore<T>, step: f64, mut f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>, &mut Graph<T>) -> Result<Var>,
{
    if step.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(TensorError::Numeric(format!(
            "step must be positive, got {step}"
        )));
    }
    let eval = |params: &ParamStore<T>, f: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(params, &mut g)?;
        let v = g.value(out).item()?.as_f64();
        if !v.is_finite() {
            return Err(TensorError::Numeric(format!(
                "function value {v} is not finite"
            )));
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::new();
        let out = f(params, &mut g)?;
        let v = g.value(out).item()?.as_f64();
        if !v.is_finite() {
            return Err(TensorError::Numeric(format!(
                "function value {v} is not finite"
            )));
        }
        g.backward(out)?
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        components: 0,
    };
    let h = T::of(step);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        for i in 0..n {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(params, &mut f);
            params.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(params, &mut f);
            params.get_mut(id).data_mut()[i] = orig;
            // actual perturbation after rounding to T
            let span = ((orig + h) - (orig - h)).as_f64();
            let numeric = (up? - down?) / span;
            let a = analytic
                .get(id)
                .map(|t| t.data()[i].as_f64())
                .unwrap_or(0.0);
            let denom = 1f64.max(a.abs()).max(numeric.abs());
            let err = (a - numeric).abs() / denom;
            report.components += 1;
            if report.worst_param.is_empty() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = params.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
