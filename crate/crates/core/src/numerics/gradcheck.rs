use super::{Graph, NumericsError, ParamStore, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1e-8, |numeric|)
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// Number of trainable scalar entries compared.
    pub checked: usize,
    pub worst_param: Option<(String, usize)>,
    /// Analytic and central-difference values at `worst_param`.
    pub worst_values: Option<(f64, f64)>,
}

/// Evaluates a scalar expression once and returns its value.
pub fn forward<F>(params: &ParamStore, expr: F) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new(params);
    let out = expr(&mut g)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(NumericsError::Shape(format!(
            "expression must be scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients against central differences for every trainable entry.
pub fn finite_diff_check<F>(params: &ParamStore, expr: F, epsilon: f64) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph) -> Result<Var, NumericsError>,
{
    if !(epsilon > 0.0) {
        return Err(NumericsError::InvalidEpsilon(epsilon));
    }
    let analytic = {
        let mut g = Graph::new(params);
        let out = expr(&mut g)?;
        g.backward(out)?
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        checked: 0,
        worst_param: None,
        worst_values: None,
    };
    for (name, grad) in &analytic {
        let base = params.tensor(name)?.clone();
        for i in 0..base.len() {
            let x0 = base.data()[i];
            work.poke(name, i, x0 + epsilon);
            let up = forward(&work, &expr)?;
            work.poke(name, i, x0 - epsilon);
            let down = forward(&work, &expr)?;
            work.poke(name, i, x0);
            let numeric = (up - down) / (2.0 * epsilon);
            let abs_err = (grad.data()[i] - numeric).abs();
            let rel = abs_err / numeric.abs().max(1e-8);
            report.checked += 1;
            report.max_absolute_error = report.max_absolute_error.max(abs_err);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_param = Some((name.clone(), i));
                report.worst_values = Some((grad.data()[i], numeric));
            }
        }
    }
    Ok(report)
}
