//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Worst disagreement found in one parameter tensor.
#[derive(Clone, Debug, Serialize)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_error: f64,
    /// Coordinates of the worst element.
    pub worst_index: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamGradError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates_checked: usize,
    pub pass: bool,
}

impl GradReport {
    /// The parameter holding the largest relative error.
    pub fn worst(&self) -> Option<&ParamGradError> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<T, F>(f: &mut F, params: &[(String, Tensor<T>)], track: bool) -> Result<(Tape<T>, Var, Vec<Var>)>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), track))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss);
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "checked function must return a scalar, got {:?}",
            value.shape()
        )));
    }
    if !value.data()[0].is_finite() {
        return Err(Error::NonFinite("checked function returned a non-finite value".into()));
    }
    Ok((tape, loss, vars))
}

/// Compares the tape gradient of `f` at `params` against the central
/// difference `(f(p+h) − f(p−h)) / 2h`, coordinate by coordinate.
///
/// `f` receives a fresh tape and one leaf per parameter (in order) and must
/// return a scalar node. It is evaluated `1 + 2·Σ numel` times.
pub fn finite_diff_check<T, F>(
    params: &[(String, Tensor<T>)],
    mut f: F,
    h: f64,
    tol: f64,
) -> Result<GradReport>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let (tape, loss, vars) = evaluate(&mut f, params, true)?;
    let mut grads = tape.backward(loss)?;
    drop(tape);

    let mut work: Vec<(String, Tensor<T>)> = params.to_vec();
    let mut report = GradReport {
        params: Vec::with_capacity(params.len()),
        max_rel_error: 0.0,
        tolerance: tol,
        coordinates_checked: 0,
        pass: true,
    };
    let step = T::from_f64_lossy(h);
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads
            .take(*var)
            .expect("tracked leaves always receive a gradient");
        let mut worst = ParamGradError {
            name: params[p].0.clone(),
            max_rel_error: 0.0,
            worst_index: vec![],
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..analytic.numel() {
            let original = work[p].1.data()[i];
            work[p].1.data_mut()[i] = original + step;
            let plus = scalar_of(&mut f, &work)?;
            work[p].1.data_mut()[i] = original - step;
            let minus = scalar_of(&mut f, &work)?;
            work[p].1.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i].to_f64_lossy();
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error || worst.worst_index.is_empty() {
                worst.max_rel_error = err;
                worst.worst_index = analytic.coords(i);
                worst.analytic = a;
                worst.numeric = numeric;
            }
            report.coordinates_checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst.max_rel_error);
        report.params.push(worst);
    }
    report.pass = report.max_rel_error < tol;
    Ok(report)
}

fn scalar_of<T, F>(f: &mut F, params: &[(String, Tensor<T>)]) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (tape, loss, _) = evaluate(f, params, false)?;
    Ok(tape.value(loss).data()[0].to_f64_lossy())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(name: &str, shape: &[usize], data: &[f64]) -> (String, Tensor<f64>) {
        (name.to_string(), Tensor::from_f64(shape, data).unwrap())
    }

    #[test]
    fn linear_layer_with_squared_loss_passes() {
        let params = vec![
            named("w", &[3, 2], &[0.3, -0.2, 0.5, 0.1, -0.4, 0.7]),
            named("b", &[2], &[0.05, -0.1]),
        ];
        let x = Tensor::from_f64(&[4, 3], &[
            0.2, -1.0, 0.5, 1.1, 0.3, -0.7, -0.4, 0.9, 0.6, 0.0, 0.8, -0.2,
        ])
        .unwrap();
        let target = Tensor::from_f64(&[4, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.0]).unwrap();
        let report = finite_diff_check(
            &params,
            |tape, v| {
                let xi = tape.constant(x.clone());
                let ti = tape.constant(target.clone());
                let y = tape.matmul(xi, v[0])?;
                let y = tape.add_bias(y, v[1])?;
                let d = tape.sub(y, ti)?;
                let sq = tape.mul(d, d)?;
                Ok(tape.sum(sq))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.coordinates_checked, 8);
    }

    #[test]
    fn constant_function_passes_with_zero_gradients() {
        let params = vec![named("p", &[3], &[1.0, 2.0, 3.0])];
        let report = finite_diff_check(
            &params,
            |tape, _| Ok(tape.constant(Tensor::scalar(4.0))),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass);
        assert_eq!(report.params[0].analytic, 0.0);
        assert_eq!(report.params[0].numeric, 0.0);
    }

    #[test]
    fn abs_at_zero_is_reported_as_mismatch() {
        let params = vec![named("x", &[1], &[0.0])];
        let report = finite_diff_check(
            &params,
            |tape, v| {
                let a = tape.abs(v[0]);
                Ok(tape.sum(a))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!report.pass);
        assert_eq!(report.worst().unwrap().worst_index, vec![0]);
    }

    #[test]
    fn relu_at_zero_is_reported_as_mismatch() {
        let params = vec![named("x", &[1], &[0.0])];
        let report = finite_diff_check(
            &params,
            |tape, v| {
                let r = tape.relu(v[0]);
                Ok(tape.sum(r))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!report.pass);
        assert!((report.params[0].numeric - 0.5).abs() < 1e-9);
    }

    #[test]
    fn non_finite_value_is_an_evaluation_error() {
        let params = vec![named("x", &[1], &[1.0])];
        let err = finite_diff_check(
            &params,
            |tape, v| {
                let s = tape.scale(v[0], f64::INFINITY);
                Ok(tape.sum(s))
            },
            1e-5,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let params = vec![named("x", &[1], &[1.0])];
        assert!(finite_diff_check(&params, |tape, v| Ok(tape.sum(v[0])), 0.0, 1e-6).is_err());
    }
}
