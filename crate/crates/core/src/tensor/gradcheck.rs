//! Central-difference gradient checking.

use super::graph::{Graph, Var};
use super::{Real, Tensor};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over probed coordinates of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub probed: usize,
}

/// Compare the reverse-mode gradient of `op` against central differences on
/// every coordinate of every input. Non-scalar outputs are sum-reduced.
pub fn finite_diff_check<T, F>(op: F, inputs: &[Tensor<T>], epsilon: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    finite_diff_check_at(op, inputs, &coords, epsilon)
}

/// As [`finite_diff_check`], restricted to the listed `(input, element)` coordinates.
pub fn finite_diff_check_at<T, F>(
    op: F,
    inputs: &[Tensor<T>],
    coords: &[(usize, usize)],
    epsilon: f64,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<T>], track: bool| -> Result<(f64, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins
            .iter()
            .map(|t| if track { g.input(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let mut out = op(&mut g, &vars)?;
        // Reduce in f64 so the numeric side only sees the op's own rounding.
        let value: f64 = g.value(out).data().iter().map(|&v| Real::to_f64(v)).sum();
        if !track {
            return Ok((value, Vec::new()));
        }
        if g.value(out).numel() != 1 {
            out = g.sum(out)?;
        }
        let grads = g.backward(out)?;
        Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect()))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        probed: 0,
    };
    let mut work = inputs.to_vec();
    for &(i, j) in coords {
        let orig = inputs[i].data()[j];
        work[i].data_mut()[j] = orig + T::lit(epsilon);
        let (plus, _) = eval(&work, false)?;
        work[i].data_mut()[j] = orig - T::lit(epsilon);
        let (minus, _) = eval(&work, false)?;
        work[i].data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i].data()[j].to_f64();
        let err = (a - numeric).abs() / a.abs().max(1.0);
        report.probed += 1;
        if err > report.max_rel_error || report.probed == 1 {
            report.max_rel_error = err;
            report.worst = (i, j);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
