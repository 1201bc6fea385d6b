//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Gradient magnitudes below this are compared absolutely rather than
/// relatively.
pub const ABSOLUTE_FLOOR: f64 = 1e-8;

/// Relative deviation between an analytic and a numeric derivative, with an
/// absolute fallback when both are tiny.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABSOLUTE_FLOOR {
        diff
    } else {
        diff / scale
    }
}

/// `|a − n| / max(|a|, |n|, floor)`: relative error whose denominator never
/// drops below `floor`, for components too small for the difference
/// quotient to resolve.
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Picks the coordinates of a block to perturb, by block name and flat index.
pub type Selector<'a> = &'a dyn Fn(&str, usize) -> bool;

/// Worst coordinate found by a block check.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub max_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the gradient of a scalar function of several tensors against
/// central differences, coordinate by coordinate.
///
/// `f` must build a scalar on the graph it is given from the supplied
/// variables. `select` limits which coordinates of each block are perturbed
/// (all of them when `None`).
pub fn check_blocks<F, Build>(
    blocks: &[(String, Tensor<F>)],
    step: f64,
    select: Option<Selector<'_>>,
    f: Build,
) -> Result<Vec<BlockReport>>
where
    F: Real,
    Build: FnMut(&mut Graph<F>, &[Var]) -> Result<Var>,
{
    check_blocks_with(blocks, step, &relative_error, select, f)
}

/// [`check_blocks`] with a caller-chosen error measure `error(analytic,
/// numeric)`.
pub fn check_blocks_with<F, Build>(
    blocks: &[(String, Tensor<F>)],
    step: f64,
    error: &dyn Fn(f64, f64) -> f64,
    select: Option<Selector<'_>>,
    mut f: Build,
) -> Result<Vec<BlockReport>>
where
    F: Real,
    Build: FnMut(&mut Graph<F>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step {step} must be positive")));
    }
    let mut graph = Graph::new();
    let vars: Vec<Var> = blocks.iter().map(|(_, t)| graph.param(t.clone())).collect();
    let out = f(&mut graph, &vars)?;
    check_scalar(graph.value(out))?;
    graph.backward(out)?;
    let analytic: Vec<Tensor<F>> = vars
        .iter()
        .map(|&v| graph.grad(v).expect("parameter gradient"))
        .collect();
    drop(graph);

    let mut eval = |point: &[Tensor<F>]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vs)?;
        check_scalar(g.value(out))
    };

    let mut point: Vec<Tensor<F>> = blocks.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(blocks.len());
    for (b, (name, _)) in blocks.iter().enumerate() {
        let mut report = BlockReport {
            name: name.clone(),
            max_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        };
        for i in 0..point[b].numel() {
            if let Some(sel) = select {
                if !sel(name, i) {
                    continue;
                }
            }
            let orig = point[b].data()[i];
            let h = F::lit(step);
            point[b].data_mut()[i] = orig + h;
            let plus = eval(&point)?;
            point[b].data_mut()[i] = orig - h;
            let minus = eval(&point)?;
            point[b].data_mut()[i] = orig;
            // The effective step after rounding of orig ± h.
            let span = ((orig + h) - (orig - h)).as_f64();
            let numeric = (plus - minus) / span;
            let exact = analytic[b].data()[i].as_f64();
            let err = error(exact, numeric);
            report.checked += 1;
            if err > report.max_error || report.checked == 1 {
                report.max_error = err;
                report.worst_index = i;
                report.analytic = exact;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

fn check_scalar<F: Real>(t: &Tensor<F>) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    let v = t.item().as_f64();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value {v} is not finite")));
    }
    Ok(v)
}

/// Maximum relative deviation between the analytic gradient of `f` at
/// `point` and its central-difference estimate.
pub fn finite_difference_check<F, Build>(point: &Tensor<F>, step: f64, mut f: Build) -> Result<f64>
where
    F: Real,
    Build: FnMut(&mut Graph<F>, Var) -> Result<Var>,
{
    let blocks = vec![("x".to_string(), point.clone())];
    let reports = check_blocks(&blocks, step, None, |g, vs| f(g, vs[0]))?;
    Ok(reports[0].max_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::scalar(3.0);
        let err = finite_difference_check(&x, 1e-4, |g, v| g.mul(v, v)).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let err = finite_difference_check(&x, 1e-4, |g, v| {
            let z = g.scale(v, 0.0);
            Ok(g.sum(z))
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_nonpositive_step_and_nonfinite_values() {
        let x = Tensor::<f64>::scalar(1.0);
        assert!(matches!(
            finite_difference_check(&x, 0.0, |g, v| Ok(g.sum(v))),
            Err(Error::Contract(_))
        ));
        let err = finite_difference_check(&x, 1e-4, |g, v| Ok(g.scale(v, f64::INFINITY)));
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn relative_error_falls_back_to_absolute() {
        assert_eq!(relative_error(0.0, 1e-9), 1e-9);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
