//! Central finite-difference gradient checking.

use crate::error::{Error, Result};

use super::optim::Param;

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the gradients stored in `params` against central differences of
/// `loss_fn`. Frozen parameters are skipped. Every perturbed value is restored
/// bitwise before returning.
pub fn finite_diff_check<F>(mut loss_fn: F, params: &mut [Param], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Param]) -> Result<f64>,
{
    scan(
        params,
        h,
        |ps, p_idx, c, h| central(&mut loss_fn, ps, p_idx, c, h),
        relative_error,
    )
}

/// Like [`finite_diff_check`], but the numeric side is the Richardson
/// extrapolation `(4 D(h/2) - D(h)) / 3` of two central differences, which
/// cancels the `h^2` truncation term, and each coordinate is scored as
/// `|a - n| / (rtol (|a| + |n|) + atol)`. A report maximum of at most 1 means
/// every coordinate is within tolerance. `atol` absorbs the rounding floor of
/// the loss values, roughly `ulp(L) / h`.
pub fn richardson_check<F>(
    mut loss_fn: F,
    params: &mut [Param],
    h: f64,
    rtol: f64,
    atol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Param]) -> Result<f64>,
{
    if !(rtol >= 0.0 && atol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need rtol >= 0 and atol > 0, got {rtol}, {atol}"
        )));
    }
    scan(
        params,
        h,
        |ps, p_idx, c, h| {
            let coarse = central(&mut loss_fn, ps, p_idx, c, h)?;
            let fine = central(&mut loss_fn, ps, p_idx, c, h / 2.0)?;
            Ok((4.0 * fine - coarse) / 3.0)
        },
        |a, n| (a - n).abs() / (rtol * (a.abs() + n.abs()) + atol),
    )
}

fn central<F>(loss_fn: &mut F, params: &mut [Param], p_idx: usize, c: usize, h: f64) -> Result<f64>
where
    F: FnMut(&[Param]) -> Result<f64>,
{
    let original = params[p_idx].value.values()[c];
    params[p_idx].value.values_mut()[c] = original + h;
    let plus = loss_fn(params);
    params[p_idx].value.values_mut()[c] = original - h;
    let minus = loss_fn(params);
    params[p_idx].value.values_mut()[c] = original;
    let (plus, minus) = (plus?, minus?);
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at param {p_idx} coordinate {c} is {plus} / {minus}"
        )));
    }
    Ok((plus - minus) / (2.0 * h))
}

fn scan<N, S>(params: &mut [Param], h: f64, mut numeric: N, score: S) -> Result<GradCheckReport>
where
    N: FnMut(&mut [Param], usize, usize, f64) -> Result<f64>,
    S: Fn(f64, f64) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    for p_idx in 0..params.len() {
        if params[p_idx].frozen {
            continue;
        }
        for c in 0..params[p_idx].value.len() {
            let n = numeric(params, p_idx, c, h)?;
            let a = params[p_idx].grad.values()[c];
            let err = score(a, n);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((p_idx, c));
                report.analytic_at_worst = a;
                report.numeric_at_worst = n;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn half_sq_norm(ps: &[Param]) -> Result<f64> {
        Ok(ps.iter().flat_map(|p| p.value.values()).map(|v| 0.5 * v * v).sum())
    }

    #[test]
    fn quadratic_loss() {
        let mut ps = vec![Param::new(Tensor::vector(vec![3.0]))];
        ps[0].grad = Tensor::vector(vec![3.0]);
        let r = finite_diff_check(half_sq_norm, &mut ps, 1e-5).unwrap();
        assert!((r.numeric_at_worst - 3.0).abs() < 1e-10);
        assert!(r.max_rel_error < 1e-10);
        assert_eq!(ps[0].value.values(), &[3.0]);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut ps = vec![Param::new(Tensor::vector(vec![1.0, -2.0]))];
        ps[0].grad = Tensor::vector(vec![1.0, 2.0]);
        let r = finite_diff_check(half_sq_norm, &mut ps, 1e-5).unwrap();
        assert_eq!(r.worst, Some((0, 1)));
        assert!((r.max_rel_error - 1.0).abs() < 1e-6);
    }

    #[test]
    fn frozen_params_skipped() {
        let mut ps = vec![Param::new(Tensor::vector(vec![1.0]))];
        ps[0].frozen = true;
        let r = finite_diff_check(half_sq_norm, &mut ps, 1e-5).unwrap();
        assert_eq!(r.coordinates, 0);
    }

    #[test]
    fn richardson_is_exact_on_cubics() {
        // D(h) of x^3 at x is 3x^2 + h^2; the extrapolation removes h^2.
        let mut ps = vec![Param::new(Tensor::vector(vec![2.0]))];
        ps[0].grad = Tensor::vector(vec![12.0]);
        let cube = |p: &[Param]| Ok(p[0].value.values()[0].powi(3));
        let plain = finite_diff_check(cube, &mut ps, 1e-2).unwrap();
        assert!((plain.numeric_at_worst - 12.0001).abs() < 1e-9);
        let r = richardson_check(cube, &mut ps, 1e-2, 0.0, 1e-9).unwrap();
        assert!(r.max_rel_error <= 1.0, "{r:?}");
        assert!(richardson_check(cube, &mut ps, 1e-2, 0.0, 0.0).is_err());
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut ps = vec![Param::new(Tensor::vector(vec![0.0]))];
        let err = finite_diff_check(|_| Ok(f64::NAN), &mut ps, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
