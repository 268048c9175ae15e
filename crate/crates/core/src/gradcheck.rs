//! Central finite-difference oracle for reverse-mode gradients.

use std::fmt;

use crate::error::{Error, Result};

/// A set of named, flat parameter tensors.
///
/// `parameters` and `parameters_mut` must list the same tensors in the same
/// order; optimizers and the finite-difference check rely on that.
pub trait Parameterized {
    fn parameters(&self) -> Vec<(String, &[f64])>;
    fn parameters_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    /// Perturbation `h` in `(f(θ+h) − f(θ−h)) / 2h`.
    pub step: f64,
    pub rtol: f64,
    /// Gradients smaller than this are compared by absolute error.
    pub abs_floor: f64,
    /// One-sided slopes that disagree by more than this (relative to
    /// `max(1, |slope|)`) mark a kink crossing; the entry is skipped.
    pub kink_tol: f64,
    /// When set, an entry that fails at `step` is re-measured at this
    /// (larger) step, where the difference quotient carries less roundoff.
    /// Entries that pass on the second measurement count as `rechecked`.
    pub fallback_step: Option<f64>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: 1e-5,
            rtol: 1e-4,
            abs_floor: 1e-8,
            kink_tol: 1e-2,
            fallback_step: None,
        }
    }
}

impl CheckOptions {
    pub fn new(step: f64, rtol: f64) -> Self {
        CheckOptions {
            step,
            rtol,
            ..Self::default()
        }
    }
}

/// Error between an analytic and a numeric derivative.
pub fn gradient_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < abs_floor {
        diff
    } else {
        diff / analytic.abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub skipped: usize,
    pub rechecked: usize,
    pub max_error: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub options: CheckOptions,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<28} {:>7} {:>7} {:>9} {:>12} {:>6}",
            "parameter", "entries", "skipped", "rechecked", "max_error", "status"
        )?;
        for p in &self.params {
            writeln!(
                f,
                "{:<28} {:>7} {:>7} {:>9} {:>12.3e} {:>6}",
                p.name,
                p.entries,
                p.skipped,
                p.rechecked,
                p.max_error,
                if p.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compares `analytic` gradients against central differences of `loss`.
///
/// `analytic` must hold one `(name, gradient)` pair per tensor of
/// `params.parameters()`, in the same order. Each entry is perturbed in place
/// on a working copy and restored bit-exactly afterwards. Kink crossings are
/// detected heuristically from disagreeing one-sided slopes; use
/// [`finite_difference_check_piecewise`] when the activation pattern is known.
pub fn finite_difference_check<P, F>(
    params: &P,
    analytic: &[(String, Vec<f64>)],
    mut loss: F,
    options: CheckOptions,
) -> Result<GradCheckReport>
where
    P: Parameterized + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    check_impl(params, analytic, |p| loss(p).map(|v| (v, Vec::new())), options)
}

/// Like [`finite_difference_check`], but `loss` also returns the pattern of
/// which side of each kink its piecewise-linear units sit on (for example
/// [`GradientTape::activation_pattern`](crate::tape::GradientTape::activation_pattern)).
/// An entry whose perturbation changes the pattern lies within one step of
/// a kink and is skipped.
pub fn finite_difference_check_piecewise<P, F>(
    params: &P,
    analytic: &[(String, Vec<f64>)],
    loss: F,
    options: CheckOptions,
) -> Result<GradCheckReport>
where
    P: Parameterized + Clone,
    F: FnMut(&P) -> Result<(f64, Vec<bool>)>,
{
    check_impl(params, analytic, loss, options)
}

fn check_impl<P, F>(
    params: &P,
    analytic: &[(String, Vec<f64>)],
    mut loss: F,
    options: CheckOptions,
) -> Result<GradCheckReport>
where
    P: Parameterized + Clone,
    F: FnMut(&P) -> Result<(f64, Vec<bool>)>,
{
    if !(options.step > 0.0) || !(options.rtol > 0.0) {
        return Err(Error::Config("step and rtol must be positive".into()));
    }
    let layout: Vec<(String, usize)> = params
        .parameters()
        .into_iter()
        .map(|(n, p)| (n, p.len()))
        .collect();
    if layout.len() != analytic.len() {
        return Err(Error::Contract(format!(
            "{} parameter tensors but {} analytic gradients",
            layout.len(),
            analytic.len()
        )));
    }
    for ((name, len), (aname, grad)) in layout.iter().zip(analytic) {
        if name != aname || *len != grad.len() {
            return Err(Error::Contract(format!(
                "analytic gradient `{aname}` ({}) does not match parameter `{name}` ({len})",
                grad.len()
            )));
        }
    }

    let h = options.step;
    let mut work = params.clone();
    let (base, base_pattern) = loss(&work)?;
    if !base.is_finite() {
        return Err(Error::Evaluation {
            param: "<unperturbed>".into(),
            index: 0,
        });
    }

    let mut report = Vec::with_capacity(layout.len());
    for (slot, (name, len)) in layout.iter().enumerate() {
        let mut check = ParamCheck {
            name: name.clone(),
            entries: *len,
            skipped: 0,
            rechecked: 0,
            max_error: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            passed: true,
        };
        for j in 0..*len {
            let original = work.parameters()[slot].1[j];
            work.parameters_mut()[slot].1[j] = original + h;
            let plus = loss(&work);
            work.parameters_mut()[slot].1[j] = original - h;
            let minus = loss(&work);
            work.parameters_mut()[slot].1[j] = original;
            let ((plus, plus_pattern), (minus, minus_pattern)) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Evaluation {
                    param: name.clone(),
                    index: j,
                });
            }
            let numeric = (plus - minus) / (2.0 * h);
            let forward = (plus - base) / h;
            let backward = (base - minus) / h;
            let crossed = plus_pattern != base_pattern || minus_pattern != base_pattern;
            if crossed || (forward - backward).abs() > options.kink_tol * numeric.abs().max(1.0) {
                check.skipped += 1;
                continue;
            }
            let a = analytic[slot].1[j];
            let mut numeric = numeric;
            let mut err = gradient_error(a, numeric, options.abs_floor);
            if let Some(h2) = options.fallback_step.filter(|_| err > options.rtol) {
                work.parameters_mut()[slot].1[j] = original + h2;
                let plus = loss(&work);
                work.parameters_mut()[slot].1[j] = original - h2;
                let minus = loss(&work);
                work.parameters_mut()[slot].1[j] = original;
                let ((plus, pp), (minus, mp)) = (plus?, minus?);
                if pp != base_pattern || mp != base_pattern {
                    check.skipped += 1;
                    continue;
                }
                let wide = (plus - minus) / (2.0 * h2);
                let wide_err = gradient_error(a, wide, options.abs_floor);
                if wide_err <= options.rtol {
                    check.rechecked += 1;
                    numeric = wide;
                    err = wide_err;
                }
            }
            if err >= check.max_error {
                check.max_error = err;
                check.worst_index = j;
                check.analytic_at_worst = a;
                check.numeric_at_worst = numeric;
            }
        }
        check.passed = check.max_error <= options.rtol;
        report.push(check);
    }
    Ok(GradCheckReport {
        options,
        params: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct Scalar(Vec<f64>);

    impl Parameterized for Scalar {
        fn parameters(&self) -> Vec<(String, &[f64])> {
            vec![("x".into(), &self.0)]
        }
        fn parameters_mut(&mut self) -> Vec<(String, &mut [f64])> {
            vec![("x".into(), &mut self.0)]
        }
    }

    #[test]
    fn square_at_three() {
        let p = Scalar(vec![3.0]);
        let f = |p: &Scalar| Ok(p.0[0] * p.0[0]);
        let h = 1e-5;
        let numeric = (f(&Scalar(vec![3.0 + h])).unwrap() - f(&Scalar(vec![3.0 - h])).unwrap()) / (2.0 * h);
        assert!((numeric - 6.0).abs() < 1e-9);
        let report =
            finite_difference_check(&p, &[("x".into(), vec![6.0])], f, CheckOptions::default()).unwrap();
        assert!(report.passed());
        assert!(report.max_error() < 1e-9);
    }

    #[test]
    fn wrong_gradient_fails() {
        let p = Scalar(vec![3.0, -1.0]);
        let f = |p: &Scalar| Ok(p.0.iter().map(|x| x * x).sum());
        let report = finite_difference_check(
            &p,
            &[("x".into(), vec![6.0, -2.5])],
            f,
            CheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.params[0].worst_index, 1);
        assert!(report.to_string().contains("FAIL"));
    }

    #[test]
    fn kink_entries_are_skipped() {
        let p = Scalar(vec![0.0, 2.0]);
        let f = |p: &Scalar| Ok(p.0.iter().map(|x| x.max(0.0)).sum());
        let report = finite_difference_check(
            &p,
            &[("x".into(), vec![0.0, 1.0])],
            f,
            CheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.params[0].skipped, 1);
        assert!(report.passed());
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let p = Scalar(vec![0.0]);
        let f = |p: &Scalar| Ok(if p.0[0] > 0.0 { f64::INFINITY } else { 0.0 });
        let err = finite_difference_check(&p, &[("x".into(), vec![0.0])], f, CheckOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::Evaluation { ref param, index: 0 } if param == "x"));
    }

    #[test]
    fn layout_mismatch_is_a_contract_error() {
        let p = Scalar(vec![1.0]);
        let err = finite_difference_check(&p, &[], |_| Ok(0.0), CheckOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn fallback_step_rescues_roundoff_limited_entries() {
        // Gradients of 1e-5 next to a loss of 1e3: the h = 1e-5 quotient is
        // dominated by roundoff, the h = 1e-4 one is not.
        let c = 3e-6;
        let xs: Vec<f64> = (0..20).map(|i| 1.0 + 0.05 * i as f64).collect();
        let p = Scalar(xs.clone());
        let analytic = vec![("x".to_string(), xs.iter().map(|x| 3.0 * c * x * x).collect())];
        let f = |p: &Scalar| Ok(1e3 + c * p.0.iter().map(|x| x * x * x).sum::<f64>());
        let strict = finite_difference_check(&p, &analytic, f, CheckOptions::default()).unwrap();
        assert!(!strict.passed());
        let opts = CheckOptions {
            fallback_step: Some(1e-4),
            ..CheckOptions::default()
        };
        let report = finite_difference_check(&p, &analytic, f, opts).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.params[0].rechecked > 0);
        // A wrong gradient is not rescued.
        let wrong = vec![("x".to_string(), vec![1e-5; 20])];
        assert!(!finite_difference_check(&p, &wrong, f, opts).unwrap().passed());
    }
}
