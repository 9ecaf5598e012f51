//! Finite-difference oracle.
//!
//! [`finite_diff`] only ever evaluates the function it is given, so when that
//! function is a forward pass it shares nothing with the engine's backward
//! rules. The reports produced here are the correctness anchor for every
//! gradient the training procedures depend on, including the meta-gradient
//! of the target loss with respect to the weighting network.

mod meta_check;
mod primitives;

use serde::{Deserialize, Serialize};

pub use meta_check::{check_meta_gradient, meta_gradient, meta_gradient_norm, TinyConfig};
pub use primitives::{check_primitives, check_primitives_second_order};

/// Default central-difference step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Entries whose numeric gradient is at or below this magnitude do not
/// count towards the maximum relative error.
pub const NUMERIC_FLOOR: f64 = 1e-10;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const META_TOLERANCE: f64 = 1e-5;

/// Result of central differences over every coordinate.
#[derive(Clone, Debug)]
pub struct FiniteDiff {
    pub values: Vec<f64>,
    /// Coordinates where either perturbed evaluation was not finite.
    pub non_finite: Vec<usize>,
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` for every `i`,
/// holding all other coordinates fixed.
pub fn finite_diff<F>(mut f: F, params: &[f64], h: f64) -> FiniteDiff
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    let mut values = Vec::with_capacity(p.len());
    let mut non_finite = Vec::new();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let plus = f(&p);
        p[i] = orig - h;
        let minus = f(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            non_finite.push(i);
        }
        values.push((plus - minus) / (2.0 * h));
    }
    FiniteDiff { values, non_finite }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_err: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub entries: Vec<CheckEntry>,
    /// Maximum relative error over entries with `|numeric| > floor`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub tolerance: f64,
    pub floor: f64,
    pub step: f64,
    pub pass: bool,
    pub detail: Option<String>,
}

impl CheckReport {
    /// Compares analytic and numeric gradients entry by entry.
    pub fn compare(
        name: impl Into<String>,
        analytic: &[f64],
        numeric: &FiniteDiff,
        step: f64,
        tolerance: f64,
    ) -> Self {
        let name = name.into();
        let mut detail = None;
        if analytic.len() != numeric.values.len() {
            detail = Some(format!(
                "length mismatch: {} analytic vs {} numeric",
                analytic.len(),
                numeric.values.len()
            ));
        }
        let mut entries = Vec::with_capacity(analytic.len());
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut bad = Vec::new();
        for (i, (&a, &n)) in analytic.iter().zip(&numeric.values).enumerate() {
            let abs_err = (a - n).abs();
            let denom = a.abs().max(n.abs());
            let rel_err = if denom > 0.0 { abs_err / denom } else { 0.0 };
            if !a.is_finite() || !n.is_finite() {
                bad.push(i);
            } else if n.abs() > NUMERIC_FLOOR {
                max_rel = max_rel.max(rel_err);
            }
            max_abs = max_abs.max(abs_err);
            entries.push(CheckEntry {
                index: i,
                analytic: a,
                numeric: n,
                abs_err,
                rel_err,
            });
        }
        if !bad.is_empty() || !numeric.non_finite.is_empty() {
            bad.extend(&numeric.non_finite);
            bad.sort_unstable();
            bad.dedup();
            detail = Some(format!("non-finite values at entries {bad:?}"));
        }
        let pass = detail.is_none() && max_rel < tolerance;
        CheckReport {
            name,
            entries,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            tolerance,
            floor: NUMERIC_FLOOR,
            step,
            pass,
            detail,
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{:<32} {} max_rel_err={:.3e} (tol {:.0e}, {} entries)",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tolerance,
            self.entries.len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let fd = finite_diff(|p| p[0] * p[0], &[3.0], 1e-5);
        assert!((fd.values[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let fd = finite_diff(|_| 4.25, &[0.3, -1.0, 7.0], 1e-5);
        assert!(fd.values.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn sine_matches_cosine() {
        let fd = finite_diff(|p| p[0].sin(), &[0.7], 1e-5);
        assert!((fd.values[0] - 0.7f64.cos()).abs() < 1e-9);
    }

    #[test]
    fn non_finite_evaluations_are_reported() {
        let fd = finite_diff(|p| if p[1] > 0.0 { f64::NAN } else { p[0] }, &[1.0, 0.0], 1e-5);
        assert_eq!(fd.non_finite, vec![1]);
        let report = CheckReport::compare("nan", &[1.0, 0.0], &fd, 1e-5, 1e-6);
        assert!(!report.pass);
        assert!(report.detail.unwrap().contains("[1]"));
    }

    #[test]
    fn tiny_numeric_entries_are_excluded() {
        let fd = FiniteDiff {
            values: vec![1.0, 1e-12],
            non_finite: vec![],
        };
        let report = CheckReport::compare("floor", &[1.0, 5e-12], &fd, 1e-5, 1e-6);
        assert!(report.pass);
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn report_round_trips_through_json() {
        let fd = finite_diff(|p| p[0] * p[1], &[2.0, 3.0], 1e-5);
        let report = CheckReport::compare("prod", &[3.0, 2.0], &fd, 1e-5, 1e-6);
        let json = serde_json::to_string(&report).unwrap();
        let back: CheckReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
    }
}
