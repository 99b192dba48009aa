//! Equation checking on top of the exact calculator.
//!
//! An equation is split on '=' into two or more expressions; the check
//! holds when every adjacent pair is equal. Without a tolerance, exact
//! values compare exactly; once any side is approximate a small relative
//! epsilon absorbs float noise. An explicit tolerance t accepts
//! |lhs - rhs| <= t * max(1, |rhs|), evaluated in exact arithmetic
//! whenever both sides are exact.

use num_rational::BigRational;
use num_traits::{FromPrimitive, One, Signed};

use super::calculator::{evaluate, format_value, CalcError, CalcValue};

/// Relative epsilon for comparisons that involve an approximate side.
pub const APPROX_REL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EquationCheck {
    pub holds: bool,
    pub sides: Vec<CalcValue>,
}

pub fn check_equation(equation: &str, tolerance: Option<f64>) -> Result<EquationCheck, CalcError> {
    let segments: Vec<&str> = equation.split('=').collect();
    if segments.len() < 2 {
        return Err(CalcError::Parse {
            position: 0,
            detail: "expected an equation containing '='".to_string(),
        });
    }
    if let Some(t) = tolerance {
        if !(t.is_finite() && t >= 0.0) {
            return Err(CalcError::Parse {
                position: 0,
                detail: "tolerance must be a finite non-negative number".to_string(),
            });
        }
    }
    let mut sides = Vec::with_capacity(segments.len());
    for segment in &segments {
        sides.push(evaluate(segment)?);
    }
    let holds = sides
        .windows(2)
        .all(|pair| sides_equal(&pair[0], &pair[1], tolerance));
    Ok(EquationCheck { holds, sides })
}

fn sides_equal(lhs: &CalcValue, rhs: &CalcValue, tolerance: Option<f64>) -> bool {
    match (lhs.as_exact(), rhs.as_exact(), tolerance) {
        (Some(l), Some(r), None) => l == r,
        (Some(l), Some(r), Some(t)) => {
            // from_f64 only fails for non-finite values, which were rejected.
            let t = BigRational::from_f64(t).expect("finite tolerance");
            let scale = r.abs().max(BigRational::one());
            (l - r).abs() <= t * scale
        }
        _ => {
            let (l, r) = (lhs.to_f64(), rhs.to_f64());
            let bound = tolerance.unwrap_or(APPROX_REL_EPS) * r.abs().max(1.0);
            (l - r).abs() <= bound
        }
    }
}

/// One-line report of an equation check, used as the tool observation.
pub fn format_check(check: &EquationCheck) -> String {
    let values: Vec<String> = check.sides.iter().map(format_value).collect();
    let verdict = if check.holds {
        "the equation holds"
    } else {
        "the equation does not hold"
    };
    format!("sides evaluate to {}; {}", values.join(" vs "), verdict)
}
