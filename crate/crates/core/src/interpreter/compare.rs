// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use super::{InterpError, Tensors};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorError {
    pub name: String,
    pub max_abs: f64,
    /// Normwise: `max_abs / max|b|`.
    pub max_rel: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub tensors: Vec<TensorError>,
    pub tol_rel: f64,
    pub tol_abs: f64,
}

impl CompareReport {
    pub fn pass(&self) -> bool {
        self.tensors.iter().all(|t| t.pass)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_abs).fold(0.0, f64::max)
    }

    pub fn max_rel(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel).fold(0.0, f64::max)
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{}: max_abs={:.3e} max_rel={:.3e} {}",
                t.name,
                t.max_abs,
                t.max_rel,
                if t.pass { "ok" } else { "BREACH" }
            )?;
        }
        Ok(())
    }
}

/// Elementwise distance that treats matching infinities and matching NaNs
/// as equal and any other non-finite disagreement as infinitely far.
fn distance(a: f64, b: f64) -> f64 {
    if a == b || (a.is_nan() && b.is_nan()) {
        0.0
    } else if a.is_finite() && b.is_finite() {
        (a - b).abs()
    } else {
        f64::INFINITY
    }
}

/// Per-tensor errors of `a` against the reference `b`. A tensor passes when
/// `max_abs <= tol_abs + tol_rel * max|b|`.
pub fn compare(a: &Tensors, b: &Tensors, tol_rel: f64, tol_abs: f64) -> Result<CompareReport, InterpError> {
    let mut out = Vec::new();
    for (name, tb) in b {
        let ta = a.get(name).ok_or_else(|| InterpError::MissingTensor(name.clone()))?;
        if ta.shape != tb.shape {
            return Err(InterpError::ShapeMismatch { tensor: name.clone(), expected: tb.shape.clone(), got: ta.shape.clone() });
        }
        let max_abs = ta.data.iter().zip(&tb.data).map(|(x, y)| distance(*x, *y)).fold(0.0, f64::max);
        let scale = tb.data.iter().filter(|v| v.is_finite()).map(|v| v.abs()).fold(0.0, f64::max);
        let max_rel = if max_abs == 0.0 { 0.0 } else { max_abs / scale };
        out.push(TensorError { name: name.clone(), max_abs, max_rel, pass: max_abs <= tol_abs + tol_rel * scale });
    }
    if let Some(extra) = a.keys().find(|k| !b.contains_key(*k)) {
        return Err(InterpError::MissingTensor(extra.clone()));
    }
    Ok(CompareReport { tensors: out, tol_rel, tol_abs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpreter::TensorValue;

    fn one(name: &str, v: Vec<f64>) -> Tensors {
        let n = v.len();
        Tensors::from([(name.to_string(), TensorValue::new(&[n], v))])
    }

    #[test]
    fn identical_maps_have_zero_error() {
        let a = one("y", vec![1.0, f64::NEG_INFINITY, -2.0]);
        let r = compare(&a, &a, 0.0, 0.0).unwrap();
        assert_eq!((r.max_abs(), r.max_rel()), (0.0, 0.0));
        assert!(r.pass());
    }

    #[test]
    fn relative_error_is_normwise() {
        let r = compare(&one("y", vec![4.0, 0.5]), &one("y", vec![4.0, 0.0]), 0.2, 0.0).unwrap();
        assert_eq!(r.tensors[0].max_abs, 0.5);
        assert_eq!(r.tensors[0].max_rel, 0.125);
        assert!(r.pass());
        assert!(!compare(&one("y", vec![4.0, 0.5]), &one("y", vec![4.0, 0.0]), 0.1, 0.0).unwrap().pass());
    }

    #[test]
    fn mismatched_shapes() {
        let a = Tensors::from([("y".into(), TensorValue::filled(&[2, 2], 0.0))]);
        let b = Tensors::from([("y".into(), TensorValue::filled(&[4], 0.0))]);
        assert!(matches!(compare(&a, &b, 1.0, 1.0), Err(InterpError::ShapeMismatch { .. })));
    }

    #[test]
    fn nan_against_number_fails() {
        let r = compare(&one("y", vec![f64::NAN]), &one("y", vec![1.0]), 1.0, 1.0).unwrap();
        assert!(!r.pass());
    }
}
