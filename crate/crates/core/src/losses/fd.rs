//! Central finite differences, used as an independent check on the
//! analytic gradients.

use crate::error::{Error, Result};
use crate::types::EmbeddingField;

/// Central-difference gradient of `loss` at `field`, one coordinate at a
/// time (`2 * N * D` evaluations).
pub fn fd_gradient<F>(mut loss: F, field: &EmbeddingField, h: f64) -> Result<EmbeddingField>
where
    F: FnMut(&EmbeddingField) -> Result<f64>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Domain(format!("step must be > 0, got {h}")));
    }
    let mut probe = field.clone();
    let mut out = vec![0.0; field.data().len()];
    for (j, slot) in out.iter_mut().enumerate() {
        let x = field.data()[j];
        probe.data_mut()[j] = x + h;
        let plus = loss(&probe)?;
        probe.data_mut()[j] = x - h;
        let minus = loss(&probe)?;
        probe.data_mut()[j] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteValue(format!("loss probe at coordinate {j}")));
        }
        *slot = (plus - minus) / (2.0 * h);
    }
    EmbeddingField::new(field.height(), field.width(), field.channels(), out)
}

/// Outcome of comparing two gradients coordinate by coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradComparison {
    /// Largest `|a - n| / max(|a|, |n|)` over compared coordinates.
    pub max_rel_err: f64,
    /// Largest absolute difference over all coordinates.
    pub max_abs_err: f64,
    pub compared: usize,
    pub worst_index: Option<usize>,
}

/// Compares `analytic` against `numeric` on coordinates where either
/// magnitude exceeds `min_abs`.
pub fn compare(analytic: &[f64], numeric: &[f64], min_abs: f64) -> GradComparison {
    let mut out =
        GradComparison { max_rel_err: 0.0, max_abs_err: 0.0, compared: 0, worst_index: None };
    for (j, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let abs_err = (a - n).abs();
        out.max_abs_err = out.max_abs_err.max(abs_err);
        let scale = a.abs().max(n.abs());
        if scale <= min_abs {
            continue;
        }
        out.compared += 1;
        let rel = abs_err / scale;
        if rel > out.max_rel_err || out.worst_index.is_none() {
            out.max_rel_err = out.max_rel_err.max(rel);
            out.worst_index = Some(j);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let field =
            EmbeddingField::new(2, 2, 2, vec![0.3, -1.2, 2.0, 0.0, -0.7, 5.5, 1.0, -3.25]).unwrap();
        let g = fd_gradient(|f| Ok(f.data().iter().map(|v| v * v).sum()), &field, 1e-4).unwrap();
        for (gi, ei) in g.data().iter().zip(field.data()) {
            assert!((gi - 2.0 * ei).abs() < 1e-8, "{gi} vs {}", 2.0 * ei);
        }
    }

    #[test]
    fn halving_step_shrinks_error_quadratically() {
        // f = sum sin(x) cubes; smooth with nonzero third derivative
        let field = EmbeddingField::new(1, 3, 1, vec![0.4, -0.9, 1.3]).unwrap();
        let loss = |f: &EmbeddingField| Ok(f.data().iter().map(|v| v.sin().powi(3)).sum::<f64>());
        let exact: Vec<f64> = field.data().iter().map(|v| 3.0 * v.sin().powi(2) * v.cos()).collect();
        let err = |h: f64| {
            let g = fd_gradient(loss, &field, h).unwrap();
            g.data().iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn non_finite_probe_is_reported() {
        let field = EmbeddingField::new(1, 1, 1, vec![0.0]).unwrap();
        let r = fd_gradient(|_| Ok(f64::NAN), &field, 1e-3);
        assert!(matches!(r, Err(Error::NonFiniteValue(_))));
        assert!(matches!(fd_gradient(|_| Ok(0.0), &field, 0.0), Err(Error::Domain(_))));
    }
}
