//! Central finite-difference gradient checking.

use super::{Bindings, Graph, NodeId, NumericsError};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Perturbation size for the central difference.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator. Keeps entries whose
    /// true gradient is ~0 from being judged on roundoff alone.
    pub scale_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            scale_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryRef {
    pub leaf: String,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries whose ±eps probes straddle a hinge or argmax kink.
    pub skipped: Vec<EntryRef>,
    pub max_rel_error: f64,
    pub worst: Option<EntryRef>,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar `root` against central
/// differences for every entry of every bound leaf.
///
/// An entry is skipped when the kink signature (hinge sign classes and
/// max/min argindices) differs between the base point and either probe:
/// the function is not differentiable along that coordinate within `eps`.
pub fn grad_check(
    graph: &Graph,
    root: NodeId,
    bindings: &Bindings,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, NumericsError> {
    let base_trace = graph.forward(bindings)?;
    let analytic = graph.backward_trace(root, &base_trace)?;
    let base_sig = graph.kink_signature(&base_trace);

    let mut report = GradCheckReport {
        checked: 0,
        skipped: Vec::new(),
        max_rel_error: 0.0,
        worst: None,
        passed: true,
    };
    let mut probe = bindings.clone();

    for (name, _) in graph.leaves() {
        let Some(value) = bindings.get(name) else {
            continue;
        };
        for index in 0..value.len() {
            let x0 = value.data()[index];
            probe.get_mut(name).unwrap().data_mut()[index] = x0 + cfg.eps;
            let plus = graph.forward(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[index] = x0 - cfg.eps;
            let minus = graph.forward(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[index] = x0;

            let entry = EntryRef {
                leaf: name.to_string(),
                index,
            };
            if graph.kink_signature(&plus) != base_sig || graph.kink_signature(&minus) != base_sig {
                report.skipped.push(entry);
                continue;
            }
            let numeric = (plus.scalar(root) - minus.scalar(root)) / (2.0 * cfg.eps);
            let a = analytic[name].data()[index];
            let err = relative_error(a, numeric, cfg.scale_floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(entry);
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Array, GradFault, OpKind};

    fn quadratic() -> (Graph, NodeId, Bindings) {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1, 3]).unwrap();
        let a = g.leaf("a", &[3, 3]).unwrap();
        let xa = g.matmul(x, a).unwrap();
        let q = g.mul(xa, x).unwrap();
        let s = g.sum(q).unwrap();
        let mut b = Bindings::new();
        b.insert("x".into(), Array::matrix(1, 3, vec![0.3, -1.2, 0.8]).unwrap());
        b.insert(
            "a".into(),
            Array::matrix(3, 3, vec![2.0, 0.5, -0.1, 0.5, 1.0, 0.3, -0.1, 0.3, 1.5]).unwrap(),
        );
        (g, s, b)
    }

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        let (g, root, b) = quadratic();
        let cfg = GradCheckConfig {
            eps: 1e-5,
            tol: 1e-6,
            scale_floor: 1e-3,
        };
        let r = grad_check(&g, root, &b, &cfg).unwrap();
        assert!(r.passed, "max rel err {}", r.max_rel_error);
        assert!(r.max_rel_error < 1e-6);
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn hinge_at_zero_is_skipped() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[2]).unwrap();
        let h = g.hinge(x).unwrap();
        let s = g.sum(h).unwrap();
        let mut b = Bindings::new();
        b.insert("x".into(), Array::vector(vec![0.0, 0.7]).unwrap());
        let r = grad_check(&g, s, &b, &GradCheckConfig::default()).unwrap();
        assert_eq!(
            r.skipped,
            vec![EntryRef {
                leaf: "x".into(),
                index: 0
            }]
        );
        assert_eq!(r.checked, 1);
        assert!(r.passed);
    }

    #[test]
    fn perturbed_gradient_fails() {
        let (mut g, root, b) = quadratic();
        g.set_fault(Some(GradFault {
            kind: OpKind::MatMul,
            factor: 1.5,
        }));
        let r = grad_check(&g, root, &b, &GradCheckConfig::default()).unwrap();
        assert!(!r.passed);
    }
}
