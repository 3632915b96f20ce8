//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checked function records its computation on a [`Graph`]. Perturbed
//! evaluations replay only the nodes downstream of the perturbed parameter,
//! so a full check over every parameter element stays affordable.

use crate::error::{Error, Result};
use crate::graph::{eval_op, Graph, Op, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so exactly-zero gradients
/// compare by absolute difference.
pub const RELATIVE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter elements compared.
    pub checked: usize,
    /// Elements skipped because every tried step crossed a ReLU kink.
    pub kinks_skipped: usize,
    /// Location of the largest relative error.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the reverse-mode gradient of `f` against central differences with
/// step `h` for every element of every parameter in `store`.
///
/// When a perturbation flips the sign of any ReLU input the step is retried
/// at `h/10` and `h/100`; elements that still straddle a kink are counted in
/// [`GradCheckReport::kinks_skipped`] rather than compared.
pub fn gradcheck<F>(f: F, store: &ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let mut graph = Graph::new();
    let loss = f(&mut graph, store)?;
    let base = graph.scalar(loss);
    if !base.is_finite() {
        return Err(Error::NonFinite {
            context: "gradcheck loss".into(),
        });
    }
    let grads = graph.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        kinks_skipped: 0,
        worst: None,
    };
    let record = |key: &str, i: usize, analytic: f64, numeric: f64, report: &mut GradCheckReport| {
        let rel = relative_error(analytic, numeric);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((key.to_string(), i));
        }
    };

    for (key, tensor) in store.iter() {
        let Some(&var) = graph.param_vars().get(key) else {
            // Not reachable from the loss: both derivatives are exactly zero.
            report.checked += tensor.len();
            continue;
        };
        let analytic = grads.get(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tensor.len()]);
        let replay = Replay::new(&graph, var, loss);
        let mut scratch: Vec<Tensor> = graph.values().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let mut step = h;
            let mut numeric = None;
            for _ in 0..3 {
                let plus = replay.eval(&mut scratch, i, step)?;
                let minus = replay.eval(&mut scratch, i, -step)?;
                if plus.kink || minus.kink {
                    step /= 10.0;
                    continue;
                }
                if !(plus.loss.is_finite() && minus.loss.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("perturbed loss at {key}[{i}]"),
                    });
                }
                numeric = Some((plus.loss - minus.loss) / (2.0 * step));
                break;
            }
            scratch[var.index()].data_mut()[i] = graph.value(var).data()[i];
            match numeric {
                Some(n) => record(key, i, a, n, &mut report),
                None => report.kinks_skipped += 1,
            }
        }
    }
    Ok(report)
}

struct Probe {
    loss: f64,
    kink: bool,
}

/// Nodes downstream of one parameter leaf, in tape order.
struct Replay<'g> {
    graph: &'g Graph,
    leaf: Var,
    loss: Var,
    dirty: Vec<usize>,
}

impl<'g> Replay<'g> {
    fn new(graph: &'g Graph, leaf: Var, loss: Var) -> Self {
        let mut is_dirty = vec![false; loss.index() + 1];
        is_dirty[leaf.index()] = true;
        let mut dirty = Vec::new();
        for (i, op) in graph.ops().iter().enumerate().take(loss.index() + 1).skip(leaf.index() + 1) {
            if op.inputs().iter().any(|v| is_dirty[v.index()]) {
                is_dirty[i] = true;
                dirty.push(i);
            }
        }
        Replay {
            graph,
            leaf,
            loss,
            dirty,
        }
    }

    fn eval(&self, scratch: &mut [Tensor], element: usize, delta: f64) -> Result<Probe> {
        let base = self.graph.values();
        let leaf = self.leaf.index();
        scratch[leaf].data_mut()[element] = base[leaf].data()[element] + delta;
        let mut kink = false;
        for &i in &self.dirty {
            let op = &self.graph.ops()[i];
            if let Op::Relu(input) = op {
                let now = scratch[input.index()].data();
                let was = base[input.index()].data();
                kink |= now.iter().zip(was).any(|(a, b)| (*a > 0.0) != (*b > 0.0));
            }
            scratch[i] = eval_op(op, scratch)?;
        }
        let loss = if self.dirty.last() == Some(&self.loss.index()) {
            scratch[self.loss.index()].data()[0]
        } else {
            base[self.loss.index()].data()[0]
        };
        Ok(Probe { loss, kink })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_machine_exact() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![0.3, -1.2, 2.0]));
        s.insert("b", Tensor::scalar(0.5));
        let r = gradcheck(
            |g, s| {
                let w = g.param(s, "w")?;
                let b = g.param(s, "b")?;
                let x = g.input(Tensor::vector(vec![1.5, -0.5, 4.0]));
                let d = g.dot(w, x)?;
                g.add(d, b)
            },
            &s,
            1e-4,
        )
        .unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn quadratic_central_difference() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(1.0));
        let f = |g: &mut Graph, s: &ParamStore| {
            let x = g.param(s, "x")?;
            g.dot(x, x)
        };
        let r = gradcheck(f, &s, 1e-4).unwrap();
        // Central differences are exact for quadratics up to rounding.
        assert!(r.max_abs_error < 1e-8, "{r:?}");
        let fd = ((1.0f64 + 1e-4).powi(2) - (1.0f64 - 1e-4).powi(2)) / 2e-4;
        assert!((fd - 2.0).abs() < 1e-8);
    }

    #[test]
    fn relu_kinks_are_retried_then_skipped() {
        let mut s = ParamStore::new();
        // 1e-5 sits inside the first step but outside h/100 = 1e-6.
        s.insert("x", Tensor::vector(vec![1e-5, 0.0, 2.0]));
        let r = gradcheck(
            |g, s| {
                let x = g.param(s, "x")?;
                let r = g.relu(x)?;
                let ones = g.input(Tensor::vector(vec![1.0; 3]));
                g.dot(r, ones)
            },
            &s,
            1e-4,
        )
        .unwrap();
        assert_eq!(r.kinks_skipped, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn unused_parameters_count_as_exact() {
        let mut s = ParamStore::new();
        s.insert("used", Tensor::scalar(2.0));
        s.insert("unused", Tensor::zeros(&[5]));
        let r = gradcheck(|g, s| g.param(s, "used"), &s, 1e-4).unwrap();
        assert_eq!(r.checked, 6);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(f64::INFINITY));
        let err = gradcheck(|g, s| g.param(s, "x"), &s, 1e-4).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn normalized_dot_matches() {
        let mut s = ParamStore::new();
        s.insert("v", Tensor::vector(vec![0.3, -0.7, 1.1]));
        let f = |g: &mut Graph, s: &ParamStore| {
            let v = g.param(s, "v")?;
            let n = g.l2_normalize(v)?;
            let c = g.input(Tensor::vector(vec![0.2, 0.5, -0.1]));
            let d = g.dot(n, c)?;
            g.scale(d, 3.0)
        };
        let r = gradcheck(f, &s, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }
}
