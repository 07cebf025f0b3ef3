//! Central finite-difference verification of tape gradients.
//!
//! The checker rebuilds the graph from scratch for every probe, so the
//! function under test must be deterministic given its leaf values: any
//! discrete choices (mined negatives, mask positions, teacher targets) have
//! to be frozen by the caller before checking.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape, Tensor};

/// Acceptance tolerance on the max relative error.
pub const GRAD_CHECK_TOL: f64 = 1e-4;
/// Default central-difference step.
pub const GRAD_CHECK_EPS: f64 = 1e-5;

/// Checks one input tensor. Returns the max over coordinates of
/// `|analytic - central difference| / max(1, |analytic|)`.
pub fn grad_check<Gf>(f: Gf, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    Gf: Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>,
{
    grad_check_many(std::slice::from_ref(point), eps, |tape, ids| f(tape, ids[0]))
}

/// Checks several input tensors against one scalar function of all of them.
/// Leaves are created trainable, in order, and handed to `f`.
pub fn grad_check_many<Gf>(points: &[Tensor<f64>], eps: f64, f: Gf) -> Result<f64>
where
    Gf: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::BadEpsilon { eps });
    }

    let eval = |pts: &[Tensor<f64>], grads: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let mut ids = Vec::with_capacity(pts.len());
        for t in pts {
            ids.push(tape.leaf_tensor(t, true)?);
        }
        let root = f(&mut tape, &ids)?;
        let (r, c) = tape.shape(root);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarRoot { rows: r, cols: c });
        }
        let v = tape.value(root)[0];
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { what: "grad_check probe".into() });
        }
        if !grads {
            return Ok((v, None));
        }
        tape.backward(root)?;
        let out = ids
            .iter()
            .map(|&id| match tape.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(id).len()],
            })
            .collect();
        Ok((v, Some(out)))
    };

    let (_, analytic) = eval(points, true)?;
    let analytic = analytic.expect("grads requested");

    let mut probe: Vec<Tensor<f64>> = points.to_vec();
    let mut worst = 0.0f64;
    for ti in 0..points.len() {
        for i in 0..points[ti].data.len() {
            let orig = points[ti].data[i];
            probe[ti].data[i] = orig + eps;
            let (fp, _) = eval(&probe, false)?;
            probe[ti].data[i] = orig - eps;
            let (fm, _) = eval(&probe, false)?;
            probe[ti].data[i] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let a = analytic[ti][i];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
