//! Central-finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Compare analytic gradients against central differences.
///
/// `build` reconstructs the forward computation from leaf nodes (one per
/// entry of `params`, in order) and returns the scalar loss node. Every leaf
/// with `requires_grad` is perturbed elementwise with step `h`; the result is
/// the maximum over all checked elements of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(build: &F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    assert!(h > 0.0, "finite-difference step must be positive");

    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        let v = tape.data(loss)[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    if !tape.tensor(loss).is_finite() {
        return Err(Error::NonFinite("loss is not finite".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = ids
        .iter()
        .zip(params)
        .map(|(&id, t)| if t.requires_grad { Some(tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()])) } else { None })
        .collect();

    let mut max_rel = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        let Some(grads) = grads else { continue };
        for ei in 0..params[pi].numel() {
            let mut plus = params.to_vec();
            plus[pi].data[ei] += h;
            let lp = eval(&plus)?;
            let mut minus = params.to_vec();
            minus[pi].data[ei] -= h;
            let lm = eval(&minus)?;
            let numeric = (lp - lm) / (2.0 * h);
            let a = grads[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
