use super::graph::{Graph, NodeId};
use crate::{Error, Result, Scalar};

/// Largest `|analytic − numeric| / max(1, |numeric|)` over every coordinate of
/// `leaf`, where `numeric` is the central difference with step `h`.
pub fn finite_diff_check<T: Scalar>(
    graph: &Graph<T>,
    loss: NodeId,
    leaf: NodeId,
    h: f64,
) -> Result<f64> {
    let n = graph.value(leaf).numel();
    finite_diff_check_coords(graph, loss, leaf, h, &(0..n).collect::<Vec<_>>())
}

/// As [`finite_diff_check`], restricted to the given flat coordinates.
pub fn finite_diff_check_coords<T: Scalar>(
    graph: &Graph<T>,
    loss: NodeId,
    leaf: NodeId,
    h: f64,
    coords: &[usize],
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::contract("finite difference step must be positive"));
    }
    if !graph.is_leaf(leaf) {
        return Err(Error::contract(format!(
            "node {} is not a leaf",
            leaf.index()
        )));
    }
    let analytic = graph.backward(loss)?.get(leaf);
    let base = graph.value(leaf).clone();
    let mut scratch = graph.clone();
    let mut worst = 0.0f64;
    for &c in coords {
        if c >= base.numel() {
            return Err(Error::contract(format!("coordinate {c} out of range")));
        }
        let mut eval_at = |delta: f64| -> Result<f64> {
            let mut t = base.clone();
            t.data_mut()[c] += T::c(delta);
            scratch.replay(&[(leaf, t)])?;
            Ok(scratch.value(loss).item().f64())
        };
        let plus = eval_at(h)?;
        let minus = eval_at(-h)?;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic.data()[c].f64() - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
