//! Soft Dice overlap loss.

use crate::error::{check_dims, Error, Result};
use crate::volume::OneHotMask;

pub const DICE_EPS: f64 = 1e-7;

/// `1 - mean_k 2 sum(a b) / (sum a + sum b + eps)` over classes that are
/// non-empty on at least one side. Returns 0 when no class is present.
pub fn dice_loss(fixed: &OneHotMask, moved: &OneHotMask) -> Result<f64> {
    check_dice_inputs(fixed, moved)?;
    Ok(dice_with_grad(fixed, moved, false).0)
}

pub(crate) fn check_dice_inputs(fixed: &OneHotMask, moved: &OneHotMask) -> Result<()> {
    if fixed.num_classes() != moved.num_classes() {
        return Err(Error::ClassMismatch {
            left: fixed.num_classes(),
            right: moved.num_classes(),
        });
    }
    check_dims("dice_loss", fixed.dims(), moved.dims())
}

/// Loss and its gradient with respect to each moved channel.
pub(crate) fn dice_with_grad(fixed: &OneHotMask, moved: &OneHotMask, want_grad: bool) -> (f64, Vec<Vec<f64>>) {
    let mut scores = Vec::new();
    let mut parts = Vec::new();
    for (k, (a, b)) in fixed.channels().iter().zip(moved.channels()).enumerate() {
        let sa: f64 = a.iter().sum();
        let sb: f64 = b.iter().sum();
        if sa + sb <= 0.0 {
            continue;
        }
        let inter: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let denom = sa + sb + DICE_EPS;
        scores.push(2.0 * inter / denom);
        parts.push((k, inter, denom));
    }
    if scores.is_empty() {
        let grad = if want_grad { vec![vec![0.0; fixed.dims().len()]; fixed.num_classes()] } else { Vec::new() };
        return (0.0, grad);
    }
    let present = scores.len() as f64;
    let value = 1.0 - scores.iter().sum::<f64>() / present;
    if !want_grad {
        return (value, Vec::new());
    }
    let mut grad = vec![vec![0.0; fixed.dims().len()]; fixed.num_classes()];
    for (k, inter, denom) in parts {
        let a = &fixed.channels()[k];
        let g = &mut grad[k];
        for q in 0..a.len() {
            g[q] = -(2.0 * a[q] / denom - 2.0 * inter / (denom * denom)) / present;
        }
    }
    (value, grad)
}
