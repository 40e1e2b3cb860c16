//! Diffusion regularizer on the displacement.

use crate::warp::DisplacementField;

/// Mean over voxels of the squared forward-difference gradient of `u`;
/// differences that would leave the volume are zero.
pub fn smoothness(field: &DisplacementField) -> f64 {
    smoothness_with_grad(field, false).0
}

pub(crate) fn smoothness_with_grad(field: &DisplacementField, want_grad: bool) -> (f64, Vec<[f64; 3]>) {
    let dims = field.dims();
    let u = field.vectors();
    let n = dims.len() as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![[0.0; 3]; dims.len()] } else { Vec::new() };
    for (i, p) in dims.iter() {
        for a in 0..3 {
            if p[a] + 1 >= dims.0[a] {
                continue;
            }
            let j = i + dims.stride(a);
            for c in 0..3 {
                let d = u[j][c] - u[i][c];
                total += d * d;
                if want_grad {
                    grad[j][c] += 2.0 * d / n;
                    grad[i][c] -= 2.0 * d / n;
                }
            }
        }
    }
    (total / n, grad)
}
