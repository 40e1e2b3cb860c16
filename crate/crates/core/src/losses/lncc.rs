//! Local normalized cross-correlation over cubic windows.
//!
//! Windows are the `w x w x w` blocks that fit entirely inside the volume.
//! For each window the squared correlation coefficient
//! `cc = (sum f~ m~)^2 / (sum f~^2 * sum m~^2)` is formed from the
//! mean-subtracted samples; the loss is `-mean(cc)` so it lies in `[-1, 0]`.
//! Windows where either side has variance below [`VARIANCE_EPS`] count as 0.

use crate::error::{check_dims, Error, Result};
use crate::grid::Dims;
use crate::volume::Volume;

pub const VARIANCE_EPS: f64 = 1e-5;

pub fn validate_window(dims: Dims, window: usize) -> Result<()> {
    if window < 3 || window % 2 == 0 || window > dims.min_axis() {
        return Err(Error::InvalidArgument(format!(
            "LNCC window {window} must be odd, at least 3 and at most {}",
            dims.min_axis()
        )));
    }
    Ok(())
}

/// Sums of every length-`w` run along `axis`; that axis shrinks to `n - w + 1`.
fn box_valid_axis(dims: Dims, data: &[f64], w: usize, axis: usize) -> (Dims, Vec<f64>) {
    let mut out_dims = dims;
    out_dims.0[axis] = dims.0[axis] - w + 1;
    let mut out = vec![0.0; out_dims.len()];
    let n = dims.0[axis];
    let m = out_dims.0[axis];
    let (sin, sout) = (dims.stride(axis), out_dims.stride(axis));
    let mut prefix = vec![0.0; n + 1];
    for (o, [x, y, z]) in out_dims.iter() {
        let mut p = [x, y, z];
        if p[axis] != 0 {
            continue;
        }
        p[axis] = 0;
        let base_in = dims.index(p[0], p[1], p[2]);
        for k in 0..n {
            prefix[k + 1] = prefix[k] + data[base_in + k * sin];
        }
        for s in 0..m {
            out[o + s * sout] = prefix[s + w] - prefix[s];
        }
    }
    (out_dims, out)
}

/// Adjoint of [`box_valid_axis`]: scatters window sums back over the runs they covered.
fn box_adjoint_axis(full: Dims, valid: Dims, data: &[f64], w: usize, axis: usize) -> (Dims, Vec<f64>) {
    let mut out_dims = valid;
    out_dims.0[axis] = full.0[axis];
    let n = full.0[axis];
    let m = valid.0[axis];
    let mut out = vec![0.0; out_dims.len()];
    let (sin, sout) = (valid.stride(axis), out_dims.stride(axis));
    let mut prefix = vec![0.0; m + 1];
    for (o, [x, y, z]) in out_dims.iter() {
        let mut p = [x, y, z];
        if p[axis] != 0 {
            continue;
        }
        p[axis] = 0;
        let base_in = valid.index(p[0], p[1], p[2]);
        for k in 0..m {
            prefix[k + 1] = prefix[k] + data[base_in + k * sin];
        }
        for xq in 0..n {
            let lo = (xq + 1).saturating_sub(w);
            let hi = xq.min(m - 1);
            out[o + xq * sout] = if lo <= hi { prefix[hi + 1] - prefix[lo] } else { 0.0 };
        }
    }
    (out_dims, out)
}

fn box_valid(dims: Dims, data: &[f64], w: usize) -> (Dims, Vec<f64>) {
    let (d, v) = box_valid_axis(dims, data, w, 0);
    let (d, v) = box_valid_axis(d, &v, w, 1);
    box_valid_axis(d, &v, w, 2)
}

fn box_adjoint(full: Dims, valid: Dims, data: &[f64], w: usize) -> Vec<f64> {
    let (d, v) = box_adjoint_axis(full, valid, data, w, 2);
    let (d, v) = box_adjoint_axis(full, d, &v, w, 1);
    let (_, v) = box_adjoint_axis(full, d, &v, w, 0);
    v
}

fn centered(data: &[f64]) -> Vec<f64> {
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    data.iter().map(|v| v - mean).collect()
}

struct WindowStats {
    valid: Dims,
    mean_f: Vec<f64>,
    mean_m: Vec<f64>,
    cross: Vec<f64>,
    var_f: Vec<f64>,
    var_m: Vec<f64>,
}

fn window_stats(dims: Dims, f: &[f64], m: &[f64], w: usize) -> WindowStats {
    let n = (w * w * w) as f64;
    let ff: Vec<f64> = f.iter().map(|v| v * v).collect();
    let mm: Vec<f64> = m.iter().map(|v| v * v).collect();
    let fm: Vec<f64> = f.iter().zip(m).map(|(a, b)| a * b).collect();
    let (valid, sf) = box_valid(dims, f, w);
    let (_, sm) = box_valid(dims, m, w);
    let (_, sff) = box_valid(dims, &ff, w);
    let (_, smm) = box_valid(dims, &mm, w);
    let (_, sfm) = box_valid(dims, &fm, w);
    let mean_f: Vec<f64> = sf.iter().map(|s| s / n).collect();
    let mean_m: Vec<f64> = sm.iter().map(|s| s / n).collect();
    let cross = (0..valid.len()).map(|i| sfm[i] - sf[i] * mean_m[i]).collect();
    let var_f = (0..valid.len()).map(|i| sff[i] - sf[i] * mean_f[i]).collect();
    let var_m = (0..valid.len()).map(|i| smm[i] - sm[i] * mean_m[i]).collect();
    WindowStats {
        valid,
        mean_f,
        mean_m,
        cross,
        var_f,
        var_m,
    }
}

/// Loss value and its gradient with respect to every moved-image voxel.
pub(crate) fn lncc_with_grad(dims: Dims, fixed: &[f64], moved: &[f64], w: usize, want_grad: bool) -> (f64, Vec<f64>) {
    // LNCC ignores global offsets; centring keeps the window sums well conditioned
    let f = centered(fixed);
    let m = centered(moved);
    let st = window_stats(dims, &f, &m, w);
    let n = (w * w * w) as f64;
    let windows = st.valid.len() as f64;
    let eps = VARIANCE_EPS * n;
    let mut total = 0.0;
    let mut alpha = vec![0.0; st.valid.len()];
    let mut beta = vec![0.0; st.valid.len()];
    for i in 0..st.valid.len() {
        let (a, b, c) = (st.cross[i], st.var_f[i], st.var_m[i]);
        if b < eps || c < eps {
            continue;
        }
        total += a * a / (b * c);
        alpha[i] = 2.0 * a / (b * c);
        beta[i] = 2.0 * a * a / (b * c * c);
    }
    let value = -total / windows;
    if !want_grad {
        return (value, Vec::new());
    }
    let alpha_f: Vec<f64> = alpha.iter().zip(&st.mean_f).map(|(a, mf)| a * mf).collect();
    let beta_m: Vec<f64> = beta.iter().zip(&st.mean_m).map(|(b, mm)| b * mm).collect();
    let s_alpha = box_adjoint(dims, st.valid, &alpha, w);
    let s_alpha_f = box_adjoint(dims, st.valid, &alpha_f, w);
    let s_beta = box_adjoint(dims, st.valid, &beta, w);
    let s_beta_m = box_adjoint(dims, st.valid, &beta_m, w);
    let grad = (0..dims.len())
        .map(|q| -(f[q] * s_alpha[q] - s_alpha_f[q] - m[q] * s_beta[q] + s_beta_m[q]) / windows)
        .collect();
    (value, grad)
}

/// Negative mean squared local NCC between `fixed` and `moved`.
pub fn lncc(fixed: &Volume, moved: &Volume, window: usize) -> Result<f64> {
    check_dims("lncc", fixed.dims(), moved.dims())?;
    validate_window(fixed.dims(), window)?;
    Ok(lncc_with_grad(fixed.dims(), fixed.data(), moved.data(), window, false).0)
}
