//! One resolution level of the registration problem and the shared term evaluator.

use log::warn;

use super::contour::{chamfer_with_grad, extract_contour_points, ContourPointSet};
use super::dice::{check_dice_inputs, dice_with_grad};
use super::lncc::lncc_with_grad;
use super::prototype::{
    align_with_grad, compute_features, contrast_with_grad, extract_prototypes, prototypes_backward, FeatureVolume,
    PrototypeSet,
};
use super::smooth::smoothness_with_grad;
use super::{LossBreakdown, LossWeights, Term};
use crate::error::{check_dims, Error, Result};
use crate::grid::Dims;
use crate::volume::{OneHotMask, Volume};
use crate::warp::{warp_channel_with_grad, DisplacementField, Stencil};

/// Largest usable odd window not exceeding `requested` on this grid, or
/// `None` when the grid is too small for any window.
pub fn effective_window(dims: Dims, requested: usize) -> Option<usize> {
    let mut w = requested.min(dims.min_axis());
    if w % 2 == 0 {
        w = w.saturating_sub(1);
    }
    (w >= 3).then_some(w)
}

/// Mask-derived quantities that stay fixed while the field changes.
#[derive(Debug, Clone)]
pub struct MaskContext {
    pub fixed_mask: OneHotMask,
    pub moving_mask: OneHotMask,
    pub fixed_features: FeatureVolume,
    pub moving_features: FeatureVolume,
    pub fixed_prototypes: PrototypeSet,
    /// Contrast of the fixed features against their own prototypes.
    pub fixed_contrast: f64,
    /// Fixed-side and moving-side contour points for classes present in both.
    pub contours: Vec<(ContourPointSet, ContourPointSet)>,
    pub temperature: f64,
}

#[derive(Debug, Clone)]
pub struct LevelProblem {
    pub fixed: Volume,
    pub moving: Volume,
    /// `None` disables the similarity term on grids too small for a window.
    pub window: Option<usize>,
    pub masks: Option<MaskContext>,
}

impl LevelProblem {
    pub fn new(fixed: Volume, moving: Volume, window: usize) -> Result<Self> {
        check_dims("LevelProblem", fixed.dims(), moving.dims())?;
        if window < 3 || window % 2 == 0 {
            return Err(Error::InvalidArgument(format!("LNCC window {window} must be odd and at least 3")));
        }
        let window = effective_window(fixed.dims(), window);
        if window.is_none() {
            warn!("grid {:?} is too small for a similarity window; similarity disabled", fixed.dims());
        }
        Ok(LevelProblem {
            fixed,
            moving,
            window,
            masks: None,
        })
    }

    pub fn with_masks(
        mut self,
        fixed_mask: OneHotMask,
        moving_mask: OneHotMask,
        temperature: f64,
        max_points: usize,
        seed: u64,
    ) -> Result<Self> {
        check_dice_inputs(&fixed_mask, &moving_mask).map_err(|e| e.in_term("seg"))?;
        check_dims("LevelProblem", self.fixed.dims(), fixed_mask.dims())?;
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
        }
        let fixed_features = compute_features(&self.fixed);
        let moving_features = compute_features(&self.moving);
        let fixed_prototypes = extract_prototypes(&fixed_features, &fixed_mask)?;
        let fixed_contrast = contrast_with_grad(&fixed_features, &fixed_mask, &fixed_prototypes, temperature, false).0;
        let mut contours = Vec::new();
        for k in 1..=fixed_mask.num_classes() as u16 {
            let f = extract_contour_points(&fixed_mask, k, max_points, seed);
            let m = extract_contour_points(&moving_mask, k, max_points, seed.wrapping_add(1));
            if !f.is_empty() && !m.is_empty() {
                contours.push((f, m));
            }
        }
        self.masks = Some(MaskContext {
            fixed_mask,
            moving_mask,
            fixed_features,
            moving_features,
            fixed_prototypes,
            fixed_contrast,
            contours,
            temperature,
        });
        Ok(self)
    }

    pub fn dims(&self) -> Dims {
        self.fixed.dims()
    }

    pub fn has_masks(&self) -> bool {
        self.masks.is_some()
    }

    /// Whether `term` can be evaluated on this level.
    pub fn supports(&self, term: Term) -> bool {
        match term {
            Term::Sim => self.window.is_some(),
            Term::Smooth => true,
            _ => self.masks.is_some(),
        }
    }

    fn mask_ctx(&self, term: Term) -> Result<&MaskContext> {
        self.masks
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("term needs segmentation masks".into()).in_term(term.name()))
    }
}

/// Objective value with each weighted term broken out.
pub fn total_loss(problem: &LevelProblem, field: &DisplacementField, weights: &LossWeights) -> Result<LossBreakdown> {
    let (b, _) = evaluate_terms(problem, field, weights, false)?;
    Ok(b)
}

fn scatter_local(grad: &mut [[f64; 3]], scale: f64, upstream: &[f64], dwarp: &[[f64; 3]]) {
    for ((g, &up), d) in grad.iter_mut().zip(upstream).zip(dwarp) {
        for c in 0..3 {
            g[c] += scale * up * d[c];
        }
    }
}

struct WarpedMasks {
    mask: OneHotMask,
    dmask: Vec<Vec<[f64; 3]>>,
}

fn warp_mask(ctx: &MaskContext, field: &DisplacementField) -> WarpedMasks {
    let dims = field.dims();
    let (channels, dmask): (Vec<_>, Vec<_>) = ctx
        .moving_mask
        .channels()
        .iter()
        .map(|ch| warp_channel_with_grad(dims, ch, field))
        .unzip();
    WarpedMasks {
        mask: OneHotMask::from_raw_parts(dims, field.spacing(), channels),
        dmask,
    }
}

/// Evaluates every term with positive weight. With `want_grad` the weighted
/// gradient with respect to `u` is accumulated as well.
pub(crate) fn evaluate_terms(
    problem: &LevelProblem,
    field: &DisplacementField,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(LossBreakdown, Vec<[f64; 3]>)> {
    weights.validate()?;
    let tw = Term::ALL.map(|t| weights.weight(t));
    let (v, grad) = evaluate_weighted(problem, field, tw, want_grad)?;
    let prototype = match (v[3], v[4]) {
        (Some(c), Some(a)) => Some(c + a),
        _ => None,
    };
    let mut b = LossBreakdown::from_terms([v[0], v[1], v[2], prototype, v[5]], weights);
    b.contrast = v[3];
    b.align = v[4];
    Ok((b, grad))
}

/// Core evaluator; `tw` holds one weight per entry of [`Term::ALL`]. Returns
/// unweighted term values and the weighted gradient.
pub(crate) fn evaluate_weighted(
    problem: &LevelProblem,
    field: &DisplacementField,
    tw: [f64; 6],
    want_grad: bool,
) -> Result<([Option<f64>; 6], Vec<[f64; 3]>)> {
    let dims = problem.dims();
    check_dims("displacement field", dims, field.dims())?;
    let n = dims.len();
    let mut grad = if want_grad { vec![[0.0; 3]; n] } else { Vec::new() };
    let mut values: [Option<f64>; 6] = [None; 6];
    let [w_sim, w_smooth, w_seg, w_contrast, w_align, w_contour] = tw;

    if w_sim > 0.0 {
        if let Some(w) = problem.window {
            let (moved, dmoved) = warp_channel_with_grad(dims, problem.moving.data(), field);
            let (v, g) = lncc_with_grad(dims, problem.fixed.data(), &moved, w, want_grad);
            if want_grad {
                scatter_local(&mut grad, w_sim, &g, &dmoved);
            }
            values[0] = Some(v);
        }
    }

    if w_smooth > 0.0 {
        let (v, g) = smoothness_with_grad(field, want_grad);
        if want_grad {
            for (a, b) in grad.iter_mut().zip(&g) {
                for c in 0..3 {
                    a[c] += w_smooth * b[c];
                }
            }
        }
        values[1] = Some(v);
    }

    let first_mask_term = Term::ALL.iter().zip(tw).find(|(t, w)| t.needs_masks() && *w > 0.0);
    let ctx = match first_mask_term {
        Some((t, _)) => Some(problem.mask_ctx(*t)?),
        None => None,
    };
    let warped = match ctx {
        Some(ctx) if w_seg > 0.0 || w_align > 0.0 => Some(warp_mask(ctx, field)),
        _ => None,
    };

    if w_seg > 0.0 {
        let (ctx, wm) = (ctx.unwrap(), warped.as_ref().unwrap());
        let (v, g) = dice_with_grad(&ctx.fixed_mask, &wm.mask, want_grad);
        if want_grad {
            for (gk, dk) in g.iter().zip(&wm.dmask) {
                scatter_local(&mut grad, w_seg, gk, dk);
            }
        }
        values[2] = Some(v);
    }

    if w_contrast > 0.0 || w_align > 0.0 {
        let ctx = ctx.unwrap();
        let (feats, dfeats) = ctx.moving_features.warped_with_grad(field);

        if w_contrast > 0.0 {
            let (c_moved, gf) =
                contrast_with_grad(&feats, &ctx.fixed_mask, &ctx.fixed_prototypes, ctx.temperature, want_grad);
            if want_grad {
                for (gc, dc) in gf.iter().zip(&dfeats) {
                    scatter_local(&mut grad, 0.5 * w_contrast, gc, dc);
                }
            }
            values[3] = Some(0.5 * (c_moved + ctx.fixed_contrast));
        }

        if w_align > 0.0 {
            let wm = warped.as_ref().unwrap();
            let moved_protos = extract_prototypes(&feats, &wm.mask).map_err(|e| e.in_term("align"))?;
            let (outcome, gp) = align_with_grad(&ctx.fixed_prototypes, &moved_protos, want_grad);
            if want_grad {
                let (gf, gm) = prototypes_backward(&feats, &wm.mask, &moved_protos, &gp);
                for (gc, dc) in gf.iter().zip(&dfeats) {
                    scatter_local(&mut grad, w_align, gc, dc);
                }
                for (gk, dk) in gm.iter().zip(&wm.dmask) {
                    scatter_local(&mut grad, w_align, gk, dk);
                }
            }
            values[4] = Some(outcome.value);
        }
    }

    if w_contour > 0.0 {
        let ctx = ctx.unwrap();
        let mut total = 0.0;
        let pairs = ctx.contours.len();
        for (fixed_pts, moving_pts) in &ctx.contours {
            let moved = transport(&fixed_pts.points, field);
            let (v, g) = chamfer_with_grad(&moved, &moving_pts.points, want_grad);
            total += v;
            if want_grad {
                let scale = w_contour / pairs as f64;
                for (p, gp) in fixed_pts.points.iter().zip(&g) {
                    let st = Stencil::at(dims, *p);
                    for (idx, w) in st.idx.iter().zip(&st.w) {
                        for c in 0..3 {
                            grad[*idx][c] += scale * w * gp[c];
                        }
                    }
                }
            }
        }
        values[5] = Some(if pairs == 0 { 0.0 } else { total / pairs as f64 });
    }

    for (t, v) in Term::ALL.iter().zip(values) {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: t.name(),
                    level: 0,
                    iteration: 0,
                });
            }
        }
    }
    Ok((values, grad))
}

/// Fixed contour points carried into moving space: `p + u(p)`.
pub(crate) fn transport(points: &[[f64; 3]], field: &DisplacementField) -> Vec<[f64; 3]> {
    points
        .iter()
        .map(|&p| {
            let u = field.sample(p);
            [p[0] + u[0], p[1] + u[1], p[2] + u[2]]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Spacing;
    use crate::volume::{one_hot, LabelVolume};

    fn blob_pair(n: usize, shift: f64) -> (Volume, LabelVolume) {
        let dims = Dims::cube(n);
        let c = (n as f64 - 1.0) / 2.0;
        let r = n as f64 / 4.0;
        let img = Volume::from_fn(dims, Spacing::UNIT, |x, y, z| {
            let d = ((x as f64 - c - shift).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2)).sqrt();
            0.1 + 0.9 / (1.0 + ((d - r) / 0.7).exp()) + 0.01 * (x as f64 * 0.7 + y as f64 * 1.3).sin()
        });
        let labels = img.data().iter().map(|&v| u16::from(v > 0.55)).collect();
        (img, LabelVolume::new(dims, Spacing::UNIT, labels, 1).unwrap())
    }

    #[test]
    fn effective_window_shrinks_to_grid() {
        assert_eq!(effective_window(Dims::cube(32), 9), Some(9));
        assert_eq!(effective_window(Dims::cube(8), 9), Some(7));
        assert_eq!(effective_window(Dims::cube(5), 9), Some(5));
        assert_eq!(effective_window(Dims::cube(2), 9), None);
    }

    #[test]
    fn identity_pair_costs_only_similarity_and_fixed_contrast() {
        let (img, lab) = blob_pair(12, 0.0);
        let m = one_hot(&lab);
        let p = LevelProblem::new(img.clone(), img, 5)
            .unwrap()
            .with_masks(m.clone(), m, 0.1, 512, 0)
            .unwrap();
        let w = LossWeights::default();
        let b = total_loss(&p, &DisplacementField::zeros(p.dims(), Spacing::UNIT), &w).unwrap();
        assert!((b.sim.value.unwrap() + 1.0).abs() < 1e-9);
        assert_eq!(b.smooth.value, Some(0.0));
        assert!(b.seg.value.unwrap().abs() < 1e-6);
        assert!(b.align.unwrap().abs() < 1e-9);
        assert_eq!(b.contour.value, Some(0.0));
        // the contrast term scores voxels against prototypes and is never zero
        let c = b.contrast.unwrap();
        assert!((b.total - w.prototype * c + w.sim).abs() < 1e-6);
    }

    #[test]
    fn mask_terms_without_masks_is_an_error() {
        let (img, _) = blob_pair(8, 0.0);
        let p = LevelProblem::new(img.clone(), img, 3).unwrap();
        let f = DisplacementField::zeros(p.dims(), Spacing::UNIT);
        let e = total_loss(&p, &f, &LossWeights::default()).unwrap_err();
        assert!(e.to_string().contains("seg"));
        assert!(total_loss(&p, &f, &LossWeights::default().without_masks()).is_ok());
    }

    #[test]
    fn shifted_pair_is_worse_than_aligned() {
        let (f, fl) = blob_pair(12, 0.0);
        let (m, ml) = blob_pair(12, 1.5);
        let p = LevelProblem::new(f, m, 5)
            .unwrap()
            .with_masks(one_hot(&fl), one_hot(&ml), 0.1, 512, 0)
            .unwrap();
        let w = LossWeights::default();
        let zero = total_loss(&p, &DisplacementField::zeros(p.dims(), Spacing::UNIT), &w).unwrap();
        let right = total_loss(&p, &DisplacementField::constant(p.dims(), Spacing::UNIT, [1.5, 0.0, 0.0]), &w).unwrap();
        assert!(right.total < zero.total);
        assert!(right.contour.value.unwrap() < zero.contour.value.unwrap());
        assert!(right.seg.value.unwrap() < zero.seg.value.unwrap());
    }

    #[test]
    fn deterministic() {
        let (f, fl) = blob_pair(10, 0.0);
        let (m, ml) = blob_pair(10, 1.0);
        let p = LevelProblem::new(f, m, 5)
            .unwrap()
            .with_masks(one_hot(&fl), one_hot(&ml), 0.1, 20, 3)
            .unwrap();
        let field = DisplacementField::constant(p.dims(), Spacing::UNIT, [0.3, -0.2, 0.1]);
        let a = evaluate_terms(&p, &field, &LossWeights::default(), true).unwrap();
        let b = evaluate_terms(&p, &field, &LossWeights::default(), true).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
