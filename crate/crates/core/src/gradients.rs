//! Analytic gradients of the objective with respect to the displacement,
//! and a central finite-difference checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{check_dims, Error, Result};
use crate::grid::{Dims, Spacing};
use crate::volume::{one_hot, LabelVolume, OneHotMask, Volume};
use crate::losses::{evaluate_terms, evaluate_weighted, nearest, transport, LevelProblem, LossBreakdown, LossWeights, Term};
use crate::warp::DisplacementField;

/// `dL/du(p)` for every voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGradient {
    dims: Dims,
    g: Vec<[f64; 3]>,
}

impl FieldGradient {
    pub fn zeros(dims: Dims) -> Self {
        FieldGradient {
            dims,
            g: vec![[0.0; 3]; dims.len()],
        }
    }

    pub fn new(dims: Dims, g: Vec<[f64; 3]>) -> Result<Self> {
        if g.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient has {} vectors for a {:?} grid",
                g.len(),
                dims
            )));
        }
        Ok(FieldGradient { dims, g })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.g
    }

    pub fn component(&self, voxel: usize, c: usize) -> f64 {
        self.g[voxel][c]
    }

    pub fn norm(&self) -> f64 {
        self.g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.g.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.g.iter().flatten().all(|v| v.is_finite())
    }
}

/// Weighted objective and its gradient.
pub fn grad_total(
    problem: &LevelProblem,
    field: &DisplacementField,
    weights: &LossWeights,
) -> Result<(LossBreakdown, FieldGradient)> {
    let (b, g) = evaluate_terms(problem, field, weights, true)?;
    Ok((b, FieldGradient { dims: field.dims(), g }))
}

/// One unweighted term and its gradient.
pub fn term_gradient(problem: &LevelProblem, field: &DisplacementField, term: Term) -> Result<(f64, FieldGradient)> {
    LevelObjective::term(problem, term).value_and_gradient(field)
}

/// Something the finite-difference checker can probe.
pub trait Objective {
    fn value(&self, field: &DisplacementField) -> Result<f64>;

    fn value_and_gradient(&self, field: &DisplacementField) -> Result<(f64, FieldGradient)>;

    /// False when moving `u[voxel][component]` by `eps` either way crosses a
    /// point where the objective is not differentiable.
    fn is_smooth_probe(&self, _field: &DisplacementField, _voxel: usize, _component: usize, _eps: f64) -> bool {
        true
    }
}

/// The objective of one pyramid level under a given set of per-term weights.
pub struct LevelObjective<'a> {
    problem: &'a LevelProblem,
    weights: [f64; 6],
}

impl<'a> LevelObjective<'a> {
    pub fn term(problem: &'a LevelProblem, term: Term) -> Self {
        let mut weights = [0.0; 6];
        weights[term.index()] = 1.0;
        LevelObjective { problem, weights }
    }

    pub fn weighted(problem: &'a LevelProblem, weights: &LossWeights) -> Self {
        LevelObjective {
            problem,
            weights: Term::ALL.map(|t| weights.weight(t)),
        }
    }

    fn active(&self, term: Term) -> bool {
        self.weights[term.index()] > 0.0
    }

    fn combine(&self, values: [Option<f64>; 6]) -> f64 {
        values.iter().zip(self.weights).map(|(v, w)| v.map_or(0.0, |v| w * v)).sum()
    }

    // The warp-based terms sample the moving side at p + u(p); trilinear
    // interpolation has kinks at integer positions and at the clamp borders.
    fn warp_kink(&self, field: &DisplacementField, voxel: usize, c: usize, eps: f64) -> bool {
        let dims = field.dims();
        let n = dims.0[c];
        if n == 1 {
            return false;
        }
        let pos = dims.coords(voxel)[c] as f64 + field.vectors()[voxel][c];
        let (lo, hi) = (pos - 1.01 * eps, pos + 1.01 * eps);
        let max = (n - 1) as f64;
        if hi < 0.0 || lo > max {
            return false;
        }
        lo.floor() != hi.floor() || lo <= 0.0 || hi >= max
    }

    // The contour term holds nearest-neighbour pairs fixed; a probe is only
    // valid when both perturbed fields keep the same pairs.
    fn contour_tie(&self, field: &DisplacementField, voxel: usize, c: usize, eps: f64) -> bool {
        let Some(ctx) = &self.problem.masks else {
            return false;
        };
        let assign = |sign: f64| {
            let mut f = field.clone();
            f.vectors_mut()[voxel][c] += sign * eps;
            ctx.contours
                .iter()
                .map(|(fixed, moving)| {
                    let moved = transport(&fixed.points, &f);
                    let ab: Vec<usize> = nearest(&moved, &moving.points).into_iter().map(|x| x.0).collect();
                    let ba: Vec<usize> = nearest(&moving.points, &moved).into_iter().map(|x| x.0).collect();
                    (ab, ba)
                })
                .collect::<Vec<_>>()
        };
        assign(1.0) != assign(-1.0)
    }
}

impl Objective for LevelObjective<'_> {
    fn value(&self, field: &DisplacementField) -> Result<f64> {
        let (v, _) = evaluate_weighted(self.problem, field, self.weights, false)?;
        Ok(self.combine(v))
    }

    fn value_and_gradient(&self, field: &DisplacementField) -> Result<(f64, FieldGradient)> {
        let (v, g) = evaluate_weighted(self.problem, field, self.weights, true)?;
        Ok((self.combine(v), FieldGradient { dims: field.dims(), g }))
    }

    fn is_smooth_probe(&self, field: &DisplacementField, voxel: usize, c: usize, eps: f64) -> bool {
        let warps = [Term::Sim, Term::Seg, Term::Contrast, Term::Align].iter().any(|&t| self.active(t));
        if warps && self.warp_kink(field, voxel, c, eps) {
            return false;
        }
        !(self.active(Term::Contour) && self.contour_tie(field, voxel, c, eps))
    }
}

/// Worst disagreement between analytic and central-difference derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub probes: usize,
    /// Candidate probes rejected for sitting on a non-smooth point.
    pub resampled: usize,
}

impl FdReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.probes > 0 && self.max_rel_err < rel_tol
    }
}

/// Compares the analytic gradient with central differences at
/// `probe_count` random (voxel, component) pairs. Relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<O: Objective + ?Sized>(
    objective: &O,
    field: &DisplacementField,
    probe_count: usize,
    eps: f64,
    seed: u64,
) -> Result<FdReport> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    let (_, grad) = objective.value_and_gradient(field)?;
    check_dims("finite_diff_check", field.dims(), grad.dims())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = field.dims().len();
    let mut report = FdReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        probes: 0,
        resampled: 0,
    };
    let max_attempts = 50 * probe_count.max(1);
    let mut attempts = 0;
    let mut probe = field.clone();
    while report.probes < probe_count && attempts < max_attempts {
        attempts += 1;
        let voxel = rng.gen_range(0..n);
        let c = rng.gen_range(0..3);
        if !objective.is_smooth_probe(field, voxel, c, eps) {
            report.resampled += 1;
            continue;
        }
        let base = field.vectors()[voxel][c];
        probe.vectors_mut()[voxel][c] = base + eps;
        let plus = objective.value(&probe)?;
        probe.vectors_mut()[voxel][c] = base - eps;
        let minus = objective.value(&probe)?;
        probe.vectors_mut()[voxel][c] = base;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grad.component(voxel, c);
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(1e-8);
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.probes += 1;
    }
    Ok(report)
}

/// Uniform random displacement in `[-scale, scale)` per component.
pub fn random_field(dims: Dims, seed: u64, scale: f64) -> DisplacementField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = (0..dims.len()).map(|_| std::array::from_fn(|_| rng.gen_range(-scale..scale))).collect();
    DisplacementField::new(dims, Spacing::UNIT, u).expect("field has grid length")
}

/// A small smooth image pair with two-class masks derived from intensity
/// thresholds, used for gradient checks.
pub fn random_problem(n: usize, seed: u64) -> Result<LevelProblem> {
    let dims = Dims::cube(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut smooth = |phase: f64| {
        let a: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..1.5));
        Volume::from_fn(dims, Spacing::UNIT, move |x, y, z| {
            (a[0] * x as f64 + phase).sin() + (a[1] * y as f64).cos() * (a[2] * z as f64 + 0.3).sin()
        })
    };
    let fixed = smooth(0.0);
    let moving = smooth(0.4);
    let labels = |v: &Volume| -> Result<OneHotMask> {
        let l = v.data().iter().map(|&x| if x > 0.6 { 2 } else if x < -0.4 { 1 } else { 0 }).collect();
        Ok(one_hot(&LabelVolume::new(dims, Spacing::UNIT, l, 2)?))
    };
    let (fm, mm) = (labels(&fixed)?, labels(&moving)?);
    LevelProblem::new(fixed, moving, 3)?.with_masks(fm, mm, 0.1, 64, seed)
}

/// Checks every term separately on a `n`³ random instance.
pub fn check_all_terms(n: usize, probes: usize, eps: f64, seed: u64) -> Result<Vec<(Term, FdReport)>> {
    let p = random_problem(n, seed)?;
    let f = random_field(p.dims(), seed + 1, 0.8);
    Term::ALL
        .iter()
        .map(|&t| Ok((t, finite_diff_check(&LevelObjective::term(&p, t), &f, probes, eps, seed + 4)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Spacing;
    use crate::volume::Volume;

    struct Quadratic;

    impl Objective for Quadratic {
        fn value(&self, f: &DisplacementField) -> Result<f64> {
            Ok(f.vectors().iter().flatten().map(|v| v * v).sum())
        }

        fn value_and_gradient(&self, f: &DisplacementField) -> Result<(f64, FieldGradient)> {
            let g = f.vectors().iter().map(|v| v.map(|x| 2.0 * x)).collect();
            Ok((self.value(f)?, FieldGradient::new(f.dims(), g)?))
        }
    }

    #[test]
    fn quadratic_matches_exactly() {
        let f = random_field(Dims::cube(4), 1, 2.0);
        let r = finite_diff_check(&Quadratic, &f, 50, 1e-3, 0).unwrap();
        assert_eq!(r.probes, 50);
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn smoothness_alone_on_5cube() {
        let dims = Dims::cube(5);
        let p = LevelProblem::new(Volume::zeros(dims, Spacing::UNIT), Volume::zeros(dims, Spacing::UNIT), 3).unwrap();
        let f = random_field(dims, 2, 1.0);
        let r = finite_diff_check(&LevelObjective::term(&p, Term::Smooth), &f, 200, 1e-3, 0).unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn every_term_matches_finite_differences() {
        let p = random_problem(6, 3).unwrap();
        let f = random_field(p.dims(), 4, 0.8);
        for term in Term::ALL {
            let (_, g) = term_gradient(&p, &f, term).unwrap();
            assert!(g.norm() > 0.0, "{} has a zero gradient", term.name());
            let r = finite_diff_check(&LevelObjective::term(&p, term), &f, 120, 1e-3, 7).unwrap();
            assert!(r.passes(1e-3), "{}: {r:?}", term.name());
        }
    }

    #[test]
    fn public_check_covers_every_term() {
        let reports = check_all_terms(6, 64, 1e-3, 21).unwrap();
        assert_eq!(reports.len(), 6);
        for (t, r) in reports {
            assert!(r.probes >= 64 && r.passes(1e-3), "{}: {r:?}", t.name());
        }
    }

    #[test]
    fn weighted_total_matches_finite_differences() {
        let p = random_problem(6, 5).unwrap();
        let f = random_field(p.dims(), 6, 0.8);
        let r = finite_diff_check(&LevelObjective::weighted(&p, &LossWeights::default()), &f, 150, 1e-3, 9).unwrap();
        assert!(r.passes(1e-3), "{r:?}");
    }

    #[test]
    fn gradient_is_linear_in_weights() {
        let p = random_problem(6, 8).unwrap();
        let f = random_field(p.dims(), 9, 0.6);
        let w = LossWeights::from_array([0.7, 2.0, 1.3, 0.4, 0.25]).unwrap();
        let (_, total) = grad_total(&p, &f, &w).unwrap();
        let mut sum = vec![[0.0; 3]; p.dims().len()];
        for term in Term::ALL {
            let (_, g) = term_gradient(&p, &f, term).unwrap();
            for (s, v) in sum.iter_mut().zip(g.vectors()) {
                for c in 0..3 {
                    s[c] += w.weight(term) * v[c];
                }
            }
        }
        for (a, b) in total.vectors().iter().zip(&sum) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_weights_zero_gradient() {
        let p = random_problem(6, 1).unwrap();
        let f = random_field(p.dims(), 2, 0.5);
        let (b, g) = grad_total(&p, &f, &LossWeights::ZERO).unwrap();
        assert_eq!(b.total, 0.0);
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn stationary_at_identity() {
        let dims = Dims::cube(8);
        let img = Volume::from_fn(dims, Spacing::UNIT, |x, y, z| (x as f64 * 0.9).sin() + (y as f64 * 0.4 + z as f64 * 0.7).cos());
        let l = img.data().iter().map(|&v| u16::from(v > 0.5)).collect();
        let m = one_hot(&LabelVolume::new(dims, Spacing::UNIT, l, 1).unwrap());
        let p = LevelProblem::new(img.clone(), img, 5).unwrap().with_masks(m.clone(), m, 0.1, 256, 0).unwrap();
        let f = DisplacementField::zeros(dims, Spacing::UNIT);
        for term in [Term::Sim, Term::Smooth, Term::Align, Term::Contour] {
            let (_, g) = term_gradient(&p, &f, term).unwrap();
            assert!(g.norm() < 1e-6, "{}: {}", term.name(), g.norm());
        }
        let only_sim = LossWeights { sim: 1.0, ..LossWeights::ZERO };
        assert!(grad_total(&p, &f, &only_sim).unwrap().1.norm() < 1e-6);
    }

    #[test]
    fn kinks_are_resampled() {
        let p = random_problem(6, 2).unwrap();
        // a zero field samples every voxel exactly on a grid node
        let f = DisplacementField::zeros(p.dims(), Spacing::UNIT);
        let r = finite_diff_check(&LevelObjective::term(&p, Term::Sim), &f, 10, 1e-3, 0).unwrap();
        assert_eq!(r.probes, 0);
        assert!(r.resampled > 0);
    }
}
