//! Contour point sampling and the symmetric Chamfer distance.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::grid::Dims;
use crate::volume::{LabelVolume, OneHotMask};

/// Boundary voxel centres of one labeled region, in voxel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourPointSet {
    pub class: u16,
    pub points: Vec<[f64; 3]>,
}

impl ContourPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn boundary_points(dims: Dims, class: u16, max_points: usize, seed: u64, inside: impl Fn(usize) -> bool) -> ContourPointSet {
    let mut boundary = Vec::new();
    for (i, p) in dims.iter() {
        if !inside(i) {
            continue;
        }
        let mut edge = false;
        for a in 0..3 {
            let st = dims.stride(a);
            // neighbours outside the volume count as background
            let below = p[a] == 0 || !inside(i - st);
            let above = p[a] + 1 == dims.0[a] || !inside(i + st);
            if below || above {
                edge = true;
                break;
            }
        }
        if edge {
            boundary.push(i);
        }
    }
    if boundary.len() > max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = sample(&mut rng, boundary.len(), max_points).into_vec();
        pick.sort_unstable();
        boundary = pick.into_iter().map(|j| boundary[j]).collect();
    }
    let points = boundary
        .into_iter()
        .map(|i| dims.coords(i).map(|c| c as f64))
        .collect();
    ContourPointSet { class, points }
}

/// Foreground voxels (channel >= 0.5) with at least one background face
/// neighbour; uniformly subsampled to `max_points` with `seed`.
pub fn extract_contour_points(mask: &OneHotMask, class: u16, max_points: usize, seed: u64) -> ContourPointSet {
    let ch = mask.channel(class as usize);
    boundary_points(mask.dims(), class, max_points, seed, |i| ch[i] >= 0.5)
}

pub fn extract_contour_points_labels(labels: &LabelVolume, class: u16, max_points: usize, seed: u64) -> ContourPointSet {
    let l = labels.labels();
    boundary_points(labels.dims(), class, max_points, seed, |i| l[i] == class)
}

#[inline]
fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Index of the nearest point in `to` for every point in `from`.
pub(crate) fn nearest(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<(usize, f64)> {
    from.par_iter()
        .map(|&a| {
            let mut best = (0, f64::INFINITY);
            for (j, &b) in to.iter().enumerate() {
                let d = dist2(a, b);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Symmetric mean of squared nearest-neighbour distances. Either side empty gives 0.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    chamfer_with_grad(a, b, false).0
}

/// Chamfer value and its gradient with respect to the points of `a`,
/// holding nearest-neighbour assignments fixed.
pub(crate) fn chamfer_with_grad(a: &[[f64; 3]], b: &[[f64; 3]], want_grad: bool) -> (f64, Vec<[f64; 3]>) {
    if a.is_empty() || b.is_empty() {
        return (0.0, vec![[0.0; 3]; a.len()]);
    }
    let ab = nearest(a, b);
    let ba = nearest(b, a);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let value = ab.iter().map(|x| x.1).sum::<f64>() / na + ba.iter().map(|x| x.1).sum::<f64>() / nb;
    if !want_grad {
        return (value, Vec::new());
    }
    let mut grad = vec![[0.0; 3]; a.len()];
    for (i, &(j, _)) in ab.iter().enumerate() {
        for c in 0..3 {
            grad[i][c] += 2.0 * (a[i][c] - b[j][c]) / na;
        }
    }
    for (j, &(i, _)) in ba.iter().enumerate() {
        for c in 0..3 {
            grad[i][c] += 2.0 * (a[i][c] - b[j][c]) / nb;
        }
    }
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Spacing;
    use crate::volume::one_hot;
    use proptest::prelude::*;
    use rand::Rng;

    fn cube_labels(n: usize, lo: usize, hi: usize) -> LabelVolume {
        let dims = Dims::cube(n);
        let l = dims
            .iter()
            .map(|(_, p)| if p.iter().all(|&c| (lo..hi).contains(&c)) { 1 } else { 0 })
            .collect();
        LabelVolume::new(dims, Spacing::UNIT, l, 1).unwrap()
    }

    #[test]
    fn single_voxel_contour() {
        let l = cube_labels(5, 2, 3);
        let c = extract_contour_points_labels(&l, 1, 100, 0);
        assert_eq!(c.points, vec![[2.0, 2.0, 2.0]]);
        assert_eq!(extract_contour_points(&one_hot(&l), 1, 100, 0), c);
    }

    #[test]
    fn solid_cube_has_26_boundary_points() {
        let l = cube_labels(7, 2, 5);
        let c = extract_contour_points(&one_hot(&l), 1, 1000, 0);
        // enumerate: every cube voxel except those whose 6 neighbours are all inside
        let inside = |p: [i64; 3]| p.iter().all(|&v| (2..5).contains(&v));
        let mut expect = 0;
        for z in 2..5i64 {
            for y in 2..5i64 {
                for x in 2..5i64 {
                    let nbrs = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
                    if nbrs.iter().any(|d| !inside([x + d[0], y + d[1], z + d[2]])) {
                        expect += 1;
                    }
                }
            }
        }
        assert_eq!(expect, 26);
        assert_eq!(c.len(), 26);
        assert!(!c.points.contains(&[3.0, 3.0, 3.0]));
    }

    #[test]
    fn subsampling_is_deterministic() {
        // a 10x5 plate two voxels thick: every voxel touches a face, 100 in all
        let dims = Dims::new(12, 7, 4);
        let l = dims
            .iter()
            .map(|(_, [x, y, z])| u16::from((1..11).contains(&x) && (1..6).contains(&y) && (1..3).contains(&z)))
            .collect();
        let lv = LabelVolume::new(dims, Spacing::UNIT, l, 1).unwrap();
        assert_eq!(extract_contour_points_labels(&lv, 1, 1000, 0).len(), 100);
        let a = extract_contour_points_labels(&lv, 1, 10, 42);
        let b = extract_contour_points_labels(&lv, 1, 10, 42);
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        assert_ne!(a, extract_contour_points_labels(&lv, 1, 10, 43));
    }

    #[test]
    fn empty_region_gives_empty_set() {
        let l = cube_labels(4, 0, 0);
        assert!(extract_contour_points_labels(&l, 1, 10, 0).is_empty());
    }

    #[test]
    fn two_point_chamfer() {
        assert_eq!(chamfer(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]), 2.0);
        let s = [[0.5, 1.0, 2.0], [3.0, -1.0, 0.0]];
        assert_eq!(chamfer(&s, &s), 0.0);
    }

    fn brute(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
        let side = |x: &[[f64; 3]], y: &[[f64; 3]]| {
            x.iter()
                .map(|p| y.iter().map(|q| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>()).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / x.len() as f64
        };
        side(a, b) + side(b, a)
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(0.0..10.0))).collect()
    }

    #[test]
    fn matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_points(&mut rng, 20);
        let b = random_points(&mut rng, 20);
        let (x, y) = (chamfer(&a, &b), brute(&a, &b));
        assert!(((x - y) / y).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn symmetric_nonnegative(seed in 0u64..500, n in 1usize..15, m in 1usize..15) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_points(&mut rng, n);
            let b = random_points(&mut rng, m);
            let ab = chamfer(&a, &b);
            prop_assert!(ab > 0.0);
            prop_assert!((ab - chamfer(&b, &a)).abs() < 1e-12);
            // same set, different order and multiplicity
            let mut c = a.clone();
            c.reverse();
            c.push(a[0]);
            prop_assert_eq!(chamfer(&a, &c), 0.0);
        }
    }
}
