//! Dense displacement fields and the spatial transform built on them.
//!
//! A field stores a displacement `u(p)` in voxel units at every voxel and
//! induces the transform `phi(p) = p + u(p)`. Warping a moving volume
//! resamples it at `phi(p)` with trilinear interpolation, clamping sample
//! positions to the volume so the border value is replicated outward.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_dims, Error, Result};
use crate::grid::{Dims, Spacing};
use crate::volume::{OneHotMask, Volume};

/// Per-voxel displacement `u`, in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dims: Dims,
    spacing: Spacing,
    u: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Self::constant(dims, spacing, [0.0; 3])
    }

    pub fn constant(dims: Dims, spacing: Spacing, v: [f64; 3]) -> Self {
        DisplacementField {
            dims,
            spacing,
            u: vec![v; dims.len()],
        }
    }

    pub fn new(dims: Dims, spacing: Spacing, u: Vec<[f64; 3]>) -> Result<Self> {
        if u.len() != dims.len() {
            return Err(Error::InvalidVolume(format!(
                "{} vectors for {} voxels",
                u.len(),
                dims.len()
            )));
        }
        if u.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite displacement".into()));
        }
        Ok(DisplacementField { dims, spacing, u })
    }

    pub fn from_fn(
        dims: Dims,
        spacing: Spacing,
        f: impl Fn(usize, usize, usize) -> [f64; 3],
    ) -> Self {
        let u = dims.iter().map(|(_, [x, y, z])| f(x, y, z)).collect();
        DisplacementField { dims, spacing, u }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.u
    }

    pub fn vectors_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.u
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.u[self.dims.index(x, y, z)]
    }

    /// Trilinearly interpolated displacement at a continuous position.
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let s = Stencil::at(self.dims, p);
        let mut out = [0.0; 3];
        for j in 0..8 {
            let v = self.u[s.idx[j]];
            for c in 0..3 {
                out[c] += s.w[j] * v[c];
            }
        }
        out
    }

    /// Mean Euclidean displacement length.
    pub fn mean_norm(&self) -> f64 {
        self.u.iter().map(|v| norm3(*v)).sum::<f64>() / self.u.len() as f64
    }

    pub fn max_norm(&self) -> f64 {
        self.u.iter().map(|v| norm3(*v)).fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> DisplacementField {
        DisplacementField {
            dims: self.dims,
            spacing: self.spacing,
            u: self.u.iter().map(|v| v.map(|c| c * s)).collect(),
        }
    }
}

#[inline]
pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// The eight neighbours of a continuous sample point with their trilinear
/// weights and the derivatives of those weights with respect to the point.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub dw: [[f64; 8]; 3],
}

impl Stencil {
    pub fn at(dims: Dims, p: [f64; 3]) -> Stencil {
        // per axis: lower index, upper index, fraction, derivative switch
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut t = [0.0f64; 3];
        let mut live = [0.0f64; 3];
        for a in 0..3 {
            let n = dims.0[a];
            if n == 1 {
                continue;
            }
            let max = (n - 1) as f64;
            let c = p[a].clamp(0.0, max);
            let i0 = (c.floor() as usize).min(n - 2);
            lo[a] = i0;
            hi[a] = i0 + 1;
            t[a] = c - i0 as f64;
            live[a] = if p[a] >= 0.0 && p[a] <= max { 1.0 } else { 0.0 };
        }
        let mut s = Stencil {
            idx: [0; 8],
            w: [0.0; 8],
            dw: [[0.0; 8]; 3],
        };
        for j in 0..8 {
            let bit = [j & 1, (j >> 1) & 1, (j >> 2) & 1];
            let mut f = [0.0; 3];
            let mut df = [0.0; 3];
            let mut ijk = [0usize; 3];
            for a in 0..3 {
                if bit[a] == 1 {
                    f[a] = t[a];
                    df[a] = live[a];
                    ijk[a] = hi[a];
                } else {
                    f[a] = 1.0 - t[a];
                    df[a] = -live[a];
                    ijk[a] = lo[a];
                }
            }
            s.idx[j] = dims.index(ijk[0], ijk[1], ijk[2]);
            s.w[j] = f[0] * f[1] * f[2];
            s.dw[0][j] = df[0] * f[1] * f[2];
            s.dw[1][j] = f[0] * df[1] * f[2];
            s.dw[2][j] = f[0] * f[1] * df[2];
        }
        s
    }

    #[inline]
    pub fn apply(&self, data: &[f64]) -> f64 {
        let mut v = 0.0;
        for j in 0..8 {
            v += self.w[j] * data[self.idx[j]];
        }
        v
    }

    #[inline]
    pub fn apply_with_grad(&self, data: &[f64]) -> (f64, [f64; 3]) {
        let mut v = 0.0;
        let mut g = [0.0; 3];
        for j in 0..8 {
            let d = data[self.idx[j]];
            v += self.w[j] * d;
            g[0] += self.dw[0][j] * d;
            g[1] += self.dw[1][j] * d;
            g[2] += self.dw[2][j] * d;
        }
        (v, g)
    }
}

/// Trilinear interpolation with clamp-to-edge borders.
pub fn trilinear_sample(vol: &Volume, point: [f64; 3]) -> f64 {
    Stencil::at(vol.dims(), point).apply(vol.data())
}

#[inline]
pub(crate) fn warped_position(dims: Dims, i: usize, u: [f64; 3]) -> [f64; 3] {
    let [x, y, z] = dims.coords(i);
    [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]]
}

/// Resamples one scalar channel at `p + u(p)` for every voxel.
pub(crate) fn warp_channel(dims: Dims, data: &[f64], field: &DisplacementField) -> Vec<f64> {
    field
        .u
        .par_iter()
        .enumerate()
        .map(|(i, &u)| Stencil::at(dims, warped_position(dims, i, u)).apply(data))
        .collect()
}

/// Like [`warp_channel`], also returning the spatial derivative of the
/// interpolant at each sample point, i.e. `d out(p) / d u(p)`.
pub(crate) fn warp_channel_with_grad(
    dims: Dims,
    data: &[f64],
    field: &DisplacementField,
) -> (Vec<f64>, Vec<[f64; 3]>) {
    field
        .u
        .par_iter()
        .enumerate()
        .map(|(i, &u)| Stencil::at(dims, warped_position(dims, i, u)).apply_with_grad(data))
        .unzip()
}

pub fn warp_volume(vol: &Volume, field: &DisplacementField) -> Result<Volume> {
    check_dims("warp_volume", vol.dims(), field.dims)?;
    Ok(Volume::from_raw_parts(
        vol.dims(),
        vol.spacing(),
        warp_channel(vol.dims(), vol.data(), field),
    ))
}

pub fn warp_onehot(mask: &OneHotMask, field: &DisplacementField) -> Result<OneHotMask> {
    check_dims("warp_onehot", mask.dims(), field.dims)?;
    let channels = mask
        .channels()
        .iter()
        .map(|ch| {
            let mut w = warp_channel(mask.dims(), ch, field);
            // convex weights can overshoot by an ulp
            w.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            w
        })
        .collect();
    Ok(OneHotMask::from_raw_parts(mask.dims(), mask.spacing(), channels))
}

/// Continuous coarse-grid coordinate of a fine voxel centre on one axis.
///
/// Coarse voxel `j` averages fine voxels `2j` and `2j + 1`, so its centre sits
/// at fine coordinate `2j + 0.5`.
#[inline]
pub(crate) fn fine_to_coarse(fine_n: usize, coarse_n: usize, x: usize) -> f64 {
    if fine_n == coarse_n {
        x as f64
    } else {
        (x as f64 + 0.5) * 0.5 - 0.5
    }
}

/// Trilinear upsampling to the next finer level, with vectors rescaled to
/// the finer voxel unit.
pub fn upsample_field(coarse: &DisplacementField, target: Dims) -> Result<DisplacementField> {
    if target.halved() != coarse.dims {
        return Err(Error::DimsMismatch {
            context: "upsample_field target",
            left: target.halved(),
            right: coarse.dims,
        });
    }
    let scale: [f64; 3] =
        std::array::from_fn(|a| if target.0[a] > coarse.dims.0[a] { 2.0 } else { 1.0 });
    let u = (0..target.len())
        .into_par_iter()
        .map(|i| {
            let [x, y, z] = target.coords(i);
            let p = [
                fine_to_coarse(target.0[0], coarse.dims.0[0], x),
                fine_to_coarse(target.0[1], coarse.dims.0[1], y),
                fine_to_coarse(target.0[2], coarse.dims.0[2], z),
            ];
            let v = coarse.sample(p);
            [v[0] * scale[0], v[1] * scale[1], v[2] * scale[2]]
        })
        .collect();
    let mut spacing = coarse.spacing.0;
    for a in 0..3 {
        spacing[a] /= scale[a];
    }
    Ok(DisplacementField {
        dims: target,
        spacing: Spacing(spacing),
        u,
    })
}

/// Additive coarse-to-fine combination `u_base + u_delta`.
pub fn superpose(base: &DisplacementField, delta: &DisplacementField) -> Result<DisplacementField> {
    check_dims("superpose", base.dims, delta.dims)?;
    let u = base
        .u
        .iter()
        .zip(&delta.u)
        .map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
        .collect();
    Ok(DisplacementField {
        dims: base.dims,
        spacing: base.spacing,
        u,
    })
}

/// Spatial derivative matrix `d u_c / d x_a` at voxel `(x, y, z)`; central
/// differences inside, one-sided at borders, zero along singleton axes.
pub(crate) fn displacement_gradient(field: &DisplacementField, x: usize, y: usize, z: usize) -> [[f64; 3]; 3] {
    let dims = field.dims;
    let p = [x, y, z];
    let mut g = [[0.0; 3]; 3];
    for a in 0..3 {
        let n = dims.0[a];
        if n < 2 {
            continue;
        }
        let (lo, hi) = if p[a] == 0 {
            (0, 1)
        } else if p[a] == n - 1 {
            (n - 2, n - 1)
        } else {
            (p[a] - 1, p[a] + 1)
        };
        let mut ql = p;
        let mut qh = p;
        ql[a] = lo;
        qh[a] = hi;
        let ul = field.get(ql[0], ql[1], ql[2]);
        let uh = field.get(qh[0], qh[1], qh[2]);
        let h = (hi - lo) as f64;
        for c in 0..3 {
            g[c][a] = (uh[c] - ul[c]) / h;
        }
    }
    g
}

#[inline]
pub(crate) fn det3(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Per-voxel `det(I + grad u)`.
pub fn jacobian_determinant(field: &DisplacementField) -> Volume {
    let dims = field.dims;
    let data = (0..dims.len())
        .into_par_iter()
        .map(|i| {
            let [x, y, z] = dims.coords(i);
            let mut j = displacement_gradient(field, x, y, z);
            for a in 0..3 {
                j[a][a] += 1.0;
            }
            det3(j)
        })
        .collect();
    Volume::from_raw_parts(dims, field.spacing, data)
}

/// Voxels with a determinant at or below this are folded and left out of SDlogJ.
pub const FOLDING_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SdLogJ {
    pub value: f64,
    /// Voxels excluded because `det <= FOLDING_EPS`.
    pub excluded: usize,
}

/// Population standard deviation of `log det(I + grad u)` over unfolded voxels.
pub fn sdlogj(field: &DisplacementField) -> SdLogJ {
    let det = jacobian_determinant(field);
    let logs: Vec<f64> = det
        .data()
        .iter()
        .filter(|&&d| d > FOLDING_EPS)
        .map(|d| d.ln())
        .collect();
    let excluded = det.data().len() - logs.len();
    SdLogJ {
        value: population_std(&logs),
        excluded,
    }
}

pub(crate) fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{one_hot, LabelVolume};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(rng: &mut ChaCha8Rng, dims: Dims) -> Volume {
        Volume::from_raw_parts(dims, Spacing::UNIT, (0..dims.len()).map(|_| rng.gen::<f64>()).collect())
    }

    fn random_field(rng: &mut ChaCha8Rng, dims: Dims, mag: f64) -> DisplacementField {
        let u = (0..dims.len())
            .map(|_| std::array::from_fn(|_| rng.gen_range(-mag..mag)))
            .collect();
        DisplacementField::new(dims, Spacing::UNIT, u).unwrap()
    }

    /// Direct trilinear formula over the 8 surrounding voxels.
    fn trilinear_oracle(vol: &Volume, p: [f64; 3]) -> f64 {
        let d = vol.dims();
        let c: Vec<f64> = (0..3).map(|a| p[a].clamp(0.0, (d.0[a] - 1) as f64)).collect();
        let mut total = 0.0;
        for z in 0..d.nz() {
            for y in 0..d.ny() {
                for x in 0..d.nx() {
                    let wx = (1.0 - (c[0] - x as f64).abs()).max(0.0);
                    let wy = (1.0 - (c[1] - y as f64).abs()).max(0.0);
                    let wz = (1.0 - (c[2] - z as f64).abs()).max(0.0);
                    total += wx * wy * wz * vol.get(x, y, z);
                }
            }
        }
        total
    }

    #[test]
    fn sample_at_voxel_and_midpoint() {
        let v = Volume::from_fn(Dims::new(2, 1, 1), Spacing::UNIT, |x, _, _| x as f64);
        assert_eq!(trilinear_sample(&v, [0.0, 0.0, 0.0]), 0.0);
        assert_eq!(trilinear_sample(&v, [1.0, 0.0, 0.0]), 1.0);
        assert_eq!(trilinear_sample(&v, [0.5, 0.0, 0.0]), 0.5);
        // clamped outside
        assert_eq!(trilinear_sample(&v, [-3.0, 0.0, 0.0]), 0.0);
        assert_eq!(trilinear_sample(&v, [7.0, 2.0, -1.0]), 1.0);
    }

    #[test]
    fn sample_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = random_volume(&mut rng, Dims::cube(3));
        for _ in 0..200 {
            let p = [rng.gen_range(-0.5..2.5), rng.gen_range(-0.5..2.5), rng.gen_range(-0.5..2.5)];
            assert!((trilinear_sample(&v, p) - trilinear_oracle(&v, p)).abs() < 1e-12);
        }
    }

    #[test]
    fn stencil_gradient_matches_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_volume(&mut rng, Dims::cube(4));
        for _ in 0..50 {
            let p: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..2.9));
            let (_, g) = Stencil::at(v.dims(), p).apply_with_grad(v.data());
            for a in 0..3 {
                let mut hi = p;
                let mut lo = p;
                hi[a] += 1e-6;
                lo[a] -= 1e-6;
                let fd = (trilinear_sample(&v, hi) - trilinear_sample(&v, lo)) / 2e-6;
                assert!((fd - g[a]).abs() < 1e-6, "axis {a}: {fd} vs {}", g[a]);
            }
        }
    }

    #[test]
    fn zero_field_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_volume(&mut rng, Dims::new(4, 5, 3));
        let w = warp_volume(&v, &DisplacementField::zeros(v.dims(), Spacing::UNIT)).unwrap();
        assert_eq!(w, v);
    }

    #[test]
    fn unit_shift_reads_next_voxel() {
        let v = Volume::from_fn(Dims::cube(5), Spacing::UNIT, |x, _, _| x as f64);
        let f = DisplacementField::constant(v.dims(), Spacing::UNIT, [1.0, 0.0, 0.0]);
        let w = warp_volume(&v, &f).unwrap();
        for (i, [x, _, _]) in v.dims().iter() {
            assert_eq!(w.data()[i], ((x + 1).min(4)) as f64);
        }
    }

    #[test]
    fn warp_matches_per_voxel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random_volume(&mut rng, Dims::cube(4));
        let f = random_field(&mut rng, v.dims(), 0.8);
        let w = warp_volume(&v, &f).unwrap();
        for (i, [x, y, z]) in v.dims().iter() {
            let u = f.vectors()[i];
            let o = trilinear_oracle(&v, [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]]);
            assert!((w.data()[i] - o).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_rejects_dims_mismatch() {
        let v = Volume::zeros(Dims::cube(4), Spacing::UNIT);
        let f = DisplacementField::zeros(Dims::cube(3), Spacing::UNIT);
        assert!(matches!(warp_volume(&v, &f), Err(Error::DimsMismatch { .. })));
    }

    #[test]
    fn onehot_half_shift_softens_boundary() {
        let dims = Dims::new(6, 1, 1);
        let lv = LabelVolume::new(dims, Spacing::UNIT, vec![0, 0, 1, 1, 0, 0], 1).unwrap();
        let m = one_hot(&lv);
        assert_eq!(warp_onehot(&m, &DisplacementField::zeros(dims, Spacing::UNIT)).unwrap(), m);
        let f = DisplacementField::constant(dims, Spacing::UNIT, [0.5, 0.0, 0.0]);
        let w = warp_onehot(&m, &f).unwrap();
        assert_eq!(w.channel(1), &[0.0, 0.5, 1.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn upsample_zero_and_constant() {
        let coarse = DisplacementField::zeros(Dims::cube(2), Spacing::UNIT);
        let fine = upsample_field(&coarse, Dims::cube(4)).unwrap();
        assert!(fine.vectors().iter().all(|v| *v == [0.0; 3]));
        let coarse = DisplacementField::constant(Dims::cube(2), Spacing::UNIT, [1.0; 3]);
        let fine = upsample_field(&coarse, Dims::cube(3)).unwrap();
        assert_eq!(fine.dims(), Dims::cube(3));
        assert!(fine.vectors().iter().all(|v| *v == [2.0; 3]));
        assert!(upsample_field(&coarse, Dims::cube(5)).is_err());
    }

    #[test]
    fn upsample_matches_interpolation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coarse = random_field(&mut rng, Dims::cube(2), 1.0);
        let fine = upsample_field(&coarse, Dims::cube(4)).unwrap();
        // fine voxel x sits at coarse coordinate x/2 - 1/4; weights along an
        // axis of two coarse voxels are (1 - t, t) with t clamped to [0, 1]
        let weight = |x: usize, j: usize| {
            let t = ((x as f64) / 2.0 - 0.25).clamp(0.0, 1.0);
            if j == 0 { 1.0 - t } else { t }
        };
        for (i, [x, y, z]) in fine.dims().iter() {
            for c in 0..3 {
                let mut expect = 0.0;
                for (_, [a, b, d]) in coarse.dims().iter() {
                    expect += weight(x, a) * weight(y, b) * weight(z, d) * coarse.get(a, b, d)[c];
                }
                assert!((fine.vectors()[i][c] - 2.0 * expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn superpose_adds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_field(&mut rng, Dims::cube(3), 2.0);
        let b = random_field(&mut rng, Dims::cube(3), 2.0);
        let zero = DisplacementField::zeros(Dims::cube(3), Spacing::UNIT);
        assert_eq!(superpose(&a, &zero).unwrap(), a);
        assert_eq!(superpose(&zero, &b).unwrap(), b);
        let s = superpose(&a, &b).unwrap();
        for i in 0..27 {
            for c in 0..3 {
                assert_eq!(s.vectors()[i][c], a.vectors()[i][c] + b.vectors()[i][c]);
            }
        }
    }

    #[test]
    fn jacobian_of_identity_and_linear_stretch() {
        let z = DisplacementField::zeros(Dims::cube(4), Spacing::UNIT);
        assert!(jacobian_determinant(&z).data().iter().all(|&d| d == 1.0));
        let f = DisplacementField::from_fn(Dims::cube(5), Spacing::UNIT, |x, _, _| [0.1 * x as f64, 0.0, 0.0]);
        let j = jacobian_determinant(&f);
        for (i, [x, y, zz]) in f.dims().iter() {
            if (1..4).contains(&x) && (1..4).contains(&y) && (1..4).contains(&zz) {
                assert!((j.data()[i] - 1.1).abs() < 1e-12);
            }
        }
    }

    /// Second differencing implementation: explicit neighbour lookups via
    /// clamped indices, central where both neighbours exist.
    fn jacobian_oracle(f: &DisplacementField) -> Vec<f64> {
        let d = f.dims();
        let at = |p: [isize; 3]| f.get(p[0] as usize, p[1] as usize, p[2] as usize);
        d.iter()
            .map(|(_, [x, y, z])| {
                let p = [x as isize, y as isize, z as isize];
                let mut m = [[0.0; 3]; 3];
                for a in 0..3 {
                    let n = d.0[a] as isize;
                    let mut fwd = p;
                    let mut bwd = p;
                    fwd[a] = (p[a] + 1).min(n - 1);
                    bwd[a] = (p[a] - 1).max(0);
                    let h = (fwd[a] - bwd[a]) as f64;
                    let (uf, ub) = (at(fwd), at(bwd));
                    for c in 0..3 {
                        m[c][a] = (uf[c] - ub[c]) / h + if a == c { 1.0 } else { 0.0 };
                    }
                }
                m[0][0] * m[1][1] * m[2][2] + m[0][1] * m[1][2] * m[2][0] + m[0][2] * m[1][0] * m[2][1]
                    - m[0][2] * m[1][1] * m[2][0]
                    - m[0][0] * m[1][2] * m[2][1]
                    - m[0][1] * m[1][0] * m[2][2]
            })
            .collect()
    }

    #[test]
    fn jacobian_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = random_field(&mut rng, Dims::new(4, 5, 3), 0.3);
        let j = jacobian_determinant(&f);
        for (a, b) in j.data().iter().zip(jacobian_oracle(&f)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sdlogj_cases() {
        let z = DisplacementField::zeros(Dims::cube(4), Spacing::UNIT);
        assert_eq!(sdlogj(&z), SdLogJ { value: 0.0, excluded: 0 });
        assert_eq!(population_std(&[0.0, 1.0]), 0.5);
        // a field with strongly negative stretch folds every voxel
        let f = DisplacementField::from_fn(Dims::cube(4), Spacing::UNIT, |x, _, _| [-2.0 * x as f64, 0.0, 0.0]);
        let s = sdlogj(&f);
        assert_eq!(s.value, 0.0);
        assert_eq!(s.excluded, 64);
    }

    #[test]
    fn sdlogj_two_valued_dets() {
        // u_x = (e - 1) x y: det = 1 on the y = 0 row and e on the y = 1 row
        let e = std::f64::consts::E;
        let f = DisplacementField::from_fn(Dims::new(2, 2, 1), Spacing::UNIT, |x, y, _| {
            [(e - 1.0) * (x * y) as f64, 0.0, 0.0]
        });
        let j = jacobian_determinant(&f);
        let mut dets = j.data().to_vec();
        dets.sort_by(f64::total_cmp);
        assert!((dets[0] - 1.0).abs() < 1e-15 && (dets[3] - e).abs() < 1e-15);
        let s = sdlogj(&f);
        assert!((s.value - 0.5).abs() < 1e-15);
        assert_eq!(s.excluded, 0);
    }

    proptest! {
        #[test]
        fn warp_is_linear_in_volume(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = Dims::cube(4);
            let v1 = random_volume(&mut rng, dims);
            let v2 = random_volume(&mut rng, dims);
            let f = random_field(&mut rng, dims, 1.5);
            let combo = Volume::from_raw_parts(dims, Spacing::UNIT,
                v1.data().iter().zip(v2.data()).map(|(x, y)| a * x + b * y).collect());
            let w = warp_volume(&combo, &f).unwrap();
            let w1 = warp_volume(&v1, &f).unwrap();
            let w2 = warp_volume(&v2, &f).unwrap();
            for i in 0..dims.len() {
                prop_assert!((w.data()[i] - (a * w1.data()[i] + b * w2.data()[i])).abs() < 1e-10);
            }
        }

        #[test]
        fn warped_onehot_stays_in_unit_interval(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = Dims::cube(4);
            let l: Vec<u16> = (0..64).map(|_| rng.gen_range(0..=2)).collect();
            let m = one_hot(&LabelVolume::new(dims, Spacing::UNIT, l, 2).unwrap());
            let f = random_field(&mut rng, dims, 5.0);
            let w = warp_onehot(&m, &f).unwrap();
            prop_assert!(w.channels().iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn superpose_commutes_and_associates(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = Dims::cube(3);
            let (a, b, c) = (random_field(&mut rng, d, 2.0), random_field(&mut rng, d, 2.0), random_field(&mut rng, d, 2.0));
            prop_assert_eq!(superpose(&a, &b).unwrap(), superpose(&b, &a).unwrap());
            let l = superpose(&superpose(&a, &b).unwrap(), &c).unwrap();
            let r = superpose(&a, &superpose(&b, &c).unwrap()).unwrap();
            for (x, y) in l.vectors().iter().zip(r.vectors()) {
                for k in 0..3 {
                    prop_assert!((x[k] - y[k]).abs() <= 4.0 * f64::EPSILON * (x[k].abs() + 1.0));
                }
            }
        }

        #[test]
        fn upsample_preserves_constants(v in proptest::array::uniform3(-4.0f64..4.0), n in 2usize..5) {
            let coarse = DisplacementField::constant(Dims::cube(n), Spacing::UNIT, v);
            let fine = upsample_field(&coarse, Dims::cube(2 * n)).unwrap();
            for w in fine.vectors() {
                for k in 0..3 {
                    prop_assert!((w[k] - 2.0 * v[k]).abs() < 1e-12);
                }
            }
        }
    }
}
