//! Synthetic image pairs with a known deformation.
//!
//! The fixed scene is a set of labeled blobs with soft edges on a dim
//! background. The moving scene is the fixed scene pushed through the
//! inverse of the truth field, so `warp(moving, truth)` recovers `fixed`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Spacing};
use crate::volume::{LabelVolume, Volume};
use crate::warp::DisplacementField;

pub const BACKGROUND: f64 = 0.1;
/// Width of the sigmoid blob edge, in voxels.
const EDGE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobKind {
    Sphere,
    Ellipsoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeformationKind {
    Rigid,
    Smooth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub blobs: usize,
    pub blob_kind: BlobKind,
    /// Blob intensities; empty spreads them evenly over `[0.4, 1.0]`.
    pub intensities: Vec<f64>,
    pub noise_sigma: f64,
    pub deformation: DeformationKind,
    /// Largest displacement in voxels.
    pub magnitude: f64,
    /// Gaussian sigma, in voxels, used to smooth the random field.
    pub smoothing: f64,
    /// Direction of a rigid shift; normalized and scaled by `magnitude`.
    pub rigid_direction: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: Dims::cube(32),
            blobs: 3,
            blob_kind: BlobKind::Ellipsoid,
            intensities: Vec::new(),
            noise_sigma: 0.02,
            deformation: DeformationKind::Smooth,
            magnitude: 3.0,
            smoothing: 8.0,
            rigid_direction: [1.0, 0.0, 0.0],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Twelve smaller blobs on a 48 voxel grid.
    pub fn many_organs() -> Self {
        PhantomSpec {
            dims: Dims::cube(48),
            blobs: 12,
            ..PhantomSpec::default()
        }
    }

    pub fn rigid(shift: [f64; 3]) -> Self {
        let m = (shift[0] * shift[0] + shift[1] * shift[1] + shift[2] * shift[2]).sqrt();
        PhantomSpec {
            deformation: DeformationKind::Rigid,
            magnitude: m,
            rigid_direction: if m > 0.0 { shift } else { [1.0, 0.0, 0.0] },
            ..PhantomSpec::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: PhantomSpec = serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("phantom spec: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.blobs == 0 || self.blobs > u16::MAX as usize {
            return bad(format!("blob count {} out of range", self.blobs));
        }
        if !self.intensities.is_empty() && self.intensities.len() != self.blobs {
            return bad(format!("{} intensities for {} blobs", self.intensities.len(), self.blobs));
        }
        if self.intensities.iter().any(|&v| !(v.is_finite() && v > BACKGROUND)) {
            return bad(format!("blob intensities must exceed the background {BACKGROUND}"));
        }
        if !(self.noise_sigma >= 0.0 && self.magnitude >= 0.0 && self.smoothing > 0.0) {
            return bad("noise, magnitude and smoothing must be non-negative".into());
        }
        if self.deformation == DeformationKind::Rigid && self.magnitude > 0.0 {
            let d = self.rigid_direction;
            if d.iter().all(|&v| v == 0.0) || d.iter().any(|v| !v.is_finite()) {
                return bad("rigid direction must be a non-zero vector".into());
            }
        }
        let room = self.dims.min_axis() as f64 - 2.0 * self.margin();
        if room < 4.0 {
            return bad(format!(
                "grid {:?} leaves no room for blobs with a {:.1} voxel margin",
                self.dims,
                self.margin()
            ));
        }
        Ok(())
    }

    fn margin(&self) -> f64 {
        self.magnitude + 2.0
    }

    fn intensity(&self, k: usize) -> f64 {
        if !self.intensities.is_empty() {
            return self.intensities[k];
        }
        if self.blobs == 1 {
            return 1.0;
        }
        0.4 + 0.6 * k as f64 / (self.blobs - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Blob {
    centre: [f64; 3],
    radii: [f64; 3],
    intensity: f64,
}

impl Blob {
    /// Approximate signed distance in voxels, negative inside.
    fn signed_distance(&self, p: [f64; 3]) -> f64 {
        let r: f64 = (0..3).map(|a| ((p[a] - self.centre[a]) / self.radii[a]).powi(2)).sum::<f64>().sqrt();
        let rmin = self.radii.iter().copied().fold(f64::INFINITY, f64::min);
        (r - 1.0) * rmin
    }
}

fn place_blobs(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Blob>> {
    let margin = spec.margin();
    // blobs under about 5 voxels lose too much of their boundary to interpolation
    let usable: f64 = spec.dims.0.iter().map(|&n| n as f64 - 2.0 * margin).product();
    let box_min = spec.dims.min_axis() as f64 - 2.0 * margin;
    let hi_r = (0.4 * usable / spec.blobs as f64 * 3.0 / (4.0 * std::f64::consts::PI))
        .cbrt()
        .min(box_min / 4.0 + 1.0);
    let lo_r = 0.8 * hi_r;
    let mut blobs = Vec::with_capacity(spec.blobs);
    let mut attempts = 0;
    let mut shrink = 1.0;
    while blobs.len() < spec.blobs {
        attempts += 1;
        if attempts % 5_000 == 0 {
            // crowded: start over with smaller blobs
            shrink *= 0.95;
            blobs.clear();
            if lo_r * shrink < 2.5 {
                return Err(Error::InvalidArgument(format!(
                    "could not fit {} blobs in {:?} with a {margin:.1} voxel margin",
                    spec.blobs, spec.dims
                )));
            }
        }
        let base = shrink * rng.gen_range(lo_r..hi_r);
        let radii = match spec.blob_kind {
            BlobKind::Sphere => [base; 3],
            BlobKind::Ellipsoid => std::array::from_fn(|_| base * rng.gen_range(0.85..1.15)),
        };
        let rmax = radii.iter().copied().fold(0.0, f64::max);
        let mut centre = [0.0; 3];
        let mut fits = true;
        for a in 0..3 {
            let n = spec.dims.0[a] as f64;
            let (lo, hi) = (margin + radii[a], n - 1.0 - margin - radii[a]);
            if lo >= hi {
                fits = false;
                break;
            }
            centre[a] = rng.gen_range(lo..hi);
        }
        if !fits {
            continue;
        }
        // neighbours may touch; labels go to the nearest blob
        let clear = blobs.iter().all(|b: &Blob| {
            let other = b.radii.iter().copied().fold(0.0, f64::max);
            let d: f64 = (0..3).map(|a| (b.centre[a] - centre[a]).powi(2)).sum::<f64>().sqrt();
            d > 0.9 * (rmax + other)
        });
        if clear {
            blobs.push(Blob {
                centre,
                radii,
                intensity: spec.intensity(blobs.len()),
            });
        }
    }
    Ok(blobs)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn render_at(blobs: &[Blob], p: [f64; 3]) -> (f64, u16) {
    let mut v = BACKGROUND;
    let mut label = 0;
    let mut best = 0.0;
    for (k, b) in blobs.iter().enumerate() {
        let s = b.signed_distance(p);
        v += (b.intensity - BACKGROUND) * sigmoid(-s / EDGE);
        if s < best {
            best = s;
            label = k as u16 + 1;
        }
    }
    (v, label)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
fn blur(dims: Dims, data: &[f64], sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut cur = data.to_vec();
    for a in 0..3 {
        let n = dims.0[a] as i64;
        let st = dims.stride(a);
        let mut next = vec![0.0; cur.len()];
        for (i, p) in dims.iter() {
            let x = p[a] as i64;
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                let xx = (x + j as i64 - r).clamp(0, n - 1);
                acc += w * cur[i - p[a] * st + xx as usize * st];
            }
            next[i] = acc;
        }
        cur = next;
    }
    cur
}

fn truth_field(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> DisplacementField {
    let dims = spec.dims;
    if spec.magnitude == 0.0 {
        return DisplacementField::zeros(dims, Spacing::UNIT);
    }
    match spec.deformation {
        DeformationKind::Rigid => {
            let d = spec.rigid_direction;
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            DisplacementField::constant(dims, Spacing::UNIT, d.map(|v| v / n * spec.magnitude))
        }
        DeformationKind::Smooth => {
            // blur noise on a padded grid so the borders see a full kernel
            let pad = (3.0 * spec.smoothing).ceil() as usize;
            let big = Dims::new(dims.nx() + 2 * pad, dims.ny() + 2 * pad, dims.nz() + 2 * pad);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let comps: Vec<Vec<f64>> = (0..3)
                .map(|_| {
                    let noise: Vec<f64> = (0..big.len()).map(|_| normal.sample(rng)).collect();
                    blur(big, &noise, spec.smoothing)
                })
                .collect();
            let u: Vec<[f64; 3]> = dims
                .iter()
                .map(|(_, [x, y, z])| {
                    let j = big.index(x + pad, y + pad, z + pad);
                    [comps[0][j], comps[1][j], comps[2][j]]
                })
                .collect();
            let field = DisplacementField::new(dims, Spacing::UNIT, u).expect("finite field");
            let max = field.max_norm();
            field.scaled(spec.magnitude / max)
        }
    }
}

/// Solves `x + u(x) = q` by fixed-point iteration.
fn invert_point(truth: &DisplacementField, q: [f64; 3]) -> [f64; 3] {
    let mut x = q;
    for _ in 0..50 {
        let u = truth.sample(x);
        let next = [q[0] - u[0], q[1] - u[1], q[2] - u[2]];
        let moved = (0..3).map(|a| (next[a] - x[a]).abs()).fold(0.0, f64::max);
        x = next;
        if moved < 1e-10 {
            break;
        }
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub fixed: Volume,
    pub fixed_labels: LabelVolume,
    pub moving: Volume,
    pub moving_labels: LabelVolume,
    /// Warping `moving` by this field reproduces `fixed`.
    pub truth: DisplacementField,
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let blobs = place_blobs(spec, &mut rng)?;
    let truth = truth_field(spec, &mut rng);
    let dims = spec.dims;
    let n = dims.len();
    let mut fixed = Vec::with_capacity(n);
    let mut fixed_labels = Vec::with_capacity(n);
    let mut moving = Vec::with_capacity(n);
    let mut moving_labels = Vec::with_capacity(n);
    for (_, p) in dims.iter() {
        let q = p.map(|c| c as f64);
        let (v, l) = render_at(&blobs, q);
        fixed.push(v);
        fixed_labels.push(l);
        let (v, l) = render_at(&blobs, invert_point(&truth, q));
        moving.push(v);
        moving_labels.push(l);
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in fixed.iter_mut().chain(moving.iter_mut()) {
            *v += normal.sample(&mut rng);
        }
    }
    let k = spec.blobs;
    Ok(Phantom {
        spec: spec.clone(),
        fixed: Volume::new(dims, Spacing::UNIT, fixed)?,
        fixed_labels: LabelVolume::new(dims, Spacing::UNIT, fixed_labels, k)?,
        moving: Volume::new(dims, Spacing::UNIT, moving)?,
        moving_labels: LabelVolume::new(dims, Spacing::UNIT, moving_labels, k)?,
        truth,
    })
}
