//! Region prototypes and the contrast / alignment losses built on them.
//!
//! Features come from a fixed two-channel filter bank (intensity and
//! gradient magnitude, each standardized over the volume). A prototype is
//! the mask-weighted mean feature vector of one class.

use serde::Serialize;

use crate::error::{check_dims, Result};
use crate::grid::{Dims, Spacing};
use crate::volume::{OneHotMask, Volume};
use crate::warp::{warp_channel_with_grad, DisplacementField};

/// Mask weight below which a class is treated as absent.
pub const PRESENCE_EPS: f64 = 1e-7;
/// Guard on the norm product in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// `C` scalar feature channels on a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    dims: Dims,
    spacing: Spacing,
    channels: Vec<Vec<f64>>,
}

impl FeatureVolume {
    pub fn new(dims: Dims, spacing: Spacing, channels: Vec<Vec<f64>>) -> Result<Self> {
        for ch in &channels {
            if ch.len() != dims.len() || ch.iter().any(|v| !v.is_finite()) {
                return Err(crate::Error::InvalidVolume("feature channel size or value".into()));
            }
        }
        Ok(FeatureVolume {
            dims,
            spacing,
            channels,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn at(&self, i: usize) -> Vec<f64> {
        self.channels.iter().map(|c| c[i]).collect()
    }

    /// Each channel resampled through the field, plus `d channel(p) / d u(p)`.
    pub(crate) fn warped_with_grad(&self, field: &DisplacementField) -> (FeatureVolume, Vec<Vec<[f64; 3]>>) {
        let (channels, grads) = self
            .channels
            .iter()
            .map(|ch| warp_channel_with_grad(self.dims, ch, field))
            .unzip();
        (
            FeatureVolume {
                dims: self.dims,
                spacing: self.spacing,
                channels,
            },
            grads,
        )
    }

    pub fn warped(&self, field: &DisplacementField) -> Result<FeatureVolume> {
        check_dims("warp features", self.dims, field.dims())?;
        Ok(self.warped_with_grad(field).0)
    }
}

fn standardize(mut x: Vec<f64>) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 1e-24 { 1.0 / var.sqrt() } else { 1.0 };
    x.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    x
}

/// Intensity and central-difference gradient magnitude, each standardized.
pub fn compute_features(vol: &Volume) -> FeatureVolume {
    let dims = vol.dims();
    let data = vol.data();
    let grad_mag = dims
        .iter()
        .map(|(i, p)| {
            let mut s = 0.0;
            for a in 0..3 {
                let n = dims.0[a];
                if n < 2 {
                    continue;
                }
                let st = dims.stride(a);
                let g = if p[a] == 0 {
                    data[i + st] - data[i]
                } else if p[a] == n - 1 {
                    data[i] - data[i - st]
                } else {
                    0.5 * (data[i + st] - data[i - st])
                };
                s += g * g;
            }
            s.sqrt()
        })
        .collect();
    FeatureVolume {
        dims,
        spacing: vol.spacing(),
        channels: vec![standardize(data.to_vec()), standardize(grad_mag)],
    }
}

/// One optional prototype per class (index `k - 1`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrototypeSet {
    prototypes: Vec<Option<Vec<f64>>>,
    #[serde(skip)]
    weights: Vec<f64>,
}

impl PrototypeSet {
    pub fn from_vectors(prototypes: Vec<Option<Vec<f64>>>) -> Self {
        let weights = prototypes.iter().map(|p| if p.is_some() { 1.0 } else { 0.0 }).collect();
        PrototypeSet { prototypes, weights }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    /// Prototype of class `k` (1-indexed), if present.
    pub fn get(&self, k: usize) -> Option<&[f64]> {
        self.prototypes[k - 1].as_deref()
    }

    pub fn is_present(&self, k: usize) -> bool {
        self.prototypes[k - 1].is_some()
    }

    pub fn present_classes(&self) -> Vec<usize> {
        (1..=self.prototypes.len()).filter(|&k| self.is_present(k)).collect()
    }
}

/// Masked average pooling: `P_k = sum F m_k / sum m_k` per channel.
pub fn extract_prototypes(features: &FeatureVolume, mask: &OneHotMask) -> Result<PrototypeSet> {
    check_dims("extract_prototypes", features.dims, mask.dims())?;
    let mut prototypes = Vec::with_capacity(mask.num_classes());
    let mut weights = Vec::with_capacity(mask.num_classes());
    for m in mask.channels() {
        let w: f64 = m.iter().sum();
        weights.push(w);
        if w < PRESENCE_EPS {
            prototypes.push(None);
            continue;
        }
        let p = features
            .channels
            .iter()
            .map(|ch| ch.iter().zip(m).map(|(f, mk)| f * mk).sum::<f64>() / w)
            .collect();
        prototypes.push(Some(p));
    }
    Ok(PrototypeSet { prototypes, weights })
}

/// Back-propagates `dL/dP_k` through masked average pooling into the
/// features and the mask channels.
pub(crate) fn prototypes_backward(
    features: &FeatureVolume,
    mask: &OneHotMask,
    protos: &PrototypeSet,
    grad_protos: &[Option<Vec<f64>>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = features.dims.len();
    let mut gf = vec![vec![0.0; n]; features.channels.len()];
    let mut gm = vec![vec![0.0; n]; mask.num_classes()];
    for (k0, g) in grad_protos.iter().enumerate() {
        let (Some(g), Some(p)) = (g, &protos.prototypes[k0]) else {
            continue;
        };
        let w = protos.weights[k0];
        let m = &mask.channels()[k0];
        for (c, ch) in features.channels.iter().enumerate() {
            for q in 0..n {
                gf[c][q] += g[c] * m[q] / w;
                gm[k0][q] += g[c] * (ch[q] - p[c]) / w;
            }
        }
    }
    (gf, gm)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b)).max(COSINE_EPS)
}

/// Gradient of `cosine(a, b)` with respect to `a`.
fn cosine_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let (na, nb) = (norm(a), norm(b));
    let denom = na * nb;
    if denom <= COSINE_EPS {
        return b.iter().map(|v| v / COSINE_EPS).collect();
    }
    let cos = dot(a, b) / denom;
    a.iter().zip(b).map(|(x, y)| y / denom - cos * x / (na * na)).collect()
}

/// Voxel-to-prototype contrastive loss.
///
/// Each foreground voxel (hard label from `mask`) is scored against every
/// present prototype with `cos / temperature`; the loss is the mean softmax
/// cross-entropy of its own class. Fewer than two present classes gives 0.
pub fn contrast_loss(features: &FeatureVolume, mask: &OneHotMask, protos: &PrototypeSet, temperature: f64) -> Result<f64> {
    check_dims("contrast_loss", features.dims, mask.dims())?;
    Ok(contrast_with_grad(features, mask, protos, temperature, false).0)
}

pub(crate) fn contrast_with_grad(
    features: &FeatureVolume,
    mask: &OneHotMask,
    protos: &PrototypeSet,
    temperature: f64,
    want_grad: bool,
) -> (f64, Vec<Vec<f64>>) {
    let n = features.dims.len();
    let c = features.channels.len();
    let mut grad = if want_grad { vec![vec![0.0; n]; c] } else { Vec::new() };
    let present = protos.present_classes();
    if present.len() < 2 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut logits = vec![0.0; present.len()];
    for q in 0..n {
        let label = mask.hard_label(q) as usize;
        let Some(pos) = present.iter().position(|&k| k == label) else {
            continue;
        };
        let f = features.at(q);
        for (j, &k) in present.iter().enumerate() {
            logits[j] = cosine(&f, protos.get(k).unwrap()) / temperature;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|s| (s - max).exp()).sum();
        total += max + z.ln() - logits[pos];
        counted += 1;
        if want_grad {
            for (j, &k) in present.iter().enumerate() {
                let soft = (logits[j] - max).exp() / z;
                let coef = (soft - if j == pos { 1.0 } else { 0.0 }) / temperature;
                if coef == 0.0 {
                    continue;
                }
                let cg = cosine_grad(&f, protos.get(k).unwrap());
                for ch in 0..c {
                    grad[ch][q] += coef * cg[ch];
                }
            }
        }
    }
    if counted == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / counted as f64;
    grad.iter_mut().flatten().for_each(|g| *g *= inv);
    (total * inv, grad)
}

/// Per-class alignment between two prototype sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignOutcome {
    pub value: f64,
    /// Classes present on exactly one side.
    pub skipped: usize,
}

/// `sum_k (1 - cos(P_f^k, P_m^k))` over classes present on both sides.
pub fn align_loss(fixed: &PrototypeSet, moving: &PrototypeSet) -> AlignOutcome {
    align_with_grad(fixed, moving, false).0
}

pub(crate) fn align_with_grad(
    fixed: &PrototypeSet,
    moving: &PrototypeSet,
    want_grad: bool,
) -> (AlignOutcome, Vec<Option<Vec<f64>>>) {
    let mut value = 0.0;
    let mut skipped = 0;
    let mut grad = vec![None; moving.num_classes()];
    for k in 1..=fixed.num_classes().min(moving.num_classes()) {
        match (fixed.get(k), moving.get(k)) {
            (Some(pf), Some(pm)) => {
                value += 1.0 - cosine(pf, pm);
                if want_grad {
                    grad[k - 1] = Some(cosine_grad(pm, pf).into_iter().map(|g| -g).collect());
                }
            }
            (None, None) => {}
            _ => skipped += 1,
        }
    }
    (AlignOutcome { value, skipped }, grad)
}

/// Components of the prototype term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrototypeTerms {
    pub contrast: f64,
    pub align: f64,
}

impl PrototypeTerms {
    pub fn total(&self) -> f64 {
        self.contrast + self.align
    }
}

/// Full prototype loss for one image pair.
///
/// Contrast averages two halves scored against the fixed prototypes: the
/// warped moving features and the fixed features, both assigned by the
/// fixed mask. Alignment compares the fixed prototypes with prototypes
/// pooled from the warped moving features under the warped moving mask.
pub fn prototype_loss(
    fixed_features: &FeatureVolume,
    fixed_mask: &OneHotMask,
    warped_features: &FeatureVolume,
    warped_mask: &OneHotMask,
    temperature: f64,
) -> Result<PrototypeTerms> {
    let fixed_protos = extract_prototypes(fixed_features, fixed_mask)?;
    let moved_protos = extract_prototypes(warped_features, warped_mask)?;
    let c_fixed = contrast_loss(fixed_features, fixed_mask, &fixed_protos, temperature)?;
    let c_moved = contrast_loss(warped_features, fixed_mask, &fixed_protos, temperature)?;
    Ok(PrototypeTerms {
        contrast: 0.5 * (c_fixed + c_moved),
        align: align_loss(&fixed_protos, &moved_protos).value,
    })
}
