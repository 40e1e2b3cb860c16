//! Scalar volumes, label volumes, one-hot masks and image pyramids.

use crate::error::{Error, Result};
use crate::grid::{Dims, Spacing};

/// Scalar intensity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        validate_lattice(dims, spacing, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "non-finite value at voxel {i}"
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Self::filled(dims, spacing, 0.0)
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f64) -> Self {
        Volume {
            dims,
            spacing,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let data = dims.iter().map(|(_, [x, y, z])| f(x, y, z)).collect();
        Volume {
            dims,
            spacing,
            data,
        }
    }

    /// Wraps data that is known to be finite and correctly sized.
    pub(crate) fn from_raw_parts(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.len(), data.len());
        Volume {
            dims,
            spacing,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Box-filter downsampling by two on every axis longer than one voxel.
    pub fn downsample(&self) -> Volume {
        let (dims, data) = downsample_channel(self.dims, &self.data);
        Volume {
            dims,
            spacing: downsampled_spacing(self.dims, self.spacing),
            data,
        }
    }
}

/// Integer anatomical labels; 0 is background, foreground classes are `1..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: Spacing,
    labels: Vec<u16>,
    num_classes: usize,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: Spacing, labels: Vec<u16>, num_classes: usize) -> Result<Self> {
        validate_lattice(dims, spacing, labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > num_classes) {
            return Err(Error::InvalidVolume(format!(
                "label {bad} exceeds class count {num_classes}"
            )));
        }
        Ok(LabelVolume {
            dims,
            spacing,
            labels,
            num_classes,
        })
    }

    /// Builds a label volume whose class count is the largest label present.
    pub fn from_labels(dims: Dims, spacing: Spacing, labels: Vec<u16>) -> Result<Self> {
        let k = labels.iter().copied().max().unwrap_or(0) as usize;
        Self::new(dims, spacing, labels, k)
    }

    /// Converts a scalar volume holding non-negative integral values.
    pub fn from_volume(vol: &Volume, num_classes: Option<usize>) -> Result<Self> {
        let mut labels = Vec::with_capacity(vol.data.len());
        for (i, &v) in vol.data.iter().enumerate() {
            if v < 0.0 || v.fract() != 0.0 || v > u16::MAX as f64 {
                return Err(Error::InvalidVolume(format!(
                    "voxel {i} holds {v}, not a label"
                )));
            }
            labels.push(v as u16);
        }
        match num_classes {
            Some(k) => Self::new(vol.dims, vol.spacing, labels, k),
            None => Self::from_labels(vol.dims, vol.spacing, labels),
        }
    }

    pub fn to_volume(&self) -> Volume {
        Volume::from_raw_parts(
            self.dims,
            self.spacing,
            self.labels.iter().map(|&l| l as f64).collect(),
        )
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, class: u16) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// One soft channel per foreground class; background has no channel.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotMask {
    dims: Dims,
    spacing: Spacing,
    channels: Vec<Vec<f64>>,
}

impl OneHotMask {
    pub fn new(dims: Dims, spacing: Spacing, channels: Vec<Vec<f64>>) -> Result<Self> {
        for (k, ch) in channels.iter().enumerate() {
            validate_lattice(dims, spacing, ch.len())?;
            if ch.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidVolume(format!(
                    "channel {} has weights outside [0, 1]",
                    k + 1
                )));
            }
        }
        Ok(OneHotMask {
            dims,
            spacing,
            channels,
        })
    }

    pub(crate) fn from_raw_parts(dims: Dims, spacing: Spacing, channels: Vec<Vec<f64>>) -> Self {
        OneHotMask {
            dims,
            spacing,
            channels,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn num_classes(&self) -> usize {
        self.channels.len()
    }

    /// Channel for class `k`, 1-indexed.
    pub fn channel(&self, k: usize) -> &[f64] {
        &self.channels[k - 1]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    /// Hard class of voxel `i`: the strongest channel if it reaches 0.5, else background.
    pub fn hard_label(&self, i: usize) -> u16 {
        let mut best = 0u16;
        let mut best_w = f64::NEG_INFINITY;
        for (k, ch) in self.channels.iter().enumerate() {
            if ch[i] > best_w {
                best = (k + 1) as u16;
                best_w = ch[i];
            }
        }
        if best_w >= 0.5 {
            best
        } else {
            0
        }
    }

    /// Per-voxel argmax with a 0.5 background threshold.
    pub fn argmax(&self) -> LabelVolume {
        let labels = (0..self.dims.len()).map(|i| self.hard_label(i)).collect();
        LabelVolume {
            dims: self.dims,
            spacing: self.spacing,
            labels,
            num_classes: self.channels.len(),
        }
    }

    pub fn downsample(&self) -> OneHotMask {
        let mut dims = self.dims.halved();
        let channels = self
            .channels
            .iter()
            .map(|ch| {
                let (d, data) = downsample_channel(self.dims, ch);
                dims = d;
                data
            })
            .collect();
        OneHotMask {
            dims,
            spacing: downsampled_spacing(self.dims, self.spacing),
            channels,
        }
    }
}

/// Channel `k` is 1 exactly where the label equals `k`.
pub fn one_hot(labels: &LabelVolume) -> OneHotMask {
    let n = labels.dims.len();
    let mut channels = vec![vec![0.0; n]; labels.num_classes];
    for (i, &l) in labels.labels.iter().enumerate() {
        if l > 0 {
            channels[l as usize - 1][i] = 1.0;
        }
    }
    OneHotMask {
        dims: labels.dims,
        spacing: labels.spacing,
        channels,
    }
}

fn validate_lattice(dims: Dims, spacing: Spacing, len: usize) -> Result<()> {
    if dims.0.iter().any(|&n| n == 0) {
        return Err(Error::InvalidVolume(format!("empty axis in {dims:?}")));
    }
    if !spacing.is_valid() {
        return Err(Error::InvalidVolume(format!(
            "spacing {:?} must be positive",
            spacing.0
        )));
    }
    if len != dims.len() {
        return Err(Error::InvalidVolume(format!(
            "{len} values for {} voxels",
            dims.len()
        )));
    }
    Ok(())
}

fn downsampled_spacing(dims: Dims, spacing: Spacing) -> Spacing {
    let mut s = spacing.0;
    for a in 0..3 {
        if dims.0[a] > 1 {
            s[a] *= 2.0;
        }
    }
    Spacing(s)
}

fn downsample_channel(dims: Dims, data: &[f64]) -> (Dims, Vec<f64>) {
    let out = dims.halved();
    let [nx, ny, nz] = dims.0;
    let mut res = Vec::with_capacity(out.len());
    for (_, [ox, oy, oz]) in out.iter() {
        let xs = if nx > 1 { 2 * ox..(2 * ox + 2).min(nx) } else { 0..1 };
        let ys = if ny > 1 { 2 * oy..(2 * oy + 2).min(ny) } else { 0..1 };
        let zs = if nz > 1 { 2 * oz..(2 * oz + 2).min(nz) } else { 0..1 };
        let mut sum = 0.0;
        let mut count = 0usize;
        for z in zs {
            for y in ys.clone() {
                for x in xs.clone() {
                    sum += data[dims.index(x, y, z)];
                    count += 1;
                }
            }
        }
        res.push(sum / count as f64);
    }
    (out, res)
}

/// Something that can be halved for a coarse-to-fine pyramid.
pub trait Downsample: Sized {
    fn grid_dims(&self) -> Dims;
    fn halve(&self) -> Self;
}

impl Downsample for Volume {
    fn grid_dims(&self) -> Dims {
        self.dims
    }
    fn halve(&self) -> Self {
        self.downsample()
    }
}

impl Downsample for OneHotMask {
    fn grid_dims(&self) -> Dims {
        self.dims
    }
    fn halve(&self) -> Self {
        self.downsample()
    }
}

/// Level 0 is full resolution; every following level is halved per axis.
#[derive(Debug, Clone)]
pub struct Pyramid<T> {
    levels: Vec<T>,
}

impl<T> Pyramid<T> {
    pub fn levels(&self) -> &[T] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &T {
        &self.levels[i]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn coarsest(&self) -> &T {
        self.levels.last().expect("pyramid has at least one level")
    }
}

/// Checks that `levels` repeated halvings keep every non-singleton axis at two voxels or more.
pub fn pyramid_fits(dims: Dims, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
    }
    let mut d = dims;
    for _ in 1..levels {
        d = d.halved();
    }
    for a in 0..3 {
        if dims.0[a] > 1 && d.0[a] < 2 {
            return Err(Error::PyramidTooDeep { dims, levels });
        }
    }
    Ok(())
}

pub fn build_pyramid<T: Downsample + Clone>(base: &T, levels: usize) -> Result<Pyramid<T>> {
    pyramid_fits(base.grid_dims(), levels)?;
    let mut out = Vec::with_capacity(levels);
    out.push(base.clone());
    for i in 1..levels {
        let next = out[i - 1].halve();
        out.push(next);
    }
    Ok(Pyramid { levels: out })
}
