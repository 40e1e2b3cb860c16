//! Binary PPM (P6) slices with label outlines drawn over the intensities.

use protoreg::grid::Dims;
use protoreg::volume::{LabelVolume, Volume};

use crate::exit::{CliError, CliResult};

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Outline colour for a class; classes past the palette wrap around.
pub fn class_color(class: u16) -> [u8; 3] {
    PALETTE[(class.max(1) as usize - 1) % PALETTE.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn parse(s: &str) -> CliResult<Axis> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            _ => Err(CliError::args(format!("axis must be one of x, y, z; got `{s}`"))),
        }
    }

    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// RGB triples, row by row.
    pub pixels: Vec<[u8; 3]>,
}

impl Image {
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    pub fn pixel(&self, col: usize, row: usize) -> [u8; 3] {
        self.pixels[row * self.width + col]
    }
}

// In-plane axes (columns, rows) for a slice normal to `axis`.
fn plane(axis: Axis) -> (usize, usize) {
    match axis {
        Axis::X => (1, 2),
        Axis::Y => (0, 2),
        Axis::Z => (0, 1),
    }
}

fn voxel(axis: Axis, index: usize, col: usize, row: usize) -> [usize; 3] {
    let (c, r) = plane(axis);
    let mut p = [0; 3];
    p[axis.index()] = index;
    p[c] = col;
    p[r] = row;
    p
}

/// Grey levels are `v / max`, clamped to `[0, 1]`; a volume with no
/// positive value renders black.
pub fn render(vol: &Volume, labels: Option<&LabelVolume>, axis: Axis, index: usize) -> CliResult<Image> {
    let dims: Dims = vol.dims();
    if let Some(l) = labels {
        if l.dims() != dims {
            return Err(CliError::args(format!(
                "labels are {:?} but the volume is {:?}",
                l.dims().0,
                dims.0
            )));
        }
    }
    let depth = dims.0[axis.index()];
    if index >= depth {
        return Err(CliError::args(format!("slice index {index} is outside 0..{depth}")));
    }
    let (c, r) = plane(axis);
    let (width, height) = (dims.0[c], dims.0[r]);
    let max = vol.data().iter().cloned().fold(0.0, f64::max);
    let mut pixels = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let [x, y, z] = voxel(axis, index, col, row);
            let g = if max > 0.0 {
                (vol.get(x, y, z) / max).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let g = (g * 255.0).round() as u8;
            pixels.push([g, g, g]);
        }
    }
    if let Some(l) = labels {
        let at = |col: isize, row: isize| -> u16 {
            if col < 0 || row < 0 || col as usize >= width || row as usize >= height {
                return 0;
            }
            let p = voxel(axis, index, col as usize, row as usize);
            l.labels()[dims.index(p[0], p[1], p[2])]
        };
        for row in 0..height as isize {
            for col in 0..width as isize {
                let k = at(col, row);
                if k == 0 {
                    continue;
                }
                let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|(dc, dr)| at(col + dc, row + dr) != k);
                if edge {
                    pixels[row as usize * width + col as usize] = class_color(k);
                }
            }
        }
    }
    Ok(Image { width, height, pixels })
}
