//! Single-head cross-attention, window partitioning with cyclic shift, and
//! bidirectional fusion between image and mask tokens.
//!
//! There are no learned projections here: queries, keys and values are the
//! token matrices themselves.

use crate::grid::Dims;
use crate::{Error, Result};

/// `n` tokens of `d` channels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::InvalidArgument("token matrix needs at least one channel".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "token matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("token matrix has non-finite entries".into()));
        }
        Ok(TokenMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged token rows".into()));
        }
        TokenMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        TokenMatrix {
            rows,
            cols: cols.max(1),
            data: vec![0.0; rows * cols.max(1)],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::InvalidArgument(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

/// Softmax with the row maximum subtracted first.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Row-stochastic weights `softmax(Q Kᵀ / √d)`, one row per query.
pub fn attention_weights(q: &TokenMatrix, k: &TokenMatrix) -> Result<TokenMatrix> {
    if q.cols != k.cols {
        return Err(shape_err("query/key channels", (q.rows, q.cols), (k.rows, k.cols)));
    }
    if k.rows == 0 {
        return Err(Error::InvalidArgument("attention needs at least one key".into()));
    }
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut data = Vec::with_capacity(q.rows * k.rows);
    for i in 0..q.rows {
        let qi = q.row(i);
        let logits: Vec<f64> = (0..k.rows)
            .map(|j| qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        data.extend(softmax(&logits));
    }
    Ok(TokenMatrix {
        rows: q.rows,
        cols: k.rows,
        data,
    })
}

pub fn cross_attention(q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> Result<TokenMatrix> {
    if k.rows != v.rows {
        return Err(shape_err("key/value tokens", (k.rows, k.cols), (v.rows, v.cols)));
    }
    let w = attention_weights(q, k)?;
    let mut out = TokenMatrix::zeros(q.rows, v.cols);
    for i in 0..q.rows {
        let wi = w.row(i);
        let oi = out.row_mut(i);
        for (j, a) in wi.iter().enumerate() {
            for (o, x) in oi.iter_mut().zip(v.row(j)) {
                *o += a * x;
            }
        }
    }
    Ok(out)
}

/// Image queries attend to mask tokens and mask queries attend to image
/// tokens; the two results are averaged.
pub fn fusion_attention(img: &TokenMatrix, mask: &TokenMatrix) -> Result<TokenMatrix> {
    if img.rows != mask.rows || img.cols != mask.cols {
        return Err(shape_err("fusion inputs", (img.rows, img.cols), (mask.rows, mask.cols)));
    }
    let a = cross_attention(img, mask, mask)?;
    let b = cross_attention(mask, img, img)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| 0.5 * (x + y)).collect();
    Ok(TokenMatrix { data, ..a })
}

/// Non-overlapping windows of edge `window` over a token grid, optionally
/// rolled by `shift` cells first (the rolled-out cells wrap around).
///
/// Axes of extent 1 are left alone, so a `(nx, ny, 1)` grid gives 2D windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowLayout {
    grid: Dims,
    window: [usize; 3],
    shift: [usize; 3],
}

impl WindowLayout {
    pub fn new(grid: Dims, window: usize, shift: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidArgument("window edge must be positive".into()));
        }
        let mut w = [1; 3];
        let mut s = [0; 3];
        for a in 0..3 {
            let n = grid.0[a];
            if n == 0 {
                return Err(Error::InvalidArgument("empty token grid".into()));
            }
            if n == 1 {
                continue;
            }
            if n % window != 0 {
                return Err(Error::InvalidArgument(format!(
                    "grid extent {n} on axis {a} is not divisible by window {window}"
                )));
            }
            w[a] = window;
            s[a] = shift % n;
        }
        Ok(WindowLayout {
            grid,
            window: w,
            shift: s,
        })
    }

    /// The shifted layout that alternates with the plain one, offset by half a window.
    pub fn shifted(grid: Dims, window: usize) -> Result<Self> {
        WindowLayout::new(grid, window, window / 2)
    }

    pub fn grid(&self) -> Dims {
        self.grid
    }

    pub fn window_len(&self) -> usize {
        self.window.iter().product()
    }

    pub fn num_windows(&self) -> usize {
        self.grid.len() / self.window_len()
    }

    /// Grid cell index of slot `slot` in window `win`.
    pub fn source(&self, win: usize, slot: usize) -> usize {
        let counts: [usize; 3] = std::array::from_fn(|a| self.grid.0[a] / self.window[a]);
        let wc = [win % counts[0], (win / counts[0]) % counts[1], win / (counts[0] * counts[1])];
        let sc = [
            slot % self.window[0],
            (slot / self.window[0]) % self.window[1],
            slot / (self.window[0] * self.window[1]),
        ];
        let p: [usize; 3] =
            std::array::from_fn(|a| (wc[a] * self.window[a] + sc[a] + self.shift[a]) % self.grid.0[a]);
        self.grid.index(p[0], p[1], p[2])
    }

    /// `(window, slot)` holding grid cell `(x, y, z)`.
    pub fn locate(&self, x: usize, y: usize, z: usize) -> (usize, usize) {
        let counts: [usize; 3] = std::array::from_fn(|a| self.grid.0[a] / self.window[a]);
        let r: [usize; 3] = std::array::from_fn(|a| {
            let n = self.grid.0[a];
            ([x, y, z][a] + n - self.shift[a]) % n
        });
        let wc: [usize; 3] = std::array::from_fn(|a| r[a] / self.window[a]);
        let sc: [usize; 3] = std::array::from_fn(|a| r[a] % self.window[a]);
        let win = wc[0] + counts[0] * (wc[1] + counts[1] * wc[2]);
        let slot = sc[0] + self.window[0] * (sc[1] + self.window[1] * sc[2]);
        (win, slot)
    }

    pub fn partition(&self, tokens: &TokenMatrix) -> Result<Vec<TokenMatrix>> {
        if tokens.rows != self.grid.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tokens for a grid of {} cells",
                tokens.rows,
                self.grid.len()
            )));
        }
        let len = self.window_len();
        Ok((0..self.num_windows())
            .map(|win| {
                let mut data = Vec::with_capacity(len * tokens.cols);
                for slot in 0..len {
                    data.extend_from_slice(tokens.row(self.source(win, slot)));
                }
                TokenMatrix {
                    rows: len,
                    cols: tokens.cols,
                    data,
                }
            })
            .collect())
    }

    pub fn reverse(&self, windows: &[TokenMatrix]) -> Result<TokenMatrix> {
        let len = self.window_len();
        if windows.len() != self.num_windows() || windows.iter().any(|w| w.rows != len) {
            return Err(Error::InvalidArgument("window set does not match the layout".into()));
        }
        let cols = windows.first().map_or(1, |w| w.cols);
        if windows.iter().any(|w| w.cols != cols) {
            return Err(Error::InvalidArgument("windows disagree on channel count".into()));
        }
        let mut out = TokenMatrix::zeros(self.grid.len(), cols);
        for (win, w) in windows.iter().enumerate() {
            for slot in 0..len {
                out.row_mut(self.source(win, slot)).copy_from_slice(w.row(slot));
            }
        }
        Ok(out)
    }
}

/// Fusion attention computed independently inside each window of `layout`.
pub fn windowed_fusion(layout: &WindowLayout, img: &TokenMatrix, mask: &TokenMatrix) -> Result<TokenMatrix> {
    let a = layout.partition(img)?;
    let b = layout.partition(mask)?;
    let fused = a.iter().zip(&b).map(|(x, y)| fusion_attention(x, y)).collect::<Result<Vec<_>>>()?;
    layout.reverse(&fused)
}
