//! Cube and matrix containers plus the exact 2D/3D reshape pair.
//!
//! Spatial positions are linearised column-major: the pixel at row `m`,
//! column `k` of an `rows x cols` image has index `n = k * rows + m`.
//! A [`HsiCube`] stores its data band-major (all pixels of band 0, then band
//! 1, ...). A [`PixelMatrix`] stores one contiguous column per pixel.

use crate::error::{Error, Result};

/// A `bands x rows x cols` volume, band-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    bands: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl HsiCube {
    /// Builds a cube, rejecting inconsistent lengths and non-finite values.
    pub fn new(bands: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("cube", bands, rows, cols, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "cube value at flat index {i} is not finite"
            )));
        }
        Ok(Self {
            bands,
            rows,
            cols,
            data,
        })
    }

    pub fn zeros(bands: usize, rows: usize, cols: usize) -> Self {
        Self {
            bands,
            rows,
            cols,
            data: vec![0.0; bands * rows * cols],
        }
    }

    pub(crate) fn from_raw(bands: usize, rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), bands * rows * cols);
        Self {
            bands,
            rows,
            cols,
            data,
        }
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.bands, self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f64 {
        self.data[band * self.pixels() + col * self.rows + row]
    }

    /// The contiguous plane of one band, spatial column-major.
    pub fn band(&self, band: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[band * n..(band + 1) * n]
    }

    pub fn band_plane(&self, band: usize) -> Plane {
        Plane::from_raw(self.rows, self.cols, self.band(band).to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A single 2D image plane, spatial column-major (`n = col * rows + row`).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::shape(format!(
                "plane {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a plane from a row-major closure `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; rows * cols];
        for k in 0..cols {
            for m in 0..rows {
                data[k * rows + m] = f(m, k);
            }
        }
        Self { rows, cols, data }
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.rows + row]
    }

    /// Replicate-padded access.
    #[inline]
    pub fn get_clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.rows as isize - 1) as usize;
        let c = col.clamp(0, self.cols as isize - 1) as usize;
        self.data[c * self.rows + r]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// A `channels x pixels` matrix, one contiguous column per pixel, that
/// remembers the spatial grid it was unfolded from.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMatrix {
    channels: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl PixelMatrix {
    /// `data` is column-per-pixel: entry `(c, n)` lives at `n * channels + c`.
    pub fn new(channels: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("pixel matrix", channels, rows, cols, data.len())?;
        Ok(Self {
            channels,
            rows,
            cols,
            data,
        })
    }

    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            channels,
            rows,
            cols,
            data: vec![0.0; channels * rows * cols],
        }
    }

    pub(crate) fn from_raw(channels: usize, rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * rows * cols);
        Self {
            channels,
            rows,
            cols,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, pixel: usize) -> f64 {
        self.data[pixel * self.channels + channel]
    }

    #[inline]
    pub fn pixel(&self, pixel: usize) -> &[f64] {
        &self.data[pixel * self.channels..(pixel + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, pixel: usize) -> &mut [f64] {
        &mut self.data[pixel * self.channels..(pixel + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &PixelMatrix) -> bool {
        self.channels == other.channels && self.rows == other.rows && self.cols == other.cols
    }

    pub fn shape_str(&self) -> String {
        format!("{}x({}x{})", self.channels, self.rows, self.cols)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `channel` of the matrix laid out as an image plane.
    pub fn channel_plane(&self, channel: usize) -> Plane {
        let data = (0..self.pixels()).map(|n| self.get(channel, n)).collect();
        Plane::from_raw(self.rows, self.cols, data)
    }
}

fn check_len(what: &str, channels: usize, rows: usize, cols: usize, len: usize) -> Result<()> {
    if channels == 0 || rows == 0 || cols == 0 {
        return Err(Error::shape(format!(
            "{what} dimensions must be nonzero, got {channels}x{rows}x{cols}"
        )));
    }
    let expected = channels * rows * cols;
    if len != expected {
        return Err(Error::shape(format!(
            "{what} {channels}x{rows}x{cols} needs {expected} values, got {len}"
        )));
    }
    Ok(())
}

/// Reshapes a pixel matrix into a cube: `cube(b, m, k) = matrix(b, k * rows + m)`.
pub fn fold(matrix: &PixelMatrix) -> HsiCube {
    let c = matrix.channels;
    let n = matrix.pixels();
    let mut data = vec![0.0; c * n];
    for (pixel, column) in matrix.data.chunks_exact(c).enumerate() {
        for (band, &v) in column.iter().enumerate() {
            data[band * n + pixel] = v;
        }
    }
    HsiCube::from_raw(c, matrix.rows, matrix.cols, data)
}

/// Exact inverse of [`fold`].
pub fn unfold(cube: &HsiCube) -> PixelMatrix {
    let c = cube.bands;
    let n = cube.pixels();
    let mut data = vec![0.0; c * n];
    for (band, plane) in cube.data.chunks_exact(n).enumerate() {
        for (pixel, &v) in plane.iter().enumerate() {
            data[pixel * c + band] = v;
        }
    }
    PixelMatrix::from_raw(c, cube.rows, cube.cols, data)
}

/// Linear pixel index for `(row, col)` on a grid with `rows` rows.
#[inline]
pub fn pixel_index(rows: usize, row: usize, col: usize) -> usize {
    col * rows + row
}

/// Inverse of [`pixel_index`].
#[inline]
pub fn pixel_coords(rows: usize, index: usize) -> (usize, usize) {
    (index % rows, index / rows)
}
