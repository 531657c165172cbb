//! Dense multi-channel BEV rasters.
//!
//! Layout is row-major with channels last: the value of channel `k` at
//! `(row, col)` lives at `(row * width + col) * channels + k`. Columns run
//! along the local x axis and rows along the local y axis; `origin` is the
//! local position (meters) of the center of cell `(0, 0)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Geometry of a raster without its payload.
/// Rounding slack, in cells, tolerated at the border of the sampling hull.
const HULL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub cell_size: f64,
    pub origin: [f64; 2],
}

impl GridSpec {
    /// A grid whose extent is centered on the local origin.
    pub fn centered(height: usize, width: usize, cell_size: f64) -> Self {
        GridSpec {
            height,
            width,
            cell_size,
            origin: [
                -((width as f64 - 1.0) / 2.0) * cell_size,
                -((height as f64 - 1.0) / 2.0) * cell_size,
            ],
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Local position of the center of `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin[0] + col as f64 * self.cell_size,
            self.origin[1] + row as f64 * self.cell_size,
        )
    }

    /// Continuous `(col, row)` coordinate of a local point.
    pub fn to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin[0]) / self.cell_size,
            (y - self.origin[1]) / self.cell_size,
        )
    }

    /// Nearest cell to a local point, if it lies inside the raster footprint.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (c, r) = self.to_cell(x, y);
        let (c, r) = (c.round(), r.round());
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// Spec of the grid obtained by mean pooling with `factor`.
    pub fn pooled(&self, factor: usize) -> GridSpec {
        let f = factor as f64;
        GridSpec {
            height: self.height / factor,
            width: self.width / factor,
            cell_size: self.cell_size * f,
            origin: [
                self.origin[0] + (f - 1.0) / 2.0 * self.cell_size,
                self.origin[1] + (f - 1.0) / 2.0 * self.cell_size,
            ],
        }
    }

    /// Half-extent of the footprint (center to outer edge) along x and y.
    pub fn half_extent(&self) -> (f64, f64) {
        (
            self.width as f64 * self.cell_size / 2.0,
            self.height as f64 * self.cell_size / 2.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    spec: GridSpec,
    channels: usize,
    data: Vec<f32>,
}

impl BevGrid {
    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        assert!(spec.height > 0 && spec.width > 0 && channels > 0, "empty grid");
        BevGrid {
            spec,
            channels,
            data: vec![0.0; spec.cells() * channels],
        }
    }

    pub fn filled(spec: GridSpec, channels: usize, value: f32) -> Self {
        let mut g = Self::zeros(spec, channels);
        g.data.fill(value);
        g
    }

    pub fn from_data(spec: GridSpec, channels: usize, data: Vec<f32>) -> Result<Self> {
        if spec.height == 0 || spec.width == 0 || channels == 0 {
            return Err(Error::shape("BevGrid::from_data", "non-zero dims", format!("{}x{}x{}", spec.height, spec.width, channels)));
        }
        let expected = spec.cells() * channels;
        if data.len() != expected {
            return Err(Error::shape("BevGrid::from_data", expected, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain {
                context: "BevGrid values (must be finite)",
                value: *v as f64,
            });
        }
        Ok(BevGrid { spec, channels, data })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }
    pub fn height(&self) -> usize {
        self.spec.height
    }
    pub fn width(&self) -> usize {
        self.spec.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn cell_size(&self) -> f64 {
        self.spec.cell_size
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.spec.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let i = (row * self.spec.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Same geometry, different payload.
    pub fn with_data(&self, channels: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_data(self.spec, channels, data)
    }

    /// Single channel `k` as its own grid.
    pub fn channel(&self, k: usize) -> BevGrid {
        let data = self.data.chunks_exact(self.channels).map(|c| c[k]).collect();
        BevGrid {
            spec: self.spec,
            channels: 1,
            data,
        }
    }

    /// Per-channel mean over all cells.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.channels];
        for cell in self.data.chunks_exact(self.channels) {
            for (a, v) in acc.iter_mut().zip(cell) {
                *a += *v as f64;
            }
        }
        let n = self.spec.cells() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Bilinear interpolation at continuous cell coordinate `(x, y)` = `(col, row)`.
    ///
    /// Points outside the hull of cell centers yield zeros.
    pub fn bilinear_sample(&self, x: f64, y: f64) -> Vec<f32> {
        let mut out = vec![0.0; self.channels];
        self.sample_into(x, y, &mut out);
        out
    }

    /// Allocation-free variant of [`bilinear_sample`](Self::bilinear_sample);
    /// overwrites `out`.
    pub fn sample_into(&self, x: f64, y: f64, out: &mut [f32]) {
        out.fill(0.0);
        self.sample_add(x, y, 1.0, out);
    }

    /// Accumulates `weight * sample(x, y)` into `out`.
    pub fn sample_add(&self, x: f64, y: f64, weight: f32, out: &mut [f32]) {
        let (w, h) = (self.spec.width, self.spec.height);
        let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
        if !(x >= -HULL_SLACK && y >= -HULL_SLACK && x <= xmax + HULL_SLACK && y <= ymax + HULL_SLACK) {
            return;
        }
        let (x, y) = (x.clamp(0.0, xmax), y.clamp(0.0, ymax));
        let x0 = (x.floor() as usize).min(w - 1);
        let y0 = (y.floor() as usize).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let corners = [
            (y0, x0, (1.0 - fx) * (1.0 - fy)),
            (y0, x1, fx * (1.0 - fy)),
            (y1, x0, (1.0 - fx) * fy),
            (y1, x1, fx * fy),
        ];
        for (r, c, cw) in corners {
            if cw == 0.0 {
                continue;
            }
            let cw = cw * weight;
            for (o, v) in out.iter_mut().zip(self.at(r, c)) {
                *o += cw * v;
            }
        }
    }

    /// Mean pooling by `factor` in both directions.
    pub fn downsample(&self, factor: usize) -> Result<BevGrid> {
        self.downsample_level(factor, 0)
    }

    fn downsample_level(&self, factor: usize, level: usize) -> Result<BevGrid> {
        let (h, w) = (self.spec.height, self.spec.width);
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::NotDivisible {
                level,
                height: h,
                width: w,
                factor,
            });
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let spec = self.spec.pooled(factor);
        let ch = self.channels;
        let inv = 1.0 / (factor * factor) as f32;
        let mut out = BevGrid::zeros(spec, ch);
        out.data
            .par_chunks_mut(spec.width * ch)
            .enumerate()
            .for_each(|(r, row)| {
                for c in 0..spec.width {
                    let dst = &mut row[c * ch..(c + 1) * ch];
                    for dr in 0..factor {
                        for dc in 0..factor {
                            let src = self.at(r * factor + dr, c * factor + dc);
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    dst.iter_mut().for_each(|d| *d *= inv);
                }
            });
        Ok(out)
    }

    /// Nearest-neighbour upsampling onto `spec` (which must be `factor` times finer).
    pub fn upsample_nearest(&self, factor: usize) -> BevGrid {
        let spec = GridSpec {
            height: self.spec.height * factor,
            width: self.spec.width * factor,
            cell_size: self.spec.cell_size / factor as f64,
            origin: [
                self.spec.origin[0] - (factor as f64 - 1.0) / 2.0 * self.spec.cell_size / factor as f64,
                self.spec.origin[1] - (factor as f64 - 1.0) / 2.0 * self.spec.cell_size / factor as f64,
            ],
        };
        let ch = self.channels;
        let mut out = BevGrid::zeros(spec, ch);
        for r in 0..spec.height {
            for c in 0..spec.width {
                out.at_mut(r, c).copy_from_slice(self.at(r / factor, c / factor));
            }
        }
        out
    }

    /// Elementwise `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f32, other: &BevGrid) -> Result<()> {
        if self.spec.height != other.spec.height || self.spec.width != other.spec.width || self.channels != other.channels {
            return Err(Error::shape(
                "BevGrid::axpy",
                format!("{}x{}x{}", self.height(), self.width(), self.channels),
                format!("{}x{}x{}", other.height(), other.width(), other.channels),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &BevGrid) -> bool {
        self.spec.height == other.spec.height && self.spec.width == other.spec.width && self.channels == other.channels
    }
}

/// Mean-pooled multi-scale stack; level `l` has dims `(H / 2^l, W / 2^l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<BevGrid>,
}

impl FeaturePyramid {
    pub fn build(grid: &BevGrid, levels: usize) -> Result<Self> {
        assert!(levels >= 1, "pyramid needs at least one level");
        let need = 1usize << (levels - 1);
        // Report the first level that cannot be formed.
        if grid.height() % need != 0 || grid.width() % need != 0 {
            let mut l = 1;
            while grid.height() % (1 << l) == 0 && grid.width() % (1 << l) == 0 {
                l += 1;
            }
            return Err(Error::NotDivisible {
                level: l,
                height: grid.height(),
                width: grid.width(),
                factor: 1 << l,
            });
        }
        let mut out = Vec::with_capacity(levels);
        out.push(grid.clone());
        for l in 1..levels {
            let next = out[l - 1].downsample_level(2, l)?;
            out.push(next);
        }
        Ok(FeaturePyramid { levels: out })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

pub fn build_pyramid(grid: &BevGrid, levels: usize) -> Result<FeaturePyramid> {
    FeaturePyramid::build(grid, levels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_from(h: usize, w: usize, ch: usize, data: Vec<f32>) -> BevGrid {
        BevGrid::from_data(GridSpec::centered(h, w, 1.0), ch, data).unwrap()
    }

    #[test]
    fn pyramid_dims_halve() {
        let g = BevGrid::zeros(GridSpec::centered(64, 64, 0.5), 8);
        let p = build_pyramid(&g, 3).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|l| (l.height(), l.width(), l.channels())).collect();
        assert_eq!(dims, vec![(64, 64, 8), (32, 32, 8), (16, 16, 8)]);
        assert_eq!(p.levels[2].cell_size(), 2.0);
    }

    #[test]
    fn pyramid_of_constant_is_constant() {
        let g = BevGrid::filled(GridSpec::centered(8, 8, 1.0), 2, 3.5);
        let p = build_pyramid(&g, 4).unwrap();
        for l in &p.levels {
            assert!(l.data().iter().all(|v| *v == 3.5));
        }
    }

    #[test]
    fn pyramid_single_spike() {
        let mut g = BevGrid::zeros(GridSpec::centered(4, 4, 1.0), 1);
        g.at_mut(1, 2)[0] = 4.0;
        let p = build_pyramid(&g, 2).unwrap();
        assert_eq!(p.levels[1].at(0, 1)[0], 1.0);
        assert_eq!(p.levels[1].at(0, 0)[0], 0.0);
    }

    #[test]
    fn pyramid_names_offending_level() {
        let g = BevGrid::zeros(GridSpec::centered(12, 12, 1.0), 1);
        match build_pyramid(&g, 4) {
            Err(Error::NotDivisible { level, factor, .. }) => {
                assert_eq!(level, 3);
                assert_eq!(factor, 8);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pyramid_preserves_world_extent() {
        let g = BevGrid::zeros(GridSpec::centered(16, 8, 0.4), 1);
        let p = build_pyramid(&g, 3).unwrap();
        let base = g.spec().half_extent();
        for l in &p.levels {
            let e = l.spec().half_extent();
            assert!((e.0 - base.0).abs() < 1e-12 && (e.1 - base.1).abs() < 1e-12);
            // first cell center sits in the middle of its pooled block
            let (x, y) = l.spec().cell_center(0, 0);
            assert!((x - (-base.0 + l.cell_size() / 2.0)).abs() < 1e-12);
            assert!((y - (-base.1 + l.cell_size() / 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_examples() {
        let g = grid_from(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(g.bilinear_sample(0.5, 0.5), vec![1.5]);
        assert_eq!(g.bilinear_sample(0.0, 0.0), vec![0.0]);
        assert_eq!(g.bilinear_sample(0.25, 0.0), vec![0.25]);
        assert_eq!(g.bilinear_sample(1.0, 1.0), vec![3.0]);
    }

    #[test]
    fn bilinear_out_of_bounds_is_zero() {
        let g = BevGrid::filled(GridSpec::centered(3, 3, 1.0), 2, 7.0);
        assert_eq!(g.bilinear_sample(-0.01, 1.0), vec![0.0, 0.0]);
        assert_eq!(g.bilinear_sample(1.0, 2.01), vec![0.0, 0.0]);
        assert_eq!(g.bilinear_sample(f64::NAN, 1.0), vec![0.0, 0.0]);
        assert_eq!(g.bilinear_sample(2.0, 2.0), vec![7.0, 7.0]);
    }

    #[test]
    fn downsample_examples() {
        let g = BevGrid::filled(GridSpec::centered(4, 4, 1.0), 1, 1.0);
        assert_eq!(g.downsample(1).unwrap(), g);
        let d = g.downsample(2).unwrap();
        assert_eq!((d.height(), d.width()), (2, 2));
        assert!(d.data().iter().all(|v| *v == 1.0));

        let g = grid_from(2, 2, 1, vec![0.0, 2.0, 4.0, 6.0]);
        assert_eq!(g.downsample(2).unwrap().data(), &[3.0]);
        assert!(matches!(g.downsample(3), Err(Error::NotDivisible { .. })));
    }

    #[test]
    fn from_data_rejects_bad_payloads() {
        let spec = GridSpec::centered(2, 2, 1.0);
        assert!(BevGrid::from_data(spec, 1, vec![0.0; 3]).is_err());
        assert!(BevGrid::from_data(spec, 1, vec![0.0, 1.0, f32::NAN, 0.0]).is_err());
        assert!(BevGrid::from_data(spec, 0, vec![]).is_err());
    }

    #[test]
    fn upsample_roundtrip_geometry() {
        let g = BevGrid::zeros(GridSpec::centered(8, 8, 0.5), 1);
        let coarse = g.downsample(4).unwrap();
        let up = coarse.upsample_nearest(4);
        assert_eq!(up.spec(), g.spec());
    }
}
