//! Multi-band georeferenced rasters, label grids and window sampling.

mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use io::{load_labels, load_raster, read_records, save_labels, save_raster, write_records, MAGIC};

/// Affine pixel-to-map mapping without rotation. Pixel `(row, col)` has its
/// top-left corner at `(origin_x + col * pixel_w, origin_y + row * pixel_h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_w: f64,
    pub pixel_h: f64,
}

impl Default for GeoTransform {
    fn default() -> Self {
        Self {
            origin_x: 0.0,
            origin_y: 0.0,
            pixel_w: 1.0,
            pixel_h: -1.0,
        }
    }
}

impl GeoTransform {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.origin_x, self.origin_y, self.pixel_w, self.pixel_h]
            .iter()
            .all(|v| v.is_finite());
        if !ok || self.pixel_w == 0.0 || self.pixel_h == 0.0 {
            return Err(Error::Config(format!("non-invertible geotransform {self:?}")));
        }
        Ok(())
    }

    pub fn pixel_to_map(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + col as f64 * self.pixel_w,
            self.origin_y + row as f64 * self.pixel_h,
        )
    }

    /// Fractional `(row, col)` of a map coordinate.
    pub fn map_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        ((y - self.origin_y) / self.pixel_h, (x - self.origin_x) / self.pixel_w)
    }

    /// Integer pixel containing `(x, y)`, if inside a `rows x cols` grid.
    pub fn locate(&self, x: f64, y: f64, rows: usize, cols: usize) -> Option<(usize, usize)> {
        let (r, c) = self.map_to_pixel(x, y);
        let (r, c) = (r.floor(), c.floor());
        if r >= 0.0 && c >= 0.0 && r < rows as f64 && c < cols as f64 {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }
}

/// `m x r x c` band stack, band-major, with a shared nodata mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiBandRaster {
    bands: usize,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    nodata: Vec<bool>,
    band_names: Vec<String>,
    transform: GeoTransform,
}

impl MultiBandRaster {
    pub fn new(
        rows: usize,
        cols: usize,
        band_names: Vec<String>,
        data: Vec<f32>,
        nodata: Option<Vec<bool>>,
        transform: GeoTransform,
    ) -> Result<Self> {
        let bands = band_names.len();
        if data.len() != bands * rows * cols {
            return Err(Error::Shape(format!(
                "{bands} bands of {rows}x{cols} need {} values, got {}",
                bands * rows * cols,
                data.len()
            )));
        }
        let nodata = nodata.unwrap_or_else(|| vec![false; rows * cols]);
        if nodata.len() != rows * cols {
            return Err(Error::Shape("nodata mask does not match the grid".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = band_names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::Config(format!("duplicate band name `{dup}`")));
        }
        transform.validate()?;
        Ok(Self {
            bands,
            rows,
            cols,
            data,
            nodata,
            band_names,
            transform,
        })
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn nodata(&self) -> &[bool] {
        &self.nodata
    }

    pub fn is_nodata(&self, row: usize, col: usize) -> bool {
        self.nodata[row * self.cols + col]
    }

    pub fn band_names(&self) -> &[String] {
        &self.band_names
    }

    pub fn transform(&self) -> &GeoTransform {
        &self.transform
    }

    pub fn band(&self, j: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[j * n..(j + 1) * n]
    }

    pub fn band_mut(&mut self, j: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.data[j * n..(j + 1) * n]
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[(band * self.rows + row) * self.cols + col]
    }

    /// Keeps only the listed bands, in the given order.
    pub fn select_bands(&self, keep: &[usize]) -> Result<Self> {
        if let Some(&j) = keep.iter().find(|&&j| j >= self.bands) {
            return Err(Error::Dimension(format!("band {j} out of range")));
        }
        let mut data = Vec::with_capacity(keep.len() * self.pixels());
        for &j in keep {
            data.extend_from_slice(self.band(j));
        }
        Self::new(
            self.rows,
            self.cols,
            keep.iter().map(|&j| self.band_names[j].clone()).collect(),
            data,
            Some(self.nodata.clone()),
            self.transform,
        )
    }

    fn check_window(&self, row: usize, col: usize, w: usize) -> Result<()> {
        if w == 0 || w > self.rows.min(self.cols) {
            return Err(Error::Dimension(format!(
                "window {w} does not fit a {}x{} raster",
                self.rows, self.cols
            )));
        }
        if row >= self.rows || col >= self.cols {
            return Err(Error::Dimension(format!(
                "center ({row}, {col}) outside {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    /// Writes the `m x w x w` window centered on `(row, col)` into `out`.
    /// The window spans rows `row - w/2 .. row - w/2 + w`; positions outside
    /// the grid are mirrored about the edge pixel (the edge is not repeated).
    pub fn window_into<T: Scalar>(&self, row: usize, col: usize, w: usize, out: &mut [T]) -> Result<()> {
        self.check_window(row, col, w)?;
        if out.len() != self.bands * w * w {
            return Err(Error::Shape("window buffer has the wrong length".into()));
        }
        let half = (w / 2) as isize;
        let rows: Vec<usize> = (0..w).map(|i| reflect(row as isize - half + i as isize, self.rows)).collect();
        let cols: Vec<usize> = (0..w).map(|i| reflect(col as isize - half + i as isize, self.cols)).collect();
        let mut k = 0;
        for b in 0..self.bands {
            let plane = self.band(b);
            for &r in &rows {
                let line = &plane[r * self.cols..(r + 1) * self.cols];
                for &c in &cols {
                    out[k] = T::from_f64_lossy(line[c] as f64);
                    k += 1;
                }
            }
        }
        Ok(())
    }

    pub fn window_at(&self, row: usize, col: usize, w: usize, labels: Option<&LabelRaster>) -> Result<Sample> {
        let mut window = vec![0f32; self.bands * w * w];
        self.window_into(row, col, w, &mut window)?;
        let label = match labels {
            Some(l) => {
                if l.rows() != self.rows || l.cols() != self.cols {
                    return Err(Error::Shape("label raster does not match the feature grid".into()));
                }
                l.get(row, col)
            }
            None => Label::Unknown,
        };
        Ok(Sample {
            window,
            bands: self.bands,
            w,
            center_row: row,
            center_col: col,
            label,
        })
    }

    /// Stacks windows at `centers` into a `[B, m, w, w]` tensor.
    pub fn windows<T: Scalar>(&self, centers: &[(usize, usize)], w: usize) -> Result<Tensor<T>> {
        let per = self.bands * w * w;
        let mut data = vec![T::zero(); centers.len() * per];
        for (chunk, &(r, c)) in data.chunks_mut(per.max(1)).zip(centers) {
            self.window_into(r, c, w, chunk)?;
        }
        Tensor::new(&[centers.len(), self.bands, w, w], data)
    }

    /// Pixels that are not nodata, row-major.
    pub fn valid_pixels(&self) -> Vec<(usize, usize)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| !self.is_nodata(r, c))
            .collect()
    }
}

/// Mirror index `i` into `0..n` (`-1 -> 1`, `n -> n - 2`).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Present,
    Absent,
    Unknown,
}

impl Label {
    pub fn code(self) -> u8 {
        match self {
            Label::Present => 1,
            Label::Absent => 0,
            Label::Unknown => 255,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Label::Present),
            0 => Some(Label::Absent),
            255 => Some(Label::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    rows: usize,
    cols: usize,
    labels: Vec<Label>,
}

impl LabelRaster {
    pub fn unknown(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            labels: vec![Label::Unknown; rows * cols],
        }
    }

    pub fn from_labels(rows: usize, cols: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} labels need {} entries", rows * cols)));
        }
        Ok(Self { rows, cols, labels })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> Label {
        self.labels[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: Label) {
        self.labels[row * self.cols + col] = label;
    }

    pub fn pixels_with(&self, label: Label) -> Vec<(usize, usize)> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| (i / self.cols, i % self.cols))
            .collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// A window cut from a raster, tied to its center pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub window: Vec<f32>,
    pub bands: usize,
    pub w: usize,
    pub center_row: usize,
    pub center_col: usize,
    pub label: Label,
}

impl Sample {
    pub fn value(&self, band: usize, i: usize, j: usize) -> f32 {
        self.window[(band * self.w + i) * self.w + j]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, self.bands, self.w, self.w], |i| T::from_f64_lossy(self.window[i] as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepositRecord {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub deposit_type: String,
}

/// Outcome of burning deposit records into a label grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Rasterized {
    pub labels: LabelRaster,
    /// Distinct pixels marked Present.
    pub placed: usize,
    /// Records outside the grid or with non-finite coordinates.
    pub skipped: usize,
    /// Records landing on an already-Present pixel.
    pub duplicates: usize,
}

/// Marks the pixel containing each record Present; all other pixels stay
/// Unknown.
pub fn rasterize_records(records: &[DepositRecord], transform: &GeoTransform, shape: (usize, usize)) -> Result<Rasterized> {
    transform.validate()?;
    let (rows, cols) = shape;
    let mut labels = LabelRaster::unknown(rows, cols);
    let (mut placed, mut skipped, mut duplicates) = (0, 0, 0);
    for rec in records {
        let hit = (rec.x.is_finite() && rec.y.is_finite())
            .then(|| transform.locate(rec.x, rec.y, rows, cols))
            .flatten();
        match hit {
            None => skipped += 1,
            Some((r, c)) if labels.get(r, c) == Label::Present => duplicates += 1,
            Some((r, c)) => {
                labels.set(r, c, Label::Present);
                placed += 1;
            }
        }
    }
    Ok(Rasterized {
        labels,
        placed,
        skipped,
        duplicates,
    })
}

impl MultiBandRaster {
    /// [`rasterize_records`] on this grid; Present pixels that fall on nodata
    /// are kept and reported through the log.
    pub fn rasterize(&self, records: &[DepositRecord]) -> Result<Rasterized> {
        let out = rasterize_records(records, &self.transform, (self.rows, self.cols))?;
        let on_nodata = out
            .labels
            .pixels_with(Label::Present)
            .into_iter()
            .filter(|&(r, c)| self.is_nodata(r, c))
            .count();
        if on_nodata > 0 {
            log::warn!("{on_nodata} deposit pixels fall on nodata and are kept as Present");
        }
        if out.skipped > 0 {
            log::warn!("{} deposit records fall outside the raster extent", out.skipped);
        }
        Ok(out)
    }
}
