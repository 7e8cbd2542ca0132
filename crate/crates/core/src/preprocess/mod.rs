//! Per-band cleanup: outlier fences, IDW imputation, smoothing of imputed
//! pixels and standardization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::MultiBandRaster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileMethod {
    /// Linear interpolation between order statistics at `q * (n - 1)`.
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub tukey_k: f64,
    pub idw_power: f64,
    pub idw_radius: usize,
    pub smooth_sigma: f64,
    pub quantile_method: QuantileMethod,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            tukey_k: 1.5,
            idw_power: 2.0,
            idw_radius: 5,
            smooth_sigma: 1.0,
            quantile_method: QuantileMethod::Linear,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tukey_k > 0.0) {
            return Err(Error::Config(format!("tukey_k must be positive, got {}", self.tukey_k)));
        }
        if !(self.idw_power > 0.0) {
            return Err(Error::Config(format!("idw_power must be positive, got {}", self.idw_power)));
        }
        if self.idw_radius < 1 {
            return Err(Error::Config("idw_radius must be at least 1".into()));
        }
        if !(self.smooth_sigma >= 0.0) {
            return Err(Error::Config("smooth_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// A single-band grid; missing values are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Band {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} band needs {} values", rows * cols)));
        }
        Ok(Self {
            name: name.into(),
            rows,
            cols,
            values,
        })
    }

    fn finite(&self) -> Vec<f64> {
        self.values.iter().copied().filter(|v| v.is_finite()).collect()
    }
}

/// Quantile of sorted data by linear interpolation at `q * (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_finite(band: &Band) -> Result<Vec<f64>> {
    let mut v = band.finite();
    if v.is_empty() {
        return Err(Error::EmptyBand(band.name.clone()));
    }
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Sets values outside `[Q1 - k IQR, Q3 + k IQR]` missing. Returns the band
/// and the number of values removed. A zero IQR leaves the band untouched:
/// on mostly-constant (e.g. binary) layers the fences would collapse onto a
/// single value and strip every minority pixel.
pub fn tukey_filter(band: &Band, k: f64) -> Result<(Band, usize)> {
    let sorted = sorted_finite(band)?;
    if sorted.len() < 4 {
        log::warn!("band {} has only {} finite values; fences are unreliable", band.name, sorted.len());
    }
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    if iqr == 0.0 {
        return Ok((band.clone(), 0));
    }
    let (lo, hi) = (q1 - k * iqr, q3 + k * iqr);
    let mut out = band.clone();
    let mut removed = 0;
    for v in &mut out.values {
        if v.is_finite() && (*v < lo || *v > hi) {
            *v = f64::NAN;
            removed += 1;
        }
    }
    Ok((out, removed))
}

fn median(sorted: &[f64]) -> f64 {
    quantile_sorted(sorted, 0.5)
}

/// Fills every missing pixel with `Σ d^-p v / Σ d^-p` over finite pixels
/// within `radius` (Euclidean); pixels with no such neighbor get the band
/// median. Returns the band and the mask of imputed pixels.
pub fn idw_impute(band: &Band, power: f64, radius: usize) -> Result<(Band, Vec<bool>)> {
    let sorted = sorted_finite(band)?;
    let fallback = median(&sorted);
    let (rows, cols) = (band.rows, band.cols);
    let r = radius as isize;
    let offsets: Vec<(isize, isize, f64)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter_map(|(dy, dx)| {
            let d2 = (dy * dy + dx * dx) as f64;
            (d2 > 0.0 && d2 <= (r * r) as f64).then(|| (dy, dx, d2.sqrt().powf(-power)))
        })
        .collect();
    let mut out = band.clone();
    let mut imputed = vec![false; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            if band.values[i * cols + j].is_finite() {
                continue;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for &(dy, dx, w) in &offsets {
                let (y, x) = (i as isize + dy, j as isize + dx);
                if y < 0 || x < 0 || y >= rows as isize || x >= cols as isize {
                    continue;
                }
                let v = band.values[y as usize * cols + x as usize];
                if v.is_finite() {
                    num += w * v;
                    den += w;
                }
            }
            out.values[i * cols + j] = if den > 0.0 { num / den } else { fallback };
            imputed[i * cols + j] = true;
        }
    }
    Ok((out, imputed))
}

/// Discrete Gaussian taps on `-⌈3σ⌉..=⌈3σ⌉`, normalized to sum 1.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-0.5 * (d * d) as f64 / (sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

fn blur_at(band: &Band, kernel: &[f64], i: usize, j: usize) -> f64 {
    let r = (kernel.len() / 2) as isize;
    let (mut num, mut den) = (0.0, 0.0);
    for (a, ky) in kernel.iter().enumerate() {
        let y = i as isize + a as isize - r;
        if y < 0 || y >= band.rows as isize {
            continue;
        }
        for (b, kx) in kernel.iter().enumerate() {
            let x = j as isize + b as isize - r;
            if x < 0 || x >= band.cols as isize {
                continue;
            }
            let v = band.values[y as usize * band.cols + x as usize];
            if v.is_finite() {
                num += ky * kx * v;
                den += ky * kx;
            }
        }
    }
    if den > 0.0 {
        num / den
    } else {
        band.values[i * band.cols + j]
    }
}

/// Gaussian blur (kernel truncated at 3σ, renormalized where it leaves the
/// grid). `only` restricts the output change to the flagged pixels.
pub fn smooth(band: &Band, sigma: f64, only: Option<&[bool]>) -> Band {
    if sigma <= 0.0 {
        return band.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let mut out = band.clone();
    for i in 0..band.rows {
        for j in 0..band.cols {
            let idx = i * band.cols + j;
            if only.is_none_or(|m| m[idx]) {
                out.values[idx] = blur_at(band, &kernel, i, j);
            }
        }
    }
    out
}

/// Z-scores with the population standard deviation over finite values.
pub fn standardize(band: &Band) -> Result<Band> {
    let v = band.finite();
    if v.is_empty() {
        return Err(Error::EmptyBand(band.name.clone()));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) || sd <= 1e-12 * mean.abs().max(1.0) {
        return Err(Error::ConstantBand(band.name.clone()));
    }
    let mut out = band.clone();
    for x in &mut out.values {
        if x.is_finite() {
            *x = (*x - mean) / sd;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub name: String,
    pub outliers: usize,
    pub imputed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub bands: Vec<BandReport>,
    pub dropped: Vec<String>,
}

/// Runs one band through fences, imputation, smoothing of imputed pixels and
/// standardization. Nodata pixels are ignored throughout and restored as NaN.
pub fn clean_band(band: &Band, nodata: &[bool], cfg: &PreprocessConfig) -> Result<(Band, BandReport)> {
    let mut b = band.clone();
    for (v, &m) in b.values.iter_mut().zip(nodata) {
        if m {
            *v = f64::NAN;
        }
    }
    let (b, outliers) = tukey_filter(&b, cfg.tukey_k)?;
    let (b, imputed) = idw_impute(&b, cfg.idw_power, cfg.idw_radius)?;
    let imputed: Vec<bool> = imputed.iter().zip(nodata).map(|(&i, &m)| i && !m).collect();
    let mut b = b;
    for (v, &m) in b.values.iter_mut().zip(nodata) {
        if m {
            *v = f64::NAN;
        }
    }
    let b = smooth(&b, cfg.smooth_sigma, Some(&imputed));
    let b = standardize(&b)?;
    Ok((
        b,
        BandReport {
            name: band.name.clone(),
            outliers,
            imputed: imputed.iter().filter(|&&i| i).count(),
        },
    ))
}

/// Cleans every band; bands that end up constant are dropped and listed in
/// the report. Output values are finite everywhere except nodata pixels.
pub fn run_pipeline(raster: &MultiBandRaster, cfg: &PreprocessConfig) -> Result<(MultiBandRaster, PipelineReport)> {
    cfg.validate()?;
    if raster.bands() == 0 || raster.pixels() == 0 {
        return Err(Error::Contract("cannot preprocess an empty raster".into()));
    }
    let mut report = PipelineReport::default();
    let mut names = Vec::new();
    let mut data = Vec::with_capacity(raster.data().len());
    for (j, name) in raster.band_names().iter().enumerate() {
        let band = Band::new(name.clone(), raster.rows(), raster.cols(), raster.band(j).iter().map(|&v| v as f64).collect())?;
        match clean_band(&band, raster.nodata(), cfg) {
            Ok((b, rep)) => {
                data.extend(b.values.iter().map(|&v| v as f32));
                names.push(name.clone());
                report.bands.push(rep);
            }
            Err(Error::ConstantBand(n)) => {
                log::warn!("dropping band {n}: zero variance");
                report.dropped.push(n);
            }
            Err(e) => return Err(e),
        }
    }
    if names.is_empty() {
        return Err(Error::Contract("every band was dropped during preprocessing".into()));
    }
    let out = MultiBandRaster::new(raster.rows(), raster.cols(), names, data, Some(raster.nodata().to_vec()), *raster.transform())?;
    Ok((out, report))
}
