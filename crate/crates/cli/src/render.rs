//! Fixed-colormap PNG rendering of single-band results.
//!
//! Non-finite values mark unevaluated pixels and are drawn black.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;

use prospectr::preprocess::quantile_sorted;

use crate::error::{CliError, CliResult};

pub const NODATA: [u8; 3] = [0, 0, 0];
pub const HEAT_LOW: [u8; 3] = [255, 0, 0];
pub const HEAT_HIGH: [u8; 3] = [255, 255, 0];
const GRAY: [u8; 3] = [96, 96, 96];
/// Largest share of the gray underlay, reached at the highest uncertainty.
const GRAY_MAX: f64 = 0.6;
pub const WHITE: [u8; 3] = [255, 255, 255];
pub const GREEN: [u8; 3] = [0, 128, 0];
pub const PURPLE: [u8; 3] = [128, 0, 128];
pub const QUANTILE_COLORS: [[u8; 3]; 5] = [[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    /// Likelihood as a red-yellow heat blended over a gray uncertainty
    /// underlay; takes two planes, mean then std.
    HeatOverGray,
    /// Positive values green, negative purple, zero white.
    SignedGreen,
    /// Five equal-count bins.
    Quantile5,
}

impl FromStr for Style {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "heat_over_gray" => Ok(Style::HeatOverGray),
            "signed_green" => Ok(Style::SignedGreen),
            "quantile5" => Ok(Style::Quantile5),
            other => Err(CliError::Config(format!("unknown render style `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn scaled(&self, factor: usize) -> Image {
        let f = factor.max(1);
        let (w, h) = (self.width * f, self.height * f);
        let mut rgb = Vec::with_capacity(3 * w * h);
        for r in 0..h {
            for c in 0..w {
                rgb.extend_from_slice(&self.pixel(r / f, c / f));
            }
        }
        Image { width: w, height: h, rgb }
    }

    pub fn encode(&self) -> CliResult<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header()?;
            w.write_image_data(&self.rgb)?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let file = File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(&self.rgb)?;
        w.finish()?;
        Ok(())
    }
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    std::array::from_fn(|i| (a[i] as f64 + (b[i] as f64 - a[i] as f64) * t).round() as u8)
}

/// Min and max over finite values; `None` when there are none.
fn finite_range(v: &[f32]) -> Option<(f64, f64)> {
    v.iter()
        .filter(|x| x.is_finite())
        .fold(None, |acc, &x| {
            let x = x as f64;
            Some(match acc {
                None => (x, x),
                Some((lo, hi)) => (lo.min(x), hi.max(x)),
            })
        })
}

/// `(v - lo) / (hi - lo)`, 0 on a constant range.
fn unit(v: f64, range: (f64, f64)) -> f64 {
    let (lo, hi) = range;
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.0
    }
}

fn check(planes: &[&[f32]], rows: usize, cols: usize, want: usize) -> CliResult<()> {
    if planes.len() != want {
        return Err(CliError::Config(format!("style needs {want} plane(s), got {}", planes.len())));
    }
    if planes.iter().any(|p| p.len() != rows * cols) {
        return Err(CliError::Failed(format!("plane length does not match {rows}x{cols}")));
    }
    Ok(())
}

pub fn render(style: Style, planes: &[&[f32]], rows: usize, cols: usize) -> CliResult<Image> {
    let n = rows * cols;
    let mut rgb = Vec::with_capacity(3 * n);
    match style {
        Style::HeatOverGray => {
            check(planes, rows, cols, 2)?;
            let (mean, std) = (planes[0], planes[1]);
            let mr = finite_range(mean).unwrap_or((0.0, 0.0));
            let sr = finite_range(std).unwrap_or((0.0, 0.0));
            for i in 0..n {
                let px = if mean[i].is_finite() {
                    let heat = lerp(HEAT_LOW, HEAT_HIGH, unit(mean[i] as f64, mr));
                    let u = if std[i].is_finite() { unit(std[i] as f64, sr) } else { 0.0 };
                    lerp(heat, GRAY, GRAY_MAX * u)
                } else {
                    NODATA
                };
                rgb.extend_from_slice(&px);
            }
        }
        Style::SignedGreen => {
            check(planes, rows, cols, 1)?;
            let s = planes[0].iter().filter(|x| x.is_finite()).fold(0.0f64, |m, &x| m.max((x as f64).abs()));
            for &v in planes[0] {
                let px = if !v.is_finite() {
                    NODATA
                } else if s == 0.0 {
                    WHITE
                } else if v >= 0.0 {
                    lerp(WHITE, GREEN, v as f64 / s)
                } else {
                    lerp(WHITE, PURPLE, -(v as f64) / s)
                };
                rgb.extend_from_slice(&px);
            }
        }
        Style::Quantile5 => {
            check(planes, rows, cols, 1)?;
            let mut sorted: Vec<f64> = planes[0].iter().filter(|x| x.is_finite()).map(|&x| x as f64).collect();
            sorted.sort_by(f64::total_cmp);
            let cuts: Vec<f64> = if sorted.is_empty() {
                Vec::new()
            } else {
                [0.2, 0.4, 0.6, 0.8].iter().map(|&q| quantile_sorted(&sorted, q)).collect()
            };
            for &v in planes[0] {
                let px = if v.is_finite() {
                    QUANTILE_COLORS[cuts.iter().filter(|&&c| v as f64 > c).count()]
                } else {
                    NODATA
                };
                rgb.extend_from_slice(&px);
            }
        }
    }
    Ok(Image {
        width: cols,
        height: rows,
        rgb,
    })
}

/// Renders and writes `planes` to `path`.
pub fn render_png(path: &Path, style: Style, planes: &[&[f32]], rows: usize, cols: usize, scale: usize) -> CliResult<()> {
    render(style, planes, rows, cols)?.scaled(scale).save(path)
}
