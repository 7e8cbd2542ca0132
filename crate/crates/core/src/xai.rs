//! Integrated Gradients attributions and per-band attribution maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clf::{Classifier, DropoutCtl};
use crate::error::{Error, Result};
use crate::nn::NormMode;
use crate::raster::MultiBandRaster;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const MIN_STEPS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    /// Signed attribution per input element, same layout as the input.
    pub scores: Vec<f64>,
    pub baseline: Vec<f64>,
    pub steps: usize,
    pub f_input: f64,
    pub f_baseline: f64,
    /// `|Σ scores - (F(x) - F(baseline))|`.
    pub completeness_gap: f64,
}

impl Attribution {
    /// Sum of attributions over one band of an `[m, w, w]` input.
    pub fn band_total(&self, band: usize, plane: usize) -> f64 {
        self.scores[band * plane..(band + 1) * plane].iter().sum()
    }
}

fn eval_scalar<T: Scalar, F>(f: &F, x: &Tensor<T>) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let y = f(&mut tape, v)?;
    let vals = tape.value(y);
    if vals.len() != 1 {
        return Err(Error::Shape(format!("model returned {} outputs for one input", vals.len())));
    }
    Ok(vals[0].as_f64())
}

/// Midpoint-rule Integrated Gradients of `f` at `x` (shape `[1, ...]`).
///
/// `f` maps a batch `[B, ...]` to `B` outputs with rows independent of each
/// other; all `steps` path points are evaluated as one batch.
pub fn integrated_gradients<T: Scalar, F>(f: F, x: &Tensor<T>, baseline: &Tensor<T>, steps: usize) -> Result<Attribution>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if steps < MIN_STEPS {
        return Err(Error::Config(format!("integrated gradients needs at least {MIN_STEPS} steps")));
    }
    if x.shape() != baseline.shape() || x.shape().first() != Some(&1) {
        return Err(Error::Shape(format!(
            "input {:?} and baseline {:?} must match with batch 1",
            x.shape(),
            baseline.shape()
        )));
    }
    let n = x.numel();
    let xs: Vec<f64> = x.to_f64_vec();
    let bs: Vec<f64> = baseline.to_f64_vec();
    let mut shape = x.shape().to_vec();
    shape[0] = steps;
    let path = Tensor::from_fn(&shape, |i| {
        let (k, j) = (i / n, i % n);
        let alpha = (k as f64 + 0.5) / steps as f64;
        T::from_f64_lossy(bs[j] + alpha * (xs[j] - bs[j]))
    });
    let mut tape = Tape::new();
    let pv = tape.variable(&path);
    let out = f(&mut tape, pv)?;
    if tape.value(out).len() != steps {
        return Err(Error::Shape("model must return one output per batch row".into()));
    }
    let total = tape.sum(out);
    tape.backward(total)?;
    let grad = tape.grad(pv).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); steps * n]);
    let mut avg = vec![0.0; n];
    for k in 0..steps {
        let row = &grad[k * n..(k + 1) * n];
        if let Some(j) = row.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric {
                step: k + 1,
                what: format!("gradient of input element {j}"),
            });
        }
        for (a, g) in avg.iter_mut().zip(row) {
            *a += g.as_f64() / steps as f64;
        }
    }
    let scores: Vec<f64> = avg.iter().zip(xs.iter().zip(&bs)).map(|(g, (x, b))| (x - b) * g).collect();
    let f_input = eval_scalar(&f, x)?;
    let f_baseline = eval_scalar(&f, baseline)?;
    let mut attr = Attribution {
        scores,
        baseline: bs,
        steps,
        f_input,
        f_baseline,
        completeness_gap: 0.0,
    };
    attr.completeness_gap = completeness_gap(&attr);
    Ok(attr)
}

/// `|Σ IG - (F(x) - F(baseline))|` from the values recorded on `attr`.
pub fn completeness_gap(attr: &Attribution) -> f64 {
    (attr.scores.iter().sum::<f64>() - (attr.f_input - attr.f_baseline)).abs()
}

/// Recomputes `F(x)` and `F(baseline)`, stores them and the gap on `attr`.
pub fn completeness_check<T: Scalar, F>(attr: &mut Attribution, f: F, x: &Tensor<T>, baseline: &Tensor<T>) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    attr.f_input = eval_scalar(&f, x)?;
    attr.f_baseline = eval_scalar(&f, baseline)?;
    attr.completeness_gap = completeness_gap(attr);
    Ok(attr.completeness_gap)
}

impl<T: Scalar> Classifier<T> {
    /// Probability of windows `x[B, m, w, w]` with running batch-norm stats.
    /// Dropout is off unless `dropout_seed` is set, in which case every row
    /// uses the same fixed mask.
    pub fn forward_windows(&self, tape: &mut Tape<T>, x: Var, dropout_seed: Option<u64>) -> Result<Var> {
        let pe = self.encoder.as_ref().map(|e| e.bind(tape, false));
        let feats = match (self.backbone, &self.encoder, &pe) {
            (crate::clf::Backbone::Raw, _, _) => {
                let s = tape.shape(x).to_vec();
                tape.reshape(x, &[s[0], s[1..].iter().product()])?
            }
            (_, Some(enc), Some(pe)) => enc.pooled(tape, pe, x)?,
            _ => return Err(Error::Contract("encoder backbone without an encoder".into())),
        };
        let ph = self.mlp.store.bind(tape, false);
        let b = tape.shape(x)[0];
        let (y, _) = match dropout_seed {
            None => self.mlp.forward(tape, &ph, feats, NormMode::Eval, DropoutCtl::Off)?,
            Some(seed) => {
                let base = RngStream::from_seed(seed).derive("ig-dropout");
                let mut rngs = vec![base; b];
                self.mlp.forward(tape, &ph, feats, NormMode::Eval, DropoutCtl::PerRow(&mut rngs))?
            }
        };
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XaiConfig {
    pub steps: usize,
    /// Attribute a fixed dropout mask drawn from this seed instead of the
    /// dropout-free network.
    pub dropout_seed: Option<u64>,
    /// Evaluate every `stride`-th pixel in both directions.
    pub stride: usize,
}

impl Default for XaiConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            dropout_seed: None,
            stride: 4,
        }
    }
}

/// IG of the classifier at one window with a zero baseline.
pub fn explain_pixel<T: Scalar>(clf: &Classifier<T>, raster: &MultiBandRaster, row: usize, col: usize, w: usize, cfg: &XaiConfig) -> Result<Attribution> {
    let x: Tensor<T> = raster.windows(&[(row, col)], w)?;
    let baseline = Tensor::zeros(x.shape());
    integrated_gradients(|t, v| clf.forward_windows(t, v, cfg.dropout_seed), &x, &baseline, cfg.steps)
}

/// Per-band attribution maps: band `j` of the result holds, at each
/// evaluated pixel, the summed attribution of input band `j` over the
/// window. Unevaluated pixels are NaN and flagged nodata.
pub fn attribution_maps<T: Scalar>(clf: &Classifier<T>, raster: &MultiBandRaster, pixels: &[(usize, usize)], w: usize, cfg: &XaiConfig) -> Result<(MultiBandRaster, Vec<Attribution>)> {
    let (rows, cols, m) = (raster.rows(), raster.cols(), raster.bands());
    let attrs: Vec<Attribution> = pixels
        .par_iter()
        .map(|&(r, c)| explain_pixel(clf, raster, r, c, w, cfg))
        .collect::<Result<_>>()?;
    let plane = w * w;
    let mut data = vec![f32::NAN; m * rows * cols];
    let mut nodata = vec![true; rows * cols];
    for (&(r, c), a) in pixels.iter().zip(&attrs) {
        nodata[r * cols + c] = false;
        for j in 0..m {
            data[(j * rows + r) * cols + c] = a.band_total(j, plane) as f32;
        }
    }
    let names = raster.band_names().iter().map(|n| format!("ig_{n}")).collect();
    Ok((MultiBandRaster::new(rows, cols, names, data, Some(nodata), *raster.transform())?, attrs))
}

/// One band of [`attribution_maps`].
pub fn attribution_map<T: Scalar>(clf: &Classifier<T>, raster: &MultiBandRaster, band: usize, pixels: &[(usize, usize)], w: usize, cfg: &XaiConfig) -> Result<Vec<f32>> {
    if band >= raster.bands() {
        return Err(Error::Dimension(format!("band {band} out of range for {} bands", raster.bands())));
    }
    let (maps, _) = attribution_maps(clf, raster, pixels, w, cfg)?;
    Ok(maps.band(band).to_vec())
}
