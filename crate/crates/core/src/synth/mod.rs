//! Synthetic worlds: correlated Gaussian random field layers, a planted
//! prospectivity rule and deposits drawn from it.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{DepositRecord, GeoTransform, MultiBandRaster};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `Σ weights[i] * layer[layers[i]] + bias`, squashed by a logistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepositRule {
    pub layers: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Default for DepositRule {
    fn default() -> Self {
        Self {
            layers: vec![0, 5, 10, 15],
            weights: vec![1.6, 1.2, -1.0, 0.8],
            bias: -3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub rows: usize,
    pub cols: usize,
    pub n_layers: usize,
    /// Gaussian-covariance length of each layer, in pixels. Cycled when
    /// shorter than `n_layers`.
    pub correlation_length: Vec<f64>,
    /// Layers sharing `k % n_groups` share a latent field.
    pub n_groups: usize,
    /// Fraction of each layer's variance explained by its group field.
    pub group_share: f64,
    pub rule: DepositRule,
    pub n_deposits: usize,
    /// Deposits are drawn with probability proportional to prospectivity^gamma.
    pub gamma: f64,
    /// Fraction of pixels per layer set missing (NaN).
    pub missing_fraction: f64,
    /// Fraction of pixels per layer replaced by large spikes.
    pub outlier_fraction: f64,
    pub pixel_size: f64,
    pub deposit_type: String,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            n_layers: 24,
            correlation_length: vec![3.0, 4.0, 5.0, 6.0],
            n_groups: 6,
            group_share: 0.6,
            rule: DepositRule::default(),
            n_deposits: 40,
            gamma: 4.0,
            missing_fraction: 0.005,
            outlier_fraction: 0.001,
            pixel_size: 1000.0,
            deposit_type: "MVT".into(),
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.n_layers == 0 {
            return Err(Error::Config("world must have rows, columns and layers".into()));
        }
        if self.n_deposits * 100 >= self.rows * self.cols {
            return Err(Error::Config(format!(
                "{} deposits is too many for a {}x{} world",
                self.n_deposits, self.rows, self.cols
            )));
        }
        if self.rule.layers.len() != self.rule.weights.len() || self.rule.layers.iter().any(|&l| l >= self.n_layers) {
            return Err(Error::Config("deposit rule references invalid layers".into()));
        }
        if self.correlation_length.is_empty() || self.correlation_length.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("correlation lengths must be positive".into()));
        }
        if self.n_groups == 0 || !(0.0..=1.0).contains(&self.group_share) {
            return Err(Error::Config("need at least one group and a share in [0, 1]".into()));
        }
        if !(0.0..0.5).contains(&self.missing_fraction) || !(0.0..0.5).contains(&self.outlier_fraction) {
            return Err(Error::Config("corruption fractions must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    pub fn length_of(&self, layer: usize) -> f64 {
        self.correlation_length[layer % self.correlation_length.len()]
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub raster: MultiBandRaster,
    /// One-band raster of true prospectivity in (0, 1).
    pub truth: MultiBandRaster,
    pub deposits: Vec<DepositRecord>,
}

fn fft2(buf: &mut [Complex64], rows: usize, cols: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (fr, fc) = if inverse {
        (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
    } else {
        (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
    };
    for row in buf.chunks_mut(cols) {
        fr.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = buf[r * cols + c];
        }
        fc.process(&mut col);
        for r in 0..rows {
            buf[r * cols + c] = col[r];
        }
    }
}

/// Zero-mean, unit-variance stationary field with covariance
/// `exp(-d^2 / (2 length^2))`, synthesized on a doubled periodic grid and
/// cropped so the wrap-around does not show.
pub fn gaussian_random_field(rows: usize, cols: usize, length: f64, rng: &mut RngStream) -> Vec<f64> {
    let (pr, pc) = (2 * rows, 2 * cols);
    let mut buf: Vec<Complex64> = (0..pr * pc).map(|_| Complex64::new(rng.normal(), 0.0)).collect();
    fft2(&mut buf, pr, pc, false);
    let freq = |i: usize, n: usize| -> f64 {
        let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
        k / n as f64
    };
    for r in 0..pr {
        let fy = freq(r, pr);
        for c in 0..pc {
            let fx = freq(c, pc);
            buf[r * pc + c] *= (-PI * PI * length * length * (fx * fx + fy * fy)).exp();
        }
    }
    fft2(&mut buf, pr, pc, true);
    let mut out: Vec<f64> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| buf[r * pc + c].re)
        .collect();
    standardize_in_place(&mut out);
    out
}

fn standardize_in_place(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    for x in v {
        *x = (*x - mean) / sd;
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Prospectivity of every pixel under `rule`, from the named layers of
/// `layers[k]` (each `rows * cols`).
pub fn rule_prospectivity(rule: &DepositRule, layers: &[&[f64]]) -> Vec<f64> {
    let n = layers.first().map_or(0, |l| l.len());
    (0..n)
        .map(|i| {
            let z: f64 = rule
                .layers
                .iter()
                .zip(&rule.weights)
                .map(|(&l, &w)| w * layers[l][i])
                .sum();
            sigmoid(z + rule.bias)
        })
        .collect()
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let (rows, cols, m) = (spec.rows, spec.cols, spec.n_layers);
    let n = rows * cols;
    let root = RngStream::from_seed(spec.seed).derive("world");
    let groups: Vec<Vec<f64>> = (0..spec.n_groups.min(m))
        .map(|g| gaussian_random_field(rows, cols, spec.length_of(g), &mut root.derive("group").derive_index(g as u64)))
        .collect();
    let a = spec.group_share.sqrt();
    let b = (1.0 - spec.group_share).sqrt();
    let layers: Vec<Vec<f64>> = (0..m)
        .map(|k| {
            let own = gaussian_random_field(rows, cols, spec.length_of(k), &mut root.derive("layer").derive_index(k as u64));
            let shared = &groups[k % groups.len()];
            let mut v: Vec<f64> = shared.iter().zip(&own).map(|(s, o)| a * s + b * o).collect();
            standardize_in_place(&mut v);
            v
        })
        .collect();
    let refs: Vec<&[f64]> = layers.iter().map(Vec::as_slice).collect();
    let truth = rule_prospectivity(&spec.rule, &refs);

    // Weighted sampling without replacement via exponential keys.
    let mut drng = root.derive("deposits");
    let mut keys: Vec<(f64, usize)> = truth
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let w = p.powf(spec.gamma).max(f64::MIN_POSITIVE);
            let u = drng.uniform().max(f64::MIN_POSITIVE);
            (u.ln() / w, i)
        })
        .collect();
    keys.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let mut picks: Vec<usize> = keys.iter().take(spec.n_deposits).map(|&(_, i)| i).collect();
    picks.sort_unstable();

    let transform = GeoTransform {
        origin_x: 0.0,
        origin_y: rows as f64 * spec.pixel_size,
        pixel_w: spec.pixel_size,
        pixel_h: -spec.pixel_size,
    };
    let deposits = picks
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let (r, c) = (i / cols, i % cols);
            let (x, y) = transform.pixel_to_map(r, c);
            DepositRecord {
                id: format!("D{k:04}"),
                x: x + 0.5 * transform.pixel_w,
                y: y + 0.5 * transform.pixel_h,
                deposit_type: spec.deposit_type.clone(),
            }
        })
        .collect();

    let mut crng = root.derive("corruption");
    let mut data = Vec::with_capacity(m * n);
    for layer in &layers {
        let mut plane: Vec<f32> = layer.iter().map(|&v| v as f32).collect();
        for v in plane.iter_mut() {
            let u = crng.uniform();
            if u < spec.missing_fraction {
                *v = f32::NAN;
            } else if u < spec.missing_fraction + spec.outlier_fraction {
                *v = if crng.uniform() < 0.5 { -25.0 } else { 25.0 };
            }
        }
        data.extend(plane);
    }
    let names = (0..m).map(|k| format!("layer{k:02}")).collect();
    let raster = MultiBandRaster::new(rows, cols, names, data, None, transform)?;
    let truth = MultiBandRaster::new(
        rows,
        cols,
        vec!["prospectivity".into()],
        truth.iter().map(|&p| p as f32).collect(),
        None,
        transform,
    )?;
    Ok(World { raster, truth, deposits })
}

/// Zeroes `round(drop_fraction * m)` randomly chosen whole layers of every
/// `[N, m, w, w]` sample. Returns the dropped layers of each sample, sorted.
pub fn degrade_features<T: Scalar>(samples: &mut Tensor<T>, drop_fraction: f64, rng: &mut RngStream) -> Result<Vec<Vec<usize>>> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::Config(format!("drop fraction {drop_fraction} outside [0, 1)")));
    }
    let s = samples.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected [N, m, w, w], got {s:?}")));
    }
    let (n, m, plane) = (s[0], s[1], s[2] * s[3]);
    let k = (drop_fraction * m as f64).round() as usize;
    let mut masks = Vec::with_capacity(n);
    if k == 0 {
        return Ok(vec![Vec::new(); n]);
    }
    let data = samples.data_mut();
    for i in 0..n {
        let mut drop = rng.choose_distinct(m, k);
        drop.sort_unstable();
        for &j in &drop {
            let start = (i * m + j) * plane;
            data[start..start + plane].fill(T::zero());
        }
        masks.push(drop);
    }
    Ok(masks)
}
