//! Prospectivity classifier: a backbone (frozen encoder, trainable encoder or
//! raw pixels) followed by an MLP head with batch norm, PReLU and dropout.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use std::path::Path;

use crate::mae::{extract_features, features_at};
use crate::metrics::ConfusionCounts;
use crate::nn::{checkpoint, parse_arch, Adam, AdamConfig, BatchNorm, BatchStats, Bound, Dropout, Encoder, Linear, NormMode, PRelu, ParamStore, VitConfig};
use crate::raster::MultiBandRaster;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClfConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs without a validation-F1 improvement before stopping.
    pub patience: usize,
    pub mc_passes: usize,
    pub threshold: f64,
}

impl Default for ClfConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 32],
            dropout: 0.2,
            epochs: 200,
            batch_size: 32,
            adam: AdamConfig::default(),
            patience: 20,
            mc_passes: 50,
            threshold: 0.5,
        }
    }
}

/// Source of dropout masks for one MLP forward pass.
pub enum DropoutCtl<'a> {
    Off,
    /// One stream for the whole batch (training).
    Shared(&'a mut RngStream),
    /// One stream per batch row, so a row's masks do not depend on its
    /// neighbours or on batching.
    PerRow(&'a mut [RngStream]),
}

#[derive(Debug, Clone)]
struct Hidden {
    linear: Linear,
    norm: BatchNorm,
    act: PRelu,
}

/// `D -> hidden... -> 1` with Linear, BatchNorm, PReLU and Dropout per hidden
/// layer and a sigmoid output.
#[derive(Debug, Clone)]
pub struct Mlp<T: Scalar> {
    pub store: ParamStore<T>,
    pub d_in: usize,
    pub hidden_sizes: Vec<usize>,
    hidden: Vec<Hidden>,
    out: Linear,
    pub dropout: Dropout,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(d_in: usize, hidden_sizes: &[usize], dropout: f64, rng: &mut RngStream) -> Result<Self> {
        let dropout = Dropout::new(dropout)?;
        let mut store = ParamStore::new();
        let mut hidden = Vec::new();
        let mut d = d_in;
        for (i, &h) in hidden_sizes.iter().enumerate() {
            hidden.push(Hidden {
                linear: Linear::new(&mut store, &format!("fc{i}"), d, h, true, rng),
                norm: BatchNorm::new(&mut store, &format!("bn{i}"), h),
                act: PRelu::new(&mut store, &format!("act{i}")),
            });
            d = h;
        }
        let out = Linear::new(&mut store, "out", d, 1, true, rng);
        Ok(Self {
            store,
            d_in,
            hidden_sizes: hidden_sizes.to_vec(),
            hidden,
            out,
            dropout,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    fn dropout_mask(&self, shape: &[usize], ctl: &mut DropoutCtl) -> Option<Tensor<T>> {
        if self.dropout.p == 0.0 {
            return None;
        }
        match ctl {
            DropoutCtl::Off => None,
            DropoutCtl::Shared(rng) => Some(self.dropout.mask(shape, rng)),
            DropoutCtl::PerRow(rngs) => {
                let width = shape[1];
                let mut data = Vec::with_capacity(shape[0] * width);
                for rng in rngs.iter_mut().take(shape[0]) {
                    data.extend_from_slice(self.dropout.mask::<T>(&[width], rng).data());
                }
                Tensor::new(shape, data).ok()
            }
        }
    }

    /// `x[B, D] -> probabilities [B]` plus batch statistics of every
    /// batch-norm layer in training mode.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var, mode: NormMode, mut dropout: DropoutCtl) -> Result<(Var, Vec<BatchStats>)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.d_in {
            return Err(Error::Shape(format!("classifier expects [B, {}], got {s:?}", self.d_in)));
        }
        if let DropoutCtl::PerRow(r) = &dropout {
            if r.len() != s[0] {
                return Err(Error::Shape("one dropout stream per row required".into()));
            }
        }
        let mut h = x;
        let mut stats = Vec::new();
        for layer in &self.hidden {
            h = layer.linear.forward(tape, p, h)?;
            let (n, st) = layer.norm.forward(tape, p, h, mode)?;
            stats.extend(st);
            h = layer.act.forward(tape, p, n)?;
            if let Some(mask) = self.dropout_mask(tape.shape(h), &mut dropout) {
                let m = tape.constant(&mask);
                h = tape.mul(h, m)?;
            }
        }
        let z = self.out.forward(tape, p, h)?;
        let prob = tape.sigmoid(z);
        Ok((tape.reshape(prob, &[s[0]])?, stats))
    }

    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (layer, st) in self.hidden.iter().zip(stats) {
            layer.norm.update_running(&mut self.store, st);
        }
    }

    pub fn arch(&self) -> serde_json::Value {
        serde_json::json!({ "d_in": self.d_in, "hidden": self.hidden_sizes, "dropout": self.dropout.p })
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            store: self.store.cast(),
            d_in: self.d_in,
            hidden_sizes: self.hidden_sizes.clone(),
            hidden: self.hidden.clone(),
            out: self.out.clone(),
            dropout: self.dropout,
        }
    }
}

/// `-mean[y ln ŷ + (1 - y) ln(1 - ŷ)]` with ŷ clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Scalar>(tape: &mut Tape<T>, yhat: Var, y: Var) -> Result<Var> {
    if tape.shape(yhat) != tape.shape(y) {
        return Err(Error::Shape("prediction and label shapes differ".into()));
    }
    let eps = T::from_f64_lossy(BCE_EPS);
    let c = tape.clamp(yhat, eps, T::one() - eps);
    let log_p = tape.log(c);
    let neg = tape.neg(c);
    let one_minus = tape.add_scalar(neg, T::one());
    let log_q = tape.log(one_minus);
    let ny = tape.neg(y);
    let one_minus_y = tape.add_scalar(ny, T::one());
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(one_minus_y, log_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.neg(m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Pretrained encoder, features computed once and never updated.
    #[default]
    Frozen,
    /// Encoder trained jointly with the head from its initialization.
    EndToEnd,
    /// No encoder; the flattened window is the feature vector.
    Raw,
}

#[derive(Debug, Clone)]
pub struct Classifier<T: Scalar> {
    pub backbone: Backbone,
    pub encoder: Option<Encoder<T>>,
    pub mlp: Mlp<T>,
}

/// Where the rows addressed by sample ids come from.
pub enum Inputs<'a, T: Scalar> {
    /// Precomputed backbone features `[N, D]`; id = row.
    Features(&'a Tensor<T>),
    /// Windows of `raster` centered at `centers[id]`.
    Windows {
        raster: &'a MultiBandRaster,
        centers: &'a [(usize, usize)],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    /// Mean BCE of the dropout-free validation predictions.
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfHistory {
    pub epochs: Vec<ClfEpoch>,
    /// Epoch whose parameters were kept (0: initialization).
    pub best_epoch: usize,
    pub best_val_f1: f64,
}

fn rows<T: Scalar>(x: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let d = x.shape()[1];
    let mut data = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        if i >= x.shape()[0] {
            return Err(Error::Dimension(format!("sample {i} outside feature matrix")));
        }
        data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(&[ids.len(), d], data)
}

impl<T: Scalar> Classifier<T> {
    pub fn new(backbone: Backbone, encoder: Option<Encoder<T>>, d_in: usize, cfg: &ClfConfig, rng: &mut RngStream) -> Result<Self> {
        let d = match (&backbone, &encoder) {
            (Backbone::Raw, _) => d_in,
            (_, Some(e)) => e.cfg.dim,
            (_, None) => return Err(Error::Config("encoder backbone needs an encoder".into())),
        };
        let encoder = if backbone == Backbone::Raw { None } else { encoder };
        Ok(Self {
            backbone,
            encoder,
            mlp: Mlp::new(d, &cfg.hidden, cfg.dropout, rng)?,
        })
    }

    /// Same model with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier {
            backbone: self.backbone,
            encoder: self.encoder.as_ref().map(Encoder::cast),
            mlp: self.mlp.cast(),
        }
    }

    /// Backbone features of windows `x[N, m, w, w]` on `tape`.
    fn embed(&self, tape: &mut Tape<T>, pe: Option<&Bound>, x: Var) -> Result<Var> {
        match (self.backbone, &self.encoder, pe) {
            (Backbone::Raw, _, _) => {
                let s = tape.shape(x).to_vec();
                tape.reshape(x, &[s[0], s[1..].iter().product()])
            }
            (_, Some(enc), Some(pe)) => enc.pooled(tape, pe, x),
            _ => Err(Error::Contract("encoder parameters were not bound".into())),
        }
    }

    /// Side of the input window.
    pub fn window(&self, bands: usize) -> usize {
        match &self.encoder {
            Some(enc) => enc.cfg.window,
            None => (self.mlp.d_in / bands.max(1)).isqrt(),
        }
    }

    /// Backbone features `[N, D]` for the given centers, no gradients.
    pub fn features(&self, raster: &MultiBandRaster, centers: &[(usize, usize)], batch: usize) -> Result<Tensor<T>> {
        match (self.backbone, &self.encoder) {
            (Backbone::Raw, _) => {
                let x: Tensor<T> = raster.windows(centers, self.window(raster.bands()))?;
                x.reshape(&[centers.len(), self.mlp.d_in])
            }
            (_, Some(enc)) => features_at(enc, raster, centers, batch),
            _ => Err(Error::Contract("encoder backbone without an encoder".into())),
        }
    }

    /// Backbone features `[N, D]` of windows `x[N, m, w, w]`, no gradients.
    pub fn window_features(&self, x: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
        let n = x.shape().first().copied().unwrap_or(0);
        match (self.backbone, &self.encoder) {
            (Backbone::Raw, _) => x.reshape(&[n, self.mlp.d_in]),
            (_, Some(enc)) => extract_features(enc, x, batch),
            _ => Err(Error::Contract("encoder backbone without an encoder".into())),
        }
    }

    pub fn arch(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "classifier",
            "backbone": self.backbone,
            "encoder": self.encoder.as_ref().map(|e| &e.cfg),
            "mlp": self.mlp.arch(),
        })
    }

    /// Writes the head and, when present, the encoder to one checkpoint.
    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let mut parts = vec![("mlp", &self.mlp.store)];
        if let Some(enc) = &self.encoder {
            parts.push(("encoder", &enc.store));
        }
        checkpoint::save(path, &self.arch(), seed, &parts)
    }

    pub fn load(path: &Path) -> Result<(Self, u64)> {
        #[derive(Deserialize)]
        struct MlpArch {
            d_in: usize,
            hidden: Vec<usize>,
            dropout: f64,
        }
        let m = checkpoint::read_manifest(path)?;
        let backbone: Backbone = parse_arch(path, &m.arch, "classifier", "backbone")?;
        let enc_cfg: Option<VitConfig> = parse_arch(path, &m.arch, "classifier", "encoder")?;
        let mlp: MlpArch = parse_arch(path, &m.arch, "classifier", "mlp")?;
        let mut rng = RngStream::from_seed(0);
        let encoder = enc_cfg.map(|c| Encoder::new(c, &mut rng)).transpose()?;
        let mut clf = Self {
            backbone,
            encoder,
            mlp: Mlp::new(mlp.d_in, &mlp.hidden, mlp.dropout, &mut rng)?,
        };
        let arch = clf.arch();
        let seed = {
            let Self { mlp, encoder, .. } = &mut clf;
            let mut parts = vec![("mlp", &mut mlp.store)];
            if let Some(enc) = encoder.as_mut() {
                parts.push(("encoder", &mut enc.store));
            }
            checkpoint::load(path, &arch, &mut parts)?
        };
        Ok((clf, seed))
    }

    fn materialize(&self, inputs: &Inputs<T>, ids: &[usize]) -> Result<Tensor<T>> {
        match inputs {
            Inputs::Features(x) => rows(x, ids),
            Inputs::Windows { raster, centers } => {
                let c: Vec<_> = ids.iter().map(|&i| centers[i]).collect();
                self.features(raster, &c, 64)
            }
        }
    }

    /// Deterministic probabilities (dropout off, running batch-norm stats).
    pub fn predict_features(&self, feats: &Tensor<T>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.mlp.store.bind(&mut tape, false);
        let x = tape.constant(feats);
        let (y, _) = self.mlp.forward(&mut tape, &p, x, NormMode::Eval, DropoutCtl::Off)?;
        Ok(tape.value(y).iter().map(|v| v.as_f64()).collect())
    }

    /// Trains the head (and, for [`Backbone::EndToEnd`], the encoder) with
    /// BCE on `train`, keeping the parameters of the best validation F1.
    /// Equal F1 goes to the lower validation loss, so a plateaued F1 on a
    /// small validation set does not freeze an untrained head.
    pub fn train(&mut self, inputs: &Inputs<T>, train: &[(usize, bool)], val: &[(usize, bool)], cfg: &ClfConfig, seed: u64) -> Result<ClfHistory> {
        if train.is_empty() {
            return Err(Error::Contract("no labeled training samples".into()));
        }
        if train.len() < 2 {
            return Err(Error::Contract("batch norm training needs at least two samples".into()));
        }
        if cfg.batch_size < 2 {
            return Err(Error::Config("classifier batch size must be at least 2".into()));
        }
        let end_to_end = self.backbone == Backbone::EndToEnd;
        if end_to_end && matches!(inputs, Inputs::Features(_)) {
            return Err(Error::Config("end-to-end training needs windows, not features".into()));
        }
        let root = RngStream::from_seed(seed).derive("classifier");

        // Fixed backbones: compute every needed feature row once.
        let train_ids: Vec<usize> = train.iter().map(|t| t.0).collect();
        let val_ids: Vec<usize> = val.iter().map(|t| t.0).collect();
        let cached = if end_to_end {
            None
        } else {
            Some((self.materialize(inputs, &train_ids)?, self.materialize(inputs, &val_ids)?))
        };

        let mut opt_h = Adam::new(cfg.adam, &self.mlp.store);
        let mut opt_e = self.encoder.as_ref().filter(|_| end_to_end).map(|e| Adam::new(cfg.adam, &e.store));
        let mut best = (0usize, (f64::NEG_INFINITY, f64::INFINITY), self.clone());
        let mut epochs = Vec::new();
        let mut since_best = 0;
        for epoch in 1..=cfg.epochs {
            let mut erng = root.derive_index(epoch as u64);
            let mut order: Vec<usize> = (0..train.len()).collect();
            erng.shuffle(&mut order);
            let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
            if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
                let n = order.len();
                batches.pop();
                let last = batches.pop().unwrap().len();
                batches.push(&order[n - last - 1..]);
            }
            let (mut loss_sum, mut count) = (0.0, 0);
            for batch in batches {
                let mut tape = Tape::new();
                let ph = self.mlp.store.bind(&mut tape, true);
                let (x, pe) = match &cached {
                    Some((xtr, _)) => {
                        let rows_idx: Vec<usize> = batch.to_vec();
                        (tape.constant(&rows(xtr, &rows_idx)?), None)
                    }
                    None => {
                        let Inputs::Windows { raster, centers } = inputs else { unreachable!() };
                        let enc = self.encoder.as_ref().expect("end-to-end has an encoder");
                        let c: Vec<_> = batch.iter().map(|&i| centers[train[i].0]).collect();
                        let w: Tensor<T> = raster.windows(&c, enc.cfg.window)?;
                        let pe = enc.bind(&mut tape, true);
                        let wv = tape.constant(&w);
                        (self.embed(&mut tape, Some(&pe), wv)?, Some(pe))
                    }
                };
                let y = Tensor::from_fn(&[batch.len()], |i| if train[batch[i]].1 { T::one() } else { T::zero() });
                let yv = tape.constant(&y);
                let (yhat, stats) = self.mlp.forward(&mut tape, &ph, x, NormMode::Train, DropoutCtl::Shared(&mut erng))?;
                let loss = bce_loss(&mut tape, yhat, yv)?;
                let lv = tape.scalar_value(loss)?.as_f64();
                if !lv.is_finite() {
                    return Err(Error::Diverged { epoch, loss: lv });
                }
                tape.backward(loss)?;
                self.mlp.store.collect_grads(&tape, &ph)?;
                opt_h.step(&mut self.mlp.store, cfg.adam.lr);
                self.mlp.update_running(&stats);
                if let (Some(pe), Some(opt), Some(enc)) = (pe, opt_e.as_mut(), self.encoder.as_mut()) {
                    enc.store.collect_grads(&tape, &pe)?;
                    opt.step(&mut enc.store, cfg.adam.lr);
                }
                loss_sum += lv * batch.len() as f64;
                count += batch.len();
            }
            let (val_f1, val_loss) = if val.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let vx = match &cached {
                    Some((_, xv)) => xv.clone(),
                    None => self.materialize(inputs, &val_ids)?,
                };
                let scores = self.predict_features(&vx)?;
                let labels: Vec<bool> = val.iter().map(|v| v.1).collect();
                let f1 = ConfusionCounts::from_scores(&scores, &labels, cfg.threshold)?.f1()?;
                (f1, mean_bce(&scores, &labels))
            };
            let train_loss = loss_sum / count as f64;
            epochs.push(ClfEpoch {
                epoch,
                train_loss,
                val_f1,
                val_loss,
            });
            let key = if val_f1.is_nan() { (0.0, train_loss) } else { (val_f1, val_loss) };
            if key.0 > best.1 .0 || (key.0 == best.1 .0 && key.1 < best.1 .1) {
                best = (epoch, key, self.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
        let best_val_f1 = if best.0 == 0 { f64::NAN } else { epochs[best.0 - 1].val_f1 };
        if best.0 > 0 {
            *self = best.2;
        }
        Ok(ClfHistory {
            epochs,
            best_epoch: best.0,
            best_val_f1,
        })
    }
}

fn mean_bce(scores: &[f64], labels: &[bool]) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if y {
                -q.ln()
            } else {
                -(1.0 - q).ln()
            }
        })
        .sum();
    total / scores.len() as f64
}

/// MC-dropout mean and unbiased variance of `passes` stochastic forward
/// passes per row of `feats[N, D]`. Row `i` draws its masks from `rngs[i]`.
///
/// The variance of a [0, 1] variable is at most 0.25 but the unbiased
/// estimate can reach `0.25 T / (T - 1)`, so it is clipped to 0.25.
pub fn mc_predict<T: Scalar>(mlp: &Mlp<T>, feats: &Tensor<T>, passes: usize, rngs: &mut [RngStream]) -> Result<(Vec<f64>, Vec<f64>)> {
    if passes == 0 {
        return Err(Error::Config("at least one MC pass required".into()));
    }
    let n = feats.shape()[0];
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    let mut draws = vec![Vec::with_capacity(passes); n];
    for _ in 0..passes {
        let mut tape = Tape::new();
        let p = mlp.store.bind(&mut tape, false);
        let x = tape.constant(feats);
        let (y, _) = mlp.forward(&mut tape, &p, x, NormMode::Eval, DropoutCtl::PerRow(rngs))?;
        for (i, v) in tape.value(y).iter().enumerate() {
            let v = v.as_f64();
            sum[i] += v;
            draws[i].push(v);
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / passes as f64).collect();
    for (i, d) in draws.iter().enumerate() {
        sq[i] = if passes > 1 {
            (d.iter().map(|v| (v - mean[i]).powi(2)).sum::<f64>() / (passes - 1) as f64).min(0.25)
        } else {
            0.0
        };
    }
    Ok((mean, sq))
}

/// Dropout stream of pixel `index` under `seed`.
pub fn pixel_stream(seed: u64, index: usize) -> RngStream {
    RngStream::from_seed(seed).derive("mc-dropout").derive_index(index as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProspectivityMap {
    pub rows: usize,
    pub cols: usize,
    /// MC mean likelihood; NaN where not evaluated.
    pub mean: Vec<f32>,
    /// MC standard deviation; NaN where not evaluated.
    pub std: Vec<f32>,
    pub evaluated: Vec<bool>,
}

impl ProspectivityMap {
    pub fn evaluated_count(&self) -> usize {
        self.evaluated.iter().filter(|&&e| e).count()
    }

    pub fn to_raster(&self, src: &MultiBandRaster) -> Result<MultiBandRaster> {
        let mut data = self.mean.clone();
        data.extend_from_slice(&self.std);
        MultiBandRaster::new(
            self.rows,
            self.cols,
            vec!["likelihood_mean".into(), "likelihood_std".into()],
            data,
            Some(self.evaluated.iter().map(|&e| !e).collect()),
            *src.transform(),
        )
    }
}

/// Every `stride`-th pixel in both directions, nodata skipped, row-major.
pub fn map_pixels(raster: &MultiBandRaster, stride: usize) -> Result<Vec<(usize, usize)>> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    Ok((0..raster.rows())
        .step_by(stride)
        .flat_map(|r| (0..raster.cols()).step_by(stride).map(move |c| (r, c)))
        .filter(|&(r, c)| !raster.is_nodata(r, c))
        .collect())
}

/// MC-dropout prediction at every `stride`-th pixel in both directions
/// (nodata pixels skipped). Chunks run in parallel; each pixel owns its
/// dropout stream, so the result does not depend on scheduling.
pub fn predict_map<T: Scalar>(clf: &Classifier<T>, raster: &MultiBandRaster, stride: usize, passes: usize, seed: u64, chunk: usize) -> Result<ProspectivityMap> {
    let pixels = map_pixels(raster, stride)?;
    let d = clf.mlp.d_in;
    let parts: Vec<Tensor<T>> = pixels
        .par_chunks(chunk.max(1))
        .map(|part| clf.features(raster, part, part.len()))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(pixels.len() * d);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let feats = Tensor::new(&[pixels.len(), d], data)?;
    map_from_features(&clf.mlp, &feats, &pixels, (raster.rows(), raster.cols()), passes, seed, chunk)
}

/// MC-dropout map from precomputed features, row `i` of `feats` belonging to
/// `pixels[i]` of a `shape` grid.
pub fn map_from_features<T: Scalar>(
    mlp: &Mlp<T>,
    feats: &Tensor<T>,
    pixels: &[(usize, usize)],
    shape: (usize, usize),
    passes: usize,
    seed: u64,
    chunk: usize,
) -> Result<ProspectivityMap> {
    let (rows, cols) = shape;
    let d = mlp.d_in;
    if feats.shape() != [pixels.len(), d] {
        return Err(Error::Shape(format!("{} pixels but features {:?}", pixels.len(), feats.shape())));
    }
    let chunk = chunk.max(1);
    let results: Vec<Vec<(usize, f64, f64)>> = pixels
        .par_chunks(chunk)
        .enumerate()
        .map(|(k, part)| -> Result<Vec<(usize, f64, f64)>> {
            let start = k * chunk;
            let f = Tensor::new(&[part.len(), d], feats.data()[start * d..(start + part.len()) * d].to_vec())?;
            let mut rngs: Vec<RngStream> = part.iter().map(|&(r, c)| pixel_stream(seed, r * cols + c)).collect();
            let (mean, var) = mc_predict(mlp, &f, passes, &mut rngs)?;
            Ok(part
                .iter()
                .zip(mean.iter().zip(&var))
                .map(|(&(r, c), (&m, &v))| (r * cols + c, m, v.max(0.0).sqrt()))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut map = ProspectivityMap {
        rows,
        cols,
        mean: vec![f32::NAN; rows * cols],
        std: vec![f32::NAN; rows * cols],
        evaluated: vec![false; rows * cols],
    };
    for (i, m, s) in results.into_iter().flatten() {
        if i >= rows * cols {
            return Err(Error::Dimension(format!("pixel index {i} outside {rows}x{cols}")));
        }
        map.mean[i] = m as f32;
        map.std[i] = s as f32;
        map.evaluated[i] = true;
    }
    Ok(map)
}

impl<T: Scalar> Classifier<T> {
    /// Trainable parameters (backbone included) and FLOPs of one
    /// single-window prediction.
    pub fn complexity(&self, bands: usize, window: usize) -> Result<crate::nn::Complexity> {
        let params = self.mlp.param_count() + self.encoder.as_ref().map_or(0, |e| e.param_count());
        let x = Tensor::<T>::zeros(&[1, bands, window, window]);
        let flops = crate::nn::count_flops(|tape| {
            let v = tape.constant(&x);
            self.forward_windows(tape, v, None)
        })?;
        Ok(crate::nn::Complexity { params, flops })
    }
}
