use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{patchify, Adam, AdamConfig, CosineSchedule, Encoder, ParamStore, VitConfig};
use crate::raster::MultiBandRaster;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

use super::mask::MaskPlan;
use super::model::{masked_mse_loss, mse_loss, DecoderConfig, LossOn, MaeModel};
use super::quality::{psnr, ssim};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    pub encoder: VitConfig,
    pub decoder: DecoderConfig,
    pub mask_ratio: f64,
    pub loss_on: LossOn,
    pub epochs: usize,
    pub batch_size: usize,
    /// Windows drawn (without replacement) from the training pool each
    /// epoch; 0 uses the whole pool.
    pub samples_per_epoch: usize,
    /// Windows withheld from training for the SSIM/PSNR monitors.
    pub heldout: usize,
    pub adam: AdamConfig,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    /// Emit reconstructions to the observer every this many epochs (0: never).
    pub recon_every: usize,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            encoder: VitConfig::default(),
            decoder: DecoderConfig::default(),
            mask_ratio: 0.75,
            loss_on: LossOn::All,
            epochs: 30,
            batch_size: 64,
            samples_per_epoch: 1024,
            heldout: 128,
            adam: AdamConfig::default(),
            warmup_epochs: 2,
            min_lr: 1e-5,
            recon_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ssim: f64,
    pub psnr: f64,
}

/// Held-out originals and reconstructions, `[n, m, w, w]`.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub original: Tensor<f32>,
    pub recon: Tensor<f32>,
    pub plans: Vec<MaskPlan>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters the model holds on return (0: untrained).
    pub best_epoch: usize,
    pub best_psnr: f64,
    /// Data range used as the PSNR/SSIM peak.
    pub peak: f64,
    pub train_windows: usize,
    pub heldout_windows: usize,
}

struct Heldout<T: Scalar> {
    x: Tensor<T>,
    plans: Vec<MaskPlan>,
    peak: f64,
}

fn batch_loss<T: Scalar>(model: &MaeModel<T>, x: &Tensor<T>, plans: &[MaskPlan], loss_on: LossOn, train: bool) -> Result<(Tape<T>, crate::Var, crate::nn::Bound, crate::nn::Bound, crate::Var)> {
    let mut tape = Tape::new();
    let (pe, pd) = model.bind(&mut tape, train);
    let xv = tape.constant(x);
    let out = model.forward(&mut tape, &pe, &pd, xv, plans)?;
    let target = patchify(&mut tape, xv, model.encoder.cfg.patch)?;
    let loss = match loss_on {
        LossOn::All => mse_loss(&mut tape, out.patches, target)?,
        LossOn::Masked => masked_mse_loss(&mut tape, out.patches, target, plans)?,
    };
    Ok((tape, loss, pe, pd, out.image))
}

/// Mean SSIM and PSNR of the held-out reconstructions, plus the first few
/// reconstructions for inspection.
fn evaluate<T: Scalar>(model: &MaeModel<T>, h: &Heldout<T>, batch: usize, keep: usize) -> Result<(f64, f64, Reconstruction)> {
    let cfg = &model.encoder.cfg;
    let per = cfg.bands * cfg.window * cfg.window;
    let n = h.plans.len();
    let (mut s_sum, mut p_sum) = (0.0, 0.0);
    let mut recon_keep = Vec::new();
    for start in (0..n).step_by(batch.max(1)) {
        let end = (start + batch).min(n);
        let x = Tensor::new(&[end - start, cfg.bands, cfg.window, cfg.window], h.x.data()[start * per..end * per].to_vec())?;
        let (tape, _, _, _, image) = batch_loss(model, &x, &h.plans[start..end], LossOn::All, false)?;
        let rec = tape.value(image);
        for i in 0..end - start {
            let a: Vec<f64> = x.data()[i * per..(i + 1) * per].iter().map(|v| v.as_f64()).collect();
            let b: Vec<f64> = rec[i * per..(i + 1) * per].iter().map(|v| v.as_f64()).collect();
            s_sum += ssim(&a, &b, cfg.bands, cfg.window, cfg.window, h.peak);
            p_sum += psnr(&a, &b, h.peak);
            if start + i < keep {
                recon_keep.extend(b.iter().map(|&v| v as f32));
            }
        }
    }
    let k = keep.min(n);
    let original = Tensor::from_fn(&[k, cfg.bands, cfg.window, cfg.window], |i| h.x.data()[i].as_f64() as f32);
    let recon = Tensor::new(&[k, cfg.bands, cfg.window, cfg.window], recon_keep)?;
    Ok((
        s_sum / n as f64,
        p_sum / n as f64,
        Reconstruction {
            original,
            recon,
            plans: h.plans[..k].to_vec(),
        },
    ))
}

/// Minibatch training of the reconstruction objective on windows centered at
/// `centers`. No label information is consulted. On return the model holds
/// the parameters of the epoch with the best held-out PSNR.
pub fn pretrain<T: Scalar>(
    model: &mut MaeModel<T>,
    raster: &MultiBandRaster,
    centers: &[(usize, usize)],
    cfg: &MaeConfig,
    seed: u64,
    observer: &mut dyn FnMut(&EpochRecord, Option<&Reconstruction>),
) -> Result<PretrainReport> {
    let ecfg = model.encoder.cfg.clone();
    if raster.bands() != ecfg.bands {
        return Err(Error::Shape(format!(
            "raster has {} bands, model expects {}",
            raster.bands(),
            ecfg.bands
        )));
    }
    if centers.len() < 2 {
        return Err(Error::Contract("pretraining needs at least two windows".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let root = RngStream::from_seed(seed).derive("pretrain");
    let np = ecfg.num_patches();

    let n_hold = cfg.heldout.clamp(1, centers.len() / 4).max(1);
    let mut hold_idx = root.derive("heldout").choose_distinct(centers.len(), n_hold);
    hold_idx.sort_unstable();
    let mut is_hold = vec![false; centers.len()];
    for &i in &hold_idx {
        is_hold[i] = true;
    }
    let hold_centers: Vec<_> = hold_idx.iter().map(|&i| centers[i]).collect();
    let pool: Vec<(usize, usize)> = centers.iter().enumerate().filter(|(i, _)| !is_hold[*i]).map(|(_, &c)| c).collect();
    let hx: Tensor<T> = raster.windows(&hold_centers, ecfg.window)?;
    let (lo, hi) = hx
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.as_f64()), hi.max(v.as_f64())));
    let peak = if hi > lo { hi - lo } else { 1.0 };
    let mut mrng = root.derive("heldout-masks");
    let hplans = (0..n_hold)
        .map(|_| MaskPlan::sample(np, cfg.mask_ratio, &mut mrng))
        .collect::<Result<Vec<_>>>()?;
    let held = Heldout { x: hx, plans: hplans, peak };

    let per_epoch = if cfg.samples_per_epoch == 0 {
        pool.len()
    } else {
        cfg.samples_per_epoch.min(pool.len())
    };
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch_size) as u64;
    let schedule = CosineSchedule {
        base_lr: cfg.adam.lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_epochs as u64 * steps_per_epoch,
        total_steps: cfg.epochs as u64 * steps_per_epoch,
    };
    let mut opt_e = Adam::new(cfg.adam, &model.encoder.store);
    let mut opt_d = Adam::new(cfg.adam, &model.decoder.store);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore<T>, ParamStore<T>)> = None;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut erng = root.derive_index(epoch as u64);
        let mut order = pool.clone();
        erng.shuffle(&mut order);
        order.truncate(per_epoch);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x: Tensor<T> = raster.windows(chunk, ecfg.window)?;
            let plans = (0..chunk.len())
                .map(|_| MaskPlan::sample(np, cfg.mask_ratio, &mut erng))
                .collect::<Result<Vec<_>>>()?;
            let (mut tape, loss, pe, pd, _) = batch_loss(model, &x, &plans, cfg.loss_on, true)?;
            let lv = tape.scalar_value(loss)?.as_f64();
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, loss: lv });
            }
            tape.backward(loss)?;
            model.encoder.store.collect_grads(&tape, &pe)?;
            model.decoder.store.collect_grads(&tape, &pd)?;
            let lr = schedule.lr(step);
            opt_e.step(&mut model.encoder.store, lr);
            opt_d.step(&mut model.decoder.store, lr);
            step += 1;
            loss_sum += lv * chunk.len() as f64;
            count += chunk.len();
        }
        if !(model.encoder.store.all_finite() && model.decoder.store.all_finite()) {
            return Err(Error::Diverged {
                epoch,
                loss: f64::NAN,
            });
        }
        let want_recon = cfg.recon_every > 0 && (epoch % cfg.recon_every == 0 || epoch == cfg.epochs);
        let (s, p, recon) = evaluate(model, &held, cfg.batch_size, if want_recon { 4 } else { 0 })?;
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / count.max(1) as f64,
            ssim: s,
            psnr: p,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} ssim {:.4} psnr {:.2} dB",
            rec.loss,
            rec.ssim,
            rec.psnr
        );
        observer(&rec, want_recon.then_some(&recon));
        if best.as_ref().is_none_or(|b| p > b.1) {
            best = Some((epoch, p, model.encoder.store.clone(), model.decoder.store.clone()));
        }
        history.push(rec);
    }
    let (best_epoch, best_psnr) = match best {
        Some((e, p, enc, dec)) => {
            model.encoder.store.copy_from(&enc)?;
            model.decoder.store.copy_from(&dec)?;
            (e, p)
        }
        None => (0, f64::NAN),
    };
    Ok(PretrainReport {
        history,
        best_epoch,
        best_psnr,
        peak,
        train_windows: pool.len(),
        heldout_windows: n_hold,
    })
}

/// Mean-pooled encoder features `[N, D]` of `[N, m, w, w]` windows, computed
/// in chunks of `batch`.
pub fn extract_features<T: Scalar>(encoder: &Encoder<T>, windows: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
    let s = windows.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected [N, m, w, w] windows, got {s:?}")));
    }
    let per: usize = s[1..].iter().product();
    let d = encoder.cfg.dim;
    let mut out = Vec::with_capacity(s[0] * d);
    for start in (0..s[0]).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(s[0]);
        let x = Tensor::new(&[end - start, s[1], s[2], s[3]], windows.data()[start * per..end * per].to_vec())?;
        let mut tape = Tape::new();
        let p = encoder.bind(&mut tape, false);
        let xv = tape.constant(&x);
        let f = encoder.pooled(&mut tape, &p, xv)?;
        out.extend_from_slice(tape.value(f));
    }
    Tensor::new(&[s[0], d], out)
}

/// Features for windows centered at `centers` of `raster`.
pub fn features_at<T: Scalar>(
    encoder: &Encoder<T>,
    raster: &MultiBandRaster,
    centers: &[(usize, usize)],
    batch: usize,
) -> Result<Tensor<T>> {
    let d = encoder.cfg.dim;
    let mut out = Vec::with_capacity(centers.len() * d);
    for chunk in centers.chunks(batch.max(1)) {
        let x: Tensor<T> = raster.windows(chunk, encoder.cfg.window)?;
        out.extend_from_slice(extract_features(encoder, &x, chunk.len())?.data());
    }
    Tensor::new(&[centers.len(), d], out)
}
