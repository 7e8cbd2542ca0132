use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sincos_position_table, unpatchify, Bound, Encoder, LayerNorm, Linear, ParamId, ParamStore, TransformerBlock, VitConfig};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

use super::mask::MaskPlan;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub final_norm: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            final_norm: true,
        }
    }
}

/// Lightweight transformer that fills masked positions with a learned token
/// and maps every token back to pixel space.
#[derive(Debug, Clone)]
pub struct Decoder<T: Scalar> {
    pub cfg: DecoderConfig,
    pub store: ParamStore<T>,
    embed: Linear,
    pub mask_token: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    head: Linear,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(cfg: DecoderConfig, enc: &VitConfig, rng: &mut RngStream) -> Result<Self> {
        if cfg.heads == 0 || cfg.dim % cfg.heads != 0 || cfg.dim % 4 != 0 {
            return Err(Error::Config(format!(
                "decoder dim {} must be divisible by 4 and by {} heads",
                cfg.dim, cfg.heads
            )));
        }
        let grid = enc.window / enc.patch;
        let mut store = ParamStore::new();
        let embed = Linear::new(&mut store, "embed", enc.dim, cfg.dim, true, rng);
        let mask_token = store.add(
            "mask_token",
            Tensor::trunc_normal(&[cfg.dim], crate::nn::INIT_STD, rng),
            true,
        );
        let pos = store.add("pos", sincos_position_table(grid, cfg.dim)?, false);
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(&mut store, &format!("block{i}"), cfg.dim, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut store, "norm", cfg.dim);
        if !cfg.final_norm {
            for id in [norm.gamma, norm.beta] {
                store.get_mut(id).trainable = false;
            }
        }
        let head = Linear::new(&mut store, "head", cfg.dim, enc.patch_len(), true, rng);
        Ok(Self {
            cfg,
            store,
            embed,
            mask_token,
            pos,
            blocks,
            norm,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// `latent[B, K, D]` for the kept patches of `plans` to patch-space
    /// predictions `[B, P, m*p*p]` in original patch order.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, latent: Var, plans: &[MaskPlan]) -> Result<Var> {
        let s = tape.shape(latent).to_vec();
        let (b, k) = (s[0], s[1]);
        let n_patches = plans.first().map_or(0, |pl| pl.num_patches);
        if plans.len() != b || plans.iter().any(|pl| pl.kept.len() != k || pl.num_patches != n_patches) {
            return Err(Error::Shape("mask plans do not match the latent batch".into()));
        }
        let mut h = self.embed.forward(tape, p, latent)?;
        if n_patches > k {
            let fill = tape.broadcast_to(p[self.mask_token], &[b, n_patches - k, self.cfg.dim])?;
            h = tape.concat(&[h, fill], 1)?;
        }
        let restore: Vec<Vec<usize>> = plans.iter().map(MaskPlan::restore_order).collect();
        h = tape.gather_rows(h, &restore)?;
        h = tape.add(h, p[self.pos])?;
        for block in &self.blocks {
            h = block.forward(tape, p, h, None)?;
        }
        if self.cfg.final_norm {
            h = self.norm.forward(tape, p, h)?;
        }
        self.head.forward(tape, p, h)
    }

    pub fn cast<U: Scalar>(&self) -> Decoder<U> {
        Decoder {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            embed: self.embed.clone(),
            mask_token: self.mask_token,
            pos: self.pos,
            blocks: self.blocks.clone(),
            norm: self.norm.clone(),
            head: self.head.clone(),
        }
    }
}

/// Which pixels the reconstruction loss averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossOn {
    #[default]
    All,
    Masked,
}

#[derive(Debug, Clone)]
pub struct MaeModel<T: Scalar> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

/// Graph handles of one MAE forward pass.
pub struct MaeOutput {
    /// Patch-space prediction `[B, P, m*p*p]`.
    pub patches: Var,
    /// Stitched reconstruction `[B, m, w, w]`.
    pub image: Var,
    /// Encoder output on the kept tokens `[B, K, D]`.
    pub latent: Var,
}

impl<T: Scalar> MaeModel<T> {
    pub fn new(encoder: VitConfig, decoder: DecoderConfig, rng: &mut RngStream) -> Result<Self> {
        let encoder = Encoder::new(encoder, &mut rng.derive("encoder"))?;
        let decoder = Decoder::new(decoder, &encoder.cfg, &mut rng.derive("decoder"))?;
        Ok(Self { encoder, decoder })
    }

    pub fn arch(&self) -> serde_json::Value {
        serde_json::json!({ "encoder": self.encoder.cfg, "decoder": self.decoder.cfg })
    }

    pub fn bind(&self, tape: &mut Tape<T>, with_grad: bool) -> (Bound, Bound) {
        (self.encoder.bind(tape, with_grad), self.decoder.store.bind(tape, with_grad))
    }

    /// The encoder sees only the kept tokens; the decoder sees kept tokens plus
    /// mask tokens at every position.
    pub fn forward(&self, tape: &mut Tape<T>, pe: &Bound, pd: &Bound, x: Var, plans: &[MaskPlan]) -> Result<MaeOutput> {
        let keep: Vec<Vec<usize>> = plans.iter().map(|p| p.kept.clone()).collect();
        let latent = self.encoder.forward(tape, pe, x, Some(&keep))?;
        let k = keep.first().map_or(0, Vec::len);
        if tape.shape(latent)[1] != k {
            return Err(Error::Contract("encoder input length differs from kept patch count".into()));
        }
        let patches = self.decoder.forward(tape, pd, latent, plans)?;
        let image = unpatchify(tape, patches, self.encoder.cfg.bands, self.encoder.cfg.patch)?;
        Ok(MaeOutput { patches, image, latent })
    }

    pub fn cast<U: Scalar>(&self) -> MaeModel<U> {
        MaeModel {
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
        }
    }
}

/// Mean squared error over every element of `pred` and `target`.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::Shape(format!(
            "loss inputs {:?} and {:?} differ",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Squared error averaged over the masked patches only; `pred` and `target`
/// are patch-space `[B, P, L]`.
pub fn masked_mse_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var, plans: &[MaskPlan]) -> Result<Var> {
    let s = tape.shape(pred).to_vec();
    if s != tape.shape(target) || s.len() != 3 || plans.len() != s[0] {
        return Err(Error::Shape("masked loss inputs do not line up".into()));
    }
    let count: usize = plans.iter().map(|p| p.masked.len()).sum();
    if count == 0 {
        return Err(Error::Contract("masked loss with no masked patches".into()));
    }
    let (b, np) = (s[0], s[1]);
    let weight = Tensor::<T>::from_fn(&[b, np, 1], |i| {
        if plans[i / np].is_masked(i % np) {
            T::one()
        } else {
            T::zero()
        }
    });
    let w = tape.constant(&weight);
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    let sq = tape.mul(sq, w)?;
    let total = tape.sum(sq);
    Ok(tape.mul_scalar(total, T::from_f64_lossy(1.0 / (count * s[2]) as f64)))
}
