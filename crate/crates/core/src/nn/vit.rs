use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

use std::path::Path;

use super::checkpoint;
use super::layers::{LayerNorm, PatchEmbed, TransformerBlock};
use super::params::{Bound, ParamStore};

/// Shape hyperparameters of a patch-token transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub bands: usize,
    pub window: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Layer norm after the last block.
    pub final_norm: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            bands: 24,
            window: 16,
            patch: 4,
            dim: 256,
            depth: 6,
            heads: 8,
            mlp_ratio: 4,
            final_norm: true,
        }
    }
}

impl VitConfig {
    pub fn num_patches(&self) -> usize {
        let g = self.window / self.patch;
        g * g
    }

    pub fn patch_len(&self) -> usize {
        self.bands * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.window == 0 {
            return Err(Error::Config("encoder needs at least one band and a non-empty window".into()));
        }
        if self.patch == 0 || self.window % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch size {} does not divide window {}",
                self.patch, self.window
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::Config(format!("embedding dim {} must be divisible by 4", self.dim)));
        }
        Ok(())
    }
}

/// Patch embedding, a stack of pre-norm blocks and a final layer norm.
#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    pub cfg: VitConfig,
    pub store: ParamStore<T>,
    embed: PatchEmbed,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: VitConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let embed = PatchEmbed::new(&mut store, "embed", cfg.bands, cfg.window, cfg.patch, cfg.dim, rng)?;
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(&mut store, &format!("block{i}"), cfg.dim, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut store, "norm", cfg.dim);
        if !cfg.final_norm {
            for id in [norm.gamma, norm.beta] {
                store.get_mut(id).trainable = false;
            }
        }
        Ok(Self {
            cfg,
            store,
            embed,
            blocks,
            norm,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn bind(&self, tape: &mut Tape<T>, with_grad: bool) -> Bound {
        self.store.bind(tape, with_grad)
    }

    /// `x[B, m, w, w] -> tokens[B, K, D]`. With `keep`, only the listed patch
    /// positions of each batch entry enter the transformer (`K = keep[b].len()`),
    /// otherwise all `P` patches do.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var, keep: Option<&[Vec<usize>]>) -> Result<Var> {
        let mut h = self.embed.forward(tape, p, x)?;
        if let Some(keep) = keep {
            h = tape.gather_rows(h, keep)?;
        }
        for block in &self.blocks {
            h = block.forward(tape, p, h, None)?;
        }
        if self.cfg.final_norm {
            h = self.norm.forward(tape, p, h)?;
        }
        Ok(h)
    }

    /// Mean over the token axis of the full (unmasked) sequence, `[B, D]`.
    pub fn pooled(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.forward(tape, p, x, None)?;
        tape.mean_axis(h, 1, false)
    }

    pub fn arch(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "encoder", "config": self.cfg })
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        checkpoint::save(path, &self.arch(), seed, &[("encoder", &self.store)])
    }

    /// Rebuilds the encoder described by the checkpoint at `path` and loads
    /// its parameters. Returns the recorded seed too.
    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let m = checkpoint::read_manifest(path)?;
        let cfg: VitConfig = parse_arch(path, &m.arch, "encoder", "config")?;
        let mut enc = Self::new(cfg, &mut RngStream::from_seed(0))?;
        let arch = enc.arch();
        let seed = checkpoint::load(path, &arch, &mut [("encoder", &mut enc.store)])?;
        Ok((enc, seed))
    }

    /// Same architecture with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            embed: self.embed.clone(),
            blocks: self.blocks.clone(),
            norm: self.norm.clone(),
        }
    }
}

/// Field `field` of a checkpoint architecture of kind `kind`.
pub(crate) fn parse_arch<D: serde::de::DeserializeOwned>(path: &Path, arch: &serde_json::Value, kind: &str, field: &str) -> Result<D> {
    if arch.get("kind").and_then(|k| k.as_str()) != Some(kind) {
        return Err(Error::Malformed {
            path: path.into(),
            reason: format!("not a {kind} checkpoint"),
        });
    }
    serde_json::from_value(arch.get(field).cloned().unwrap_or_default()).map_err(|e| Error::Malformed {
        path: path.into(),
        reason: format!("{field}: {e}"),
    })
}
